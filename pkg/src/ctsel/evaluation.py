"""Ground-truth counterfactual evaluation, sweeps, and aggregation.

Reliability is measured by re-simulating each patient from its stored
hidden state at the prediction time under the selected doses and
comparing against the model's prediction (rmse_selection, the displayed
formula) and against the desired trajectory (rmse_target, the prose
reading); both are reported throughout.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .datagen import Dataset, DosePolicyConfig, PatientTrajectory, observed_policy_dose
from .dynamics import System, TimeGrid, make_system, resimulate_horizon
from .hsic import hsic_value
from .models import History, SurrogateModel, TrainConfig, batch_history, train
from .selection import ConstraintSpec, SelectionConfig, SelectionResult, select_treatment_batch
from .uncertainty import EnsembleHandle, rank_by_uncertainty

log = logging.getLogger(__name__)

RECORD_FIELDS = ("dataset", "method", "constraint", "lambda", "replicate",
                 "patient", "rmse_selection", "rmse_target", "mean_variance")


@dataclass
class EvalRecord:
    """One evaluated selection: reliability metrics for one patient."""
    dataset: str
    method: str
    constraint: str
    lam: float
    replicate: int
    patient: int
    rmse_selection: float
    rmse_target: float
    mean_variance: float

    def row(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: d[k] for k in RECORD_FIELDS}


def default_target(system: str, tau: int = 10) -> np.ndarray:
    """Desired outcome trajectory: P_v setpoint 0.6 (CVS), Z1 -> 0 (COVID)."""
    level = 0.6 if system == "cvs" else 0.0
    return np.full(tau, level)


def evaluate_selection(result: SelectionResult, patient: PatientTrajectory,
                       system: System, grid: TimeGrid, target: np.ndarray,
                       dataset: str = "", method: str = "", constraint: str = "",
                       lam: float = 0.0, replicate: int = 0,
                       patient_index: int = 0) -> EvalRecord:
    """Re-simulate the ground truth under a* and score the selection."""
    t_index = grid.n_obs - 1
    if patient.state is None or patient.state.shape[0] <= t_index:
        raise ValueError("patient carries no hidden state at the prediction time")
    truth = resimulate_horizon(system, patient.state[t_index], result.a_star, grid)
    mu = result.final_estimate.mu
    rmse_selection = float(np.sqrt(np.mean((mu - truth) ** 2)))
    rmse_target = float(np.sqrt(np.mean((truth - np.asarray(target)) ** 2)))
    return EvalRecord(
        dataset=dataset or system.name,
        method=method or result.final_estimate.method,
        constraint=constraint,
        lam=lam,
        replicate=replicate,
        patient=patient_index,
        rmse_selection=rmse_selection,
        rmse_target=rmse_target,
        mean_variance=float(result.final_estimate.mean_variance),
    )


@dataclass
class SweepSpec:
    """Grid of sweep cells plus shared selection settings."""
    lambdas: list = field(default_factory=lambda: [0.0, 0.25, 4.0])
    replicates: int = 3
    constraints: list = field(default_factory=lambda: ["soft"])
    methods: list = field(default_factory=lambda: ["mc-dropout"])
    split: str = "test"
    mse_weight: float = 0.02
    steps: int = 50
    lr: float = 0.1
    base_seed: int = 0
    target: np.ndarray = None  # defaults to the per-system target

    def __post_init__(self):
        if not self.lambdas or not self.constraints or not self.methods:
            raise ValueError("sweep lists must be nonempty")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


def _cell_seed(base: int, *key) -> int:
    return int(np.random.SeedSequence(base, spawn_key=tuple(int(k) for k in key))
               .generate_state(1, np.uint64)[0])


def _constraint_from_name(name: str) -> ConstraintSpec:
    return ConstraintSpec(kind=name)


def select_and_evaluate(handle: EnsembleHandle, dataset: Dataset, lam: float,
                        constraint: ConstraintSpec, target: np.ndarray,
                        seed: int, split: str = "test", mse_weight: float = 0.02,
                        steps: int = 50, lr: float = 0.1, method: str = "",
                        replicate: int = 0) -> list:
    """Run selection on every patient of a split and evaluate each one."""
    patients = dataset.split(split)
    grid = dataset.grid
    system = make_system(dataset.manifest["system"])
    policy = DosePolicyConfig(**dataset.manifest["policy"])
    histories, _, _ = batch_history(patients, grid)
    init = np.array([observed_policy_dose(p, policy, grid) for p in patients])
    config = SelectionConfig(lam=lam, mse_weight=mse_weight, target=target,
                             constraint=constraint, steps=steps, lr=lr)
    results = select_treatment_batch(handle, histories, config, seed=seed,
                                     init_doses=init)
    records = []
    for i, (res, patient) in enumerate(zip(results, patients)):
        records.append(evaluate_selection(
            res, patient, system, grid, target,
            dataset=dataset.manifest["system"], patient_index=i,
            constraint=constraint.kind, lam=lam, method=method,
            replicate=replicate))
    return records


def run_lambda_sweep(spec: SweepSpec, dataset: Dataset, handles: dict,
                     out_dir=None) -> list:
    """Full sweep over (method, constraint, lambda, replicate) cells.

    handles maps method name -> EnsembleHandle. Deterministic given
    spec.base_seed; partial records are flushed per lambda when out_dir
    is given.
    """
    target = spec.target if spec.target is not None else \
        default_target(dataset.manifest["system"])
    records = []
    for mi, method in enumerate(spec.methods):
        handle = handles[method]
        for ci, cname in enumerate(spec.constraints):
            constraint = _constraint_from_name(cname)
            for li, lam in enumerate(spec.lambdas):
                cell = []
                for rep in range(spec.replicates):
                    seed = _cell_seed(spec.base_seed, mi, ci, li, rep)
                    cell.extend(select_and_evaluate(
                        handle, dataset, lam, constraint, target, seed,
                        split=spec.split, mse_weight=spec.mse_weight,
                        steps=spec.steps, lr=spec.lr,
                        method=method, replicate=rep))
                records.extend(cell)
                if out_dir is not None:
                    write_records(Path(out_dir) / "records.csv", records)
                log.info("sweep cell method=%s constraint=%s lambda=%g done "
                         "(%d records)", method, cname, lam, len(cell))
    return records


def summarize(records: list) -> list:
    """Per-cell mean and standard error across replicate means."""
    cells = {}
    for r in records:
        cells.setdefault((r.dataset, r.method, r.constraint, r.lam), []).append(r)
    rows = []
    for (ds, method, constraint, lam), cell in sorted(cells.items()):
        reps = sorted({r.replicate for r in cell})
        def rep_means(attr):
            return np.array([np.mean([getattr(r, attr) for r in cell
                                      if r.replicate == rep]) for rep in reps])
        row = {"dataset": ds, "method": method, "constraint": constraint,
               "lambda": lam, "n": len(cell)}
        for attr in ("rmse_selection", "rmse_target", "mean_variance"):
            means = rep_means(attr)
            row[f"{attr}_mean"] = float(means.mean())
            row[f"{attr}_stderr"] = float(means.std(ddof=1) / np.sqrt(len(means))
                                          if len(means) > 1 else 0.0)
        rows.append(row)
    return rows


def run_deferral_curve(records: list, percentiles=(10, 25, 50, 75, 100),
                       seed: int = 0) -> list:
    """Mean rmse_selection over least-uncertain p% vs a size-matched random subset.

    Records are grouped per (method, constraint, lambda, replicate) so
    each group is one selection run over the split.
    """
    groups = {}
    for r in records:
        groups.setdefault((r.dataset, r.method, r.constraint, r.lam, r.replicate),
                          []).append(r)
    rows = []
    for key, group in sorted(groups.items()):
        group = sorted(group, key=lambda r: r.patient)
        variances = [r.mean_variance for r in group]
        rmse = np.array([r.rmse_selection for r in group])
        for p in percentiles:
            rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(key[4], int(p))))
            _, least, rand = rank_by_uncertainty(variances, p, rng)
            rows.append({
                "dataset": key[0], "method": key[1], "constraint": key[2],
                "lambda": key[3], "replicate": key[4], "percent": p,
                "n": len(least),
                "rmse_least_uncertain": float(rmse[least].mean()),
                "rmse_random": float(rmse[rand].mean()),
            })
    return rows


@dataclass
class ConfoundingResult:
    hsic_weight: float
    replicate: int
    hsic_measured: float
    mean_rmse_selection: float
    records: list


def run_confounding_sweep(hsic_weights, dataset: Dataset, flavor: str = "crn-lite",
                          train_config: TrainConfig | None = None,
                          lam: float = 0.25, replicates: int = 3,
                          base_seed: int = 0, n_passes: int = 8) -> list:
    """Train surrogates at each balancing weight and score selection quality.

    The regularized quantity itself, HSIC(assigned treatment, encoder
    representation), is measured on the validation split of every
    trained model; selection reliability is evaluated at the given
    uncertainty weight.
    """
    train_config = train_config or TrainConfig()
    grid = dataset.grid
    system = dataset.manifest["system"]
    target = default_target(system)
    vhist, vfut_a, _ = batch_history(dataset.val, grid)
    results = []
    for wi, weight in enumerate(hsic_weights):
        for rep in range(replicates):
            seed = _cell_seed(base_seed, wi, rep)
            cfg = TrainConfig(epochs=train_config.epochs,
                              batch_size=train_config.batch_size,
                              lr=train_config.lr, hsic_weight=float(weight),
                              seed=seed, patience=train_config.patience,
                              weight_decay=train_config.weight_decay)
            model = SurrogateModel.create(flavor, d_x=3,
                                          rng=np.random.default_rng(seed))
            train(model, dataset, cfg)
            _, _, phi = model.encode_representation(vhist)
            measured = hsic_value(vfut_a[:, :1], phi)
            handle = EnsembleHandle(method="mc-dropout", members=[model],
                                    n_passes=n_passes)
            records = select_and_evaluate(
                handle, dataset, lam, ConstraintSpec(), target,
                _cell_seed(base_seed, wi, rep, 1), replicate=rep)
            results.append(ConfoundingResult(
                hsic_weight=float(weight), replicate=rep, hsic_measured=measured,
                mean_rmse_selection=float(np.mean([r.rmse_selection for r in records])),
                records=records))
            log.info("confounding cell weight=%g rep=%d hsic=%.3g rmse=%.4g",
                     weight, rep, measured, results[-1].mean_rmse_selection)
    return results


# -- CSV I/O -------------------------------------------------------------------

def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records(path, records: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for r in records:
            row = r.row()
            writer.writerow([_format(row[k]) for k in RECORD_FIELDS])
    return path


def read_records(path) -> list:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(RECORD_FIELDS):
            raise ValueError(f"unexpected records header: {reader.fieldnames}")
        for row in reader:
            records.append(EvalRecord(
                dataset=row["dataset"], method=row["method"],
                constraint=row["constraint"], lam=float(row["lambda"]),
                replicate=int(row["replicate"]), patient=int(row["patient"]),
                rmse_selection=float(row["rmse_selection"]),
                rmse_target=float(row["rmse_target"]),
                mean_variance=float(row["mean_variance"])))
    return records


def write_summary(path, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no summary rows to write")
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_format(row[k]) for k in fields])
    return path


def write_curves_svg(path, summary_rows: list, metric: str = "rmse_selection_mean") -> Path:
    """Line plot of the metric vs lambda (log-x, lambda = 0 pinned left)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    series = {}
    for row in summary_rows:
        series.setdefault((row["method"], row["constraint"]), []).append(row)
    fig, ax = plt.subplots(figsize=(6, 4))
    positive = [row["lambda"] for row in summary_rows if row["lambda"] > 0]
    zero_pos = min(positive) / 4 if positive else 1e-6
    for (method, constraint), rows in sorted(series.items()):
        rows = sorted(rows, key=lambda r: r["lambda"])
        xs = [zero_pos if r["lambda"] == 0 else r["lambda"] for r in rows]
        ys = [r[metric] for r in rows]
        err = [r.get(metric.replace("_mean", "_stderr"), 0.0) for r in rows]
        ax.errorbar(xs, ys, yerr=err, marker="o", capsize=3,
                    label=f"{method}/{constraint}")
    ax.set_xscale("log")
    if positive:
        ax.set_xticks([zero_pos] + sorted(set(positive)))
        ax.set_xticklabels(["0"] + [f"{v:g}" for v in sorted(set(positive))])
    ax.set_xlabel("uncertainty weight")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
