"""Command-line entry point tying the pipeline into reproducible runs.

Subcommands mirror the experiment stages so partial reruns are cheap:

    simulate     generate and persist a dataset
    train        fit surrogate model(s) on a dataset
    select       optimize doses for one patient and print the result
    sweep        lambda sweep over the test split, records + summary
    deferral     uncertainty-deferral curves from a records file
    confounding  HSIC-balancing-weight sweep
    report       summary.csv and curves.svg from a records file

Exit codes: 0 success, 1 usage/config error, 2 runtime error. The
CTSEL_SEED environment variable overrides the master seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation
from .config import ConfigError, load_config, write_resolved
from .datagen import (DatasetFormatError, DosePolicyConfig, generate_dataset,
                      load_dataset, observed_policy_dose, save_dataset)
from .dynamics import CovidParams, TimeGrid
from .models import (ModelFormatError, SurrogateModel, TrainConfig, load_model,
                     save_model, train)
from .selection import ConstraintSpec, SelectionConfig, select_treatment_batch
from .models import batch_history
from .uncertainty import EnsembleHandle, build_geometric_ensemble

log = logging.getLogger("ctsel")


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors (exit code contract)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(_fail(f"argument error: {message}"))


def _fail(message: str, code: int = 1) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _echo_config(cfg: dict) -> None:
    print(json.dumps(cfg, indent=2, sort_keys=True))


def _grid_from_cfg(cfg: dict) -> TimeGrid:
    sim = cfg["simulation"]
    return TimeGrid(dt=sim["dt"], n_obs=sim["n_obs"], n_horizon=sim["n_horizon"],
                    n_cycles=sim["n_cycles"])


def _sim_params(cfg: dict):
    sim = cfg["simulation"]
    if sim["system"] == "covid":
        return CovidParams(drug_coupling=sim["drug_coupling"])
    return None


def _constraint_from_cfg(sel: dict, kind: str | None = None) -> ConstraintSpec:
    return ConstraintSpec(kind=kind or sel["constraint"], alpha=sel["alpha"],
                          beta=sel["beta"], low=sel["range_low"],
                          high=sel["range_high"])


def _target_from_cfg(cfg: dict, system: str, tau: int) -> np.ndarray:
    explicit = cfg["selection"]["target"]
    if explicit:
        if len(explicit) == 1:
            return np.full(tau, float(explicit[0]))
        if len(explicit) != tau:
            raise ConfigError(f"selection.target must have 1 or {tau} entries")
        return np.asarray(explicit, dtype=np.float64)
    return evaluation.default_target(system, tau)


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(cfg: dict, args) -> int:
    sim = cfg["simulation"]
    policy = DosePolicyConfig.for_system(sim["system"], alpha=cfg["policy"]["alpha"],
                                         d_w0=cfg["policy"]["d_w0"],
                                         dose_scale=cfg["policy"]["dose_scale"])
    sizes = (sim["train_size"], sim["val_size"], sim["test_size"])
    dataset = generate_dataset(sim["system"], sizes=sizes, policy=policy,
                               grid=_grid_from_cfg(cfg), master_seed=cfg["seed"],
                               params=_sim_params(cfg))
    out = Path(cfg["out"])
    save_dataset(dataset, out)
    write_resolved(cfg, out)
    print(f"wrote dataset ({sizes[0]}/{sizes[1]}/{sizes[2]} patients) to {out}")
    return 0


def _load_handle(model_dir: Path, method: str, n_passes: int) -> EnsembleHandle:
    paths = sorted(model_dir.glob("member*.ctsm"))
    if not paths:
        raise ModelFormatError(f"no member*.ctsm models in {model_dir}")
    members = [load_model(p) for p in paths]
    if method == "mc-dropout":
        members = members[:1]
    return EnsembleHandle(method=method, members=members, n_passes=n_passes)


def cmd_train(cfg: dict, args) -> int:
    dataset = load_dataset(args.data)
    tr = cfg["training"]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    n_members = tr["ensemble"]
    method = cfg["uncertainty"]["method"]
    if method == "ensemble" and n_members < 2:
        n_members = cfg["uncertainty"]["n_passes"]
    if method == "geometric":
        n_members = max(n_members, 2)
    curves = {}
    members = []
    for k in range(n_members):
        seed = cfg["seed"] + 1000 * k
        model = SurrogateModel.create(tr["model"], d_x=3,
                                      rng=np.random.default_rng(seed),
                                      hidden=tr["hidden"], dropout=tr["dropout"],
                                      revin=tr["revin"],
                                      tau=dataset.grid.n_horizon)
        result = train(model, dataset, TrainConfig(
            epochs=tr["epochs"], batch_size=tr["batch_size"], lr=tr["lr"],
            hsic_weight=tr["hsic_weight"], seed=seed, patience=tr["patience"],
            weight_decay=tr["weight_decay"]))
        save_model(model, out / f"member{k:02d}.ctsm")
        curves[f"member{k:02d}"] = {"train": result.train_losses,
                                    "val": result.val_losses,
                                    "best_epoch": result.best_epoch}
        members.append(model)
        print(f"member {k}: best val loss "
              f"{min(result.val_losses) if result.val_losses else float('nan'):.6g}")
    with open(out / "losses.json", "w") as fh:
        json.dump(curves, fh, indent=2)
    write_resolved(cfg, out)
    print(f"wrote {n_members} model(s) to {out}")
    return 0


def cmd_select(cfg: dict, args) -> int:
    dataset = load_dataset(args.data)
    system = dataset.manifest["system"]
    unc = cfg["uncertainty"]
    handle = _load_handle(Path(args.model_dir), unc["method"], unc["n_passes"])
    if unc["method"] == "geometric" and len(handle.members) == 2:
        handle = build_geometric_ensemble(handle.members[0], handle.members[1],
                                          dataset, n_samples=unc["n_passes"])
    grid = dataset.grid
    patients = dataset.split(cfg["sweep"]["split"])
    if not 0 <= args.patient < len(patients):
        return _fail(f"patient index {args.patient} outside split of {len(patients)}")
    patient = patients[args.patient]
    sel = cfg["selection"]
    target = _target_from_cfg(cfg, system, grid.n_horizon)
    policy = DosePolicyConfig(**dataset.manifest["policy"])
    histories, _, _ = batch_history([patient], grid)
    result = select_treatment_batch(
        handle, histories,
        SelectionConfig(lam=sel["lambda"], mse_weight=sel["mse_weight"],
                        target=target, constraint=_constraint_from_cfg(sel),
                        steps=sel["steps"], lr=sel["lr"]),
        seed=cfg["seed"],
        init_doses=np.array([observed_policy_dose(patient, policy, grid)]))[0]
    record = evaluation.evaluate_selection(
        result, patient, evaluation.make_system(system), grid, target,
        lam=sel["lambda"], constraint=sel["constraint"], patient_index=args.patient)
    out = {
        "a_star": result.a_star.tolist(),
        "objective_best": float(result.objective_trace.min()),
        "best_step": result.best_step,
        "rmse_selection": record.rmse_selection,
        "rmse_target": record.rmse_target,
        "mean_variance": record.mean_variance,
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_sweep(cfg: dict, args) -> int:
    dataset = load_dataset(args.data)
    system = dataset.manifest["system"]
    unc = cfg["uncertainty"]
    sw = cfg["sweep"]
    out = Path(cfg["out"])
    handles = {}
    for method in sw["methods"]:
        handle = _load_handle(Path(args.model_dir), method, unc["n_passes"])
        if method == "geometric" and len(handle.members) == 2:
            handle = build_geometric_ensemble(handle.members[0], handle.members[1],
                                              dataset, n_samples=unc["n_passes"])
        handles[method] = handle
    spec = evaluation.SweepSpec(
        lambdas=[float(l) for l in sw["lambdas"]], replicates=sw["replicates"],
        constraints=list(sw["constraints"]), methods=list(sw["methods"]),
        split=sw["split"], mse_weight=cfg["selection"]["mse_weight"],
        steps=cfg["selection"]["steps"], lr=cfg["selection"]["lr"],
        base_seed=cfg["seed"],
        target=_target_from_cfg(cfg, system, dataset.grid.n_horizon))
    records = evaluation.run_lambda_sweep(spec, dataset, handles, out_dir=out)
    evaluation.write_records(out / "records.csv", records)
    evaluation.write_summary(out / "summary.csv", evaluation.summarize(records))
    write_resolved(cfg, out)
    print(f"wrote {len(records)} records to {out / 'records.csv'}")
    return 0


def cmd_deferral(cfg: dict, args) -> int:
    records = evaluation.read_records(args.records)
    rows = evaluation.run_deferral_curve(records, seed=cfg["seed"])
    out = Path(cfg["out"])
    path = evaluation.write_summary(out / "deferral.csv", rows)
    write_resolved(cfg, out)
    print(f"wrote {len(rows)} deferral rows to {path}")
    return 0


def cmd_confounding(cfg: dict, args) -> int:
    dataset = load_dataset(args.data)
    weights = [float(w) for w in args.hsic_weights.split(",")]
    tr = cfg["training"]
    results = evaluation.run_confounding_sweep(
        weights, dataset, flavor=tr["model"],
        train_config=TrainConfig(epochs=tr["epochs"], batch_size=tr["batch_size"],
                                 lr=tr["lr"], patience=tr["patience"],
                                 weight_decay=tr["weight_decay"]),
        lam=cfg["selection"]["lambda"], replicates=args.replicates,
        base_seed=cfg["seed"], n_passes=cfg["uncertainty"]["n_passes"])
    out = Path(cfg["out"])
    rows = [{"hsic_weight": r.hsic_weight, "replicate": r.replicate,
             "hsic_measured": r.hsic_measured,
             "rmse_selection_mean": r.mean_rmse_selection} for r in results]
    path = evaluation.write_summary(out / "confounding.csv", rows)
    all_records = [rec for r in results for rec in r.records]
    evaluation.write_records(out / "confounding_records.csv", all_records)
    write_resolved(cfg, out)
    print(f"wrote {len(rows)} confounding rows to {path}")
    return 0


def cmd_report(cfg: dict, args) -> int:
    records = evaluation.read_records(args.records)
    rows = evaluation.summarize(records)
    out = Path(cfg["out"])
    evaluation.write_summary(out / "summary.csv", rows)
    svg = evaluation.write_curves_svg(out / "curves.svg", rows)
    write_resolved(cfg, out)
    print(f"wrote summary.csv and {svg.name} to {out}")
    return 0


# -- argument wiring -----------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="ctsel", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    # The same flags are accepted after the subcommand; SUPPRESS keeps a
    # pre-subcommand value from being clobbered by the subparser default.
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_parser("simulate", help="generate a dataset")
    p.add_argument("--dataset", choices=("cvs", "covid"), help="which system")
    p.add_argument("--train-size", type=int)
    p.add_argument("--alpha", type=float, help="dose-policy beta shape")

    p = add_parser("train", help="train surrogate model(s)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", choices=("crn-lite", "gnet-lite"))
    p.add_argument("--ensemble", type=int, help="number of members to train")
    p.add_argument("--hsic-weight", type=float)
    p.add_argument("--epochs", type=int)

    p = add_parser("select", help="select doses for one patient")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--constraint", choices=("range", "soft", "soft-paper", "tanh"))
    p.add_argument("--patient", type=int, default=0)
    p.add_argument("--method", choices=("mc-dropout", "ensemble", "geometric"))

    p = add_parser("sweep", help="lambda sweep with records.csv output")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--replicates", type=int)
    p.add_argument("--lambdas", help="comma-separated uncertainty weights")
    p.add_argument("--paper-lambdas", action="store_true",
                   help="use the full 14-value weight list")

    p = add_parser("deferral", help="deferral curves from records")
    p.add_argument("--records", required=True)

    p = add_parser("confounding", help="HSIC balancing-weight sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--hsic-weights", default="0,0.1,1")
    p.add_argument("--replicates", type=int, default=3)

    p = add_parser("report", help="summary + SVG plots from records")
    p.add_argument("--records", required=True)
    return parser


def _overrides_from_args(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = args.out
    cmd = args.command
    if cmd == "simulate":
        sim = {}
        if args.dataset:
            sim["system"] = args.dataset
        if args.train_size is not None:
            sim["train_size"] = args.train_size
        if sim:
            o["simulation"] = sim
        if args.alpha is not None:
            o["policy"] = {"alpha": args.alpha}
    elif cmd == "train":
        tr = {}
        for key, val in (("model", args.model), ("ensemble", args.ensemble),
                         ("hsic_weight", getattr(args, "hsic_weight")),
                         ("epochs", args.epochs)):
            if val is not None:
                tr[key] = val
        if tr:
            o["training"] = tr
    elif cmd == "select":
        sel = {}
        if args.lam is not None:
            sel["lambda"] = args.lam
        if args.constraint:
            sel["constraint"] = args.constraint
        if sel:
            o["selection"] = sel
        if args.method:
            o["uncertainty"] = {"method": args.method}
    elif cmd == "sweep":
        sw = {}
        if args.replicates is not None:
            sw["replicates"] = args.replicates
        if args.paper_lambdas:
            sw["lambdas"] = list(cfgmod.PAPER_LAMBDAS)
        elif args.lambdas:
            sw["lambdas"] = [float(v) for v in args.lambdas.split(",")]
        if sw:
            o["sweep"] = sw
    return o


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "select": cmd_select,
    "sweep": cmd_sweep,
    "deferral": cmd_deferral,
    "confounding": cmd_confounding,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
    except ConfigError as exc:
        return _fail(str(exc))
    _echo_config(cfg)
    try:
        return _COMMANDS[args.command](cfg, args)
    except (DatasetFormatError, ModelFormatError, FileNotFoundError, ValueError) as exc:
        return _fail(str(exc), code=2)
    except ConfigError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
