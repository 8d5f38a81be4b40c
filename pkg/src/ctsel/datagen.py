"""Confounded observational dataset generation and persistence.

Doses are drawn per treatment cycle from Beta(alpha, beta) where
beta = (alpha - 1)/d_w + 2 - alpha, so the distribution is centered on
the moving policy center d_w. With alpha = 1 the draw is Uniform(0, 1)
and dosing is independent of history (no confounding); larger alpha
concentrates doses around d_w, which for the COVID system reacts to the
observed outcome (x1.1 if it did not decrease, x0.9 otherwise) and for
the cardiovascular system stays fixed at its initial value.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import SimulationDivergence, System, TimeGrid, make_system, simulate_trajectory

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
_POLICY_CENTER_BOUNDS = (0.01, 0.99)


class DatasetFormatError(Exception):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class DosePolicyConfig:
    """Beta-distributed dosing policy with a history-reactive center."""
    alpha: float = 2.0
    d_w0: float = 0.5            # initial policy center A_0
    adjustment: str = "covid-multiplicative"  # or "cvs-constant"
    dose_scale: float = 1.0      # maps theta in (0,1) to a physical dose

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if self.adjustment not in ("covid-multiplicative", "cvs-constant"):
            raise ValueError(f"unknown adjustment {self.adjustment!r}")
        if self.dose_scale <= 0:
            raise ValueError("dose_scale must be positive")

    @classmethod
    def for_system(cls, system: str, alpha: float = 2.0, d_w0: float = 0.5,
                   dose_scale: float = 1.0) -> "DosePolicyConfig":
        adj = "covid-multiplicative" if system == "covid" else "cvs-constant"
        return cls(alpha=alpha, d_w0=d_w0, adjustment=adj, dose_scale=dose_scale)


@dataclass
class PatientTrajectory:
    """One simulated patient: observed channels plus hidden simulator state."""
    outcomes: np.ndarray     # (n_points, 1)
    treatments: np.ndarray   # (n_points, 1)
    covariates: np.ndarray   # (n_points, 3)
    state: np.ndarray        # (n_points, 4), ground truth only
    seed: int

    def __eq__(self, other):
        if not isinstance(other, PatientTrajectory):
            return NotImplemented
        return (self.seed == other.seed
                and np.array_equal(self.outcomes, other.outcomes)
                and np.array_equal(self.treatments, other.treatments)
                and np.array_equal(self.covariates, other.covariates)
                and np.array_equal(self.state, other.state))


@dataclass
class Dataset:
    """Train/val/test patient splits plus the generation manifest."""
    train: list
    val: list
    test: list
    grid: TimeGrid
    manifest: dict

    def split(self, name: str) -> list:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.manifest == other.manifest and self.grid == other.grid
                and self.train == other.train and self.val == other.val
                and self.test == other.test)


def sample_initial_conditions(system: str, rng: np.random.Generator) -> np.ndarray:
    """Draw one initial state from the per-system distributions."""
    if system == "cvs":
        return np.array([
            rng.uniform(0.9, 1.0),    # SV
            rng.uniform(0.75, 0.85),  # P_a
            rng.uniform(0.3, 0.7),    # P_v
            rng.uniform(0.15, 0.25),  # S
        ])
    if system == "covid":
        # Exponential with mean 0.01 per component; the mean-100 (rate)
        # reading makes the outcome collapse to an absorbing zero for
        # every patient and the integrator checks unattainable.
        return rng.exponential(0.01, size=4)
    raise ValueError(f"unknown system {system!r}")


def _clamp_center(d_w: float) -> float:
    lo, hi = _POLICY_CENTER_BOUNDS
    return min(max(d_w, lo), hi)


def sample_cycle_dose(policy: DosePolicyConfig, d_w: float,
                      rng: np.random.Generator) -> float:
    """Draw theta ~ Beta(alpha, (alpha-1)/d_w + 2 - alpha) for one cycle."""
    d_w = _clamp_center(d_w)
    beta = (policy.alpha - 1.0) / d_w + 2.0 - policy.alpha
    if beta <= 0:
        raise ValueError(f"computed beta={beta} <= 0 (alpha={policy.alpha}, d_w={d_w})")
    return float(rng.beta(policy.alpha, beta))


def update_policy_center(d_w: float, outcome_now: float, outcome_prev: float,
                         adjustment: str) -> float:
    """Move the policy center by +-10% (COVID) or keep it fixed (CVS)."""
    if adjustment == "cvs-constant":
        return d_w
    if adjustment == "covid-multiplicative":
        factor = 1.1 if outcome_now >= outcome_prev else 0.9
        return _clamp_center(d_w * factor)
    raise ValueError(f"unknown adjustment {adjustment!r}")


def _policy_centers(outcomes: np.ndarray, policy: DosePolicyConfig,
                    grid: TimeGrid, n_cycles: int) -> list:
    """Policy center before each of the first n_cycles cycle starts."""
    centers = [_clamp_center(policy.d_w0)]
    for c in range(1, n_cycles):
        i = c * grid.cycle_steps  # grid index of this cycle's start
        centers.append(update_policy_center(
            centers[-1], float(outcomes[i]), float(outcomes[i - 1]), policy.adjustment))
    return centers


def observed_policy_dose(patient: PatientTrajectory, policy: DosePolicyConfig,
                         grid: TimeGrid) -> float:
    """Dose the observational policy centers on in the last observed cycle.

    Replays the center updates from the stored outcomes (the trajectory
    carries no policy state) and scales to physical units; used as the
    warm start for treatment selection.
    """
    centers = _policy_centers(patient.outcomes[:, 0], policy, grid, grid.n_cycles)
    return centers[-1] * policy.dose_scale


def _simulate_patient(system: System, policy: DosePolicyConfig, grid: TimeGrid,
                      rng: np.random.Generator, seed: int) -> PatientTrajectory:
    initial = sample_initial_conditions(system.name, rng)
    d_w = _clamp_center(policy.d_w0)
    state = initial.copy()
    states = [state.copy()]
    doses = []
    outcomes = [state[system.outcome_index]]
    # Simulate cycle by cycle so each new dose can react to the outcome,
    # continuing the same policy through the horizon window.
    horizon_cycles = -(-grid.n_horizon // grid.cycle_steps)  # ceil
    total_cycles = grid.n_cycles + horizon_cycles
    steps_done = 0
    for c in range(total_cycles):
        if c > 0:
            d_w = update_policy_center(d_w, outcomes[-1], outcomes[-2], policy.adjustment)
        theta = sample_cycle_dose(policy, d_w, rng)
        dose = theta * policy.dose_scale
        n_steps = min(grid.cycle_steps, grid.n_steps - steps_done)
        t0 = steps_done * grid.dt
        segment = system.integrate(state, np.full(n_steps, dose), grid, t_offset=t0)
        state = segment[-1]
        states.extend(s.copy() for s in segment[1:])
        outcomes.extend(segment[1:, system.outcome_index])
        doses.extend([dose] * n_steps)
        steps_done += n_steps
    states = np.asarray(states)
    treatments = np.append(doses, doses[-1])[:, None]
    return PatientTrajectory(
        outcomes=states[:, [system.outcome_index]],
        treatments=treatments,
        covariates=states[:, system.covariate_indices()],
        state=states,
        seed=seed,
    )


_SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}


def _patient_rng(master_seed: int, split: str, index: int, retry: int = 0):
    """Counter-based per-patient stream: independent of generation order."""
    ss = np.random.SeedSequence(master_seed,
                                spawn_key=(_SPLIT_INDEX[split], index, retry))
    seed = int(ss.generate_state(1, np.uint64)[0])
    return np.random.Generator(np.random.Philox(ss)), seed


def generate_dataset(system: str, sizes=(1024, 128, 128),
                     policy: DosePolicyConfig | None = None,
                     grid: TimeGrid | None = None, master_seed: int = 0,
                     params=None) -> Dataset:
    """Generate a full observational dataset, deterministic in master_seed.

    Patients whose simulation diverges are resampled with a fresh derived
    stream; the resample count is logged and recorded in the manifest.
    """
    grid = grid or TimeGrid()
    policy = policy or DosePolicyConfig.for_system(system)
    sys_obj = make_system(system, params)
    if any(n <= 0 for n in sizes):
        raise ValueError("split sizes must be positive")
    splits = {}
    resampled = 0
    for split, n in zip(("train", "val", "test"), sizes):
        patients = []
        for i in range(n):
            for retry in range(100):
                rng, seed = _patient_rng(master_seed, split, i, retry)
                try:
                    patients.append(_simulate_patient(sys_obj, policy, grid, rng, seed))
                    break
                except SimulationDivergence as exc:
                    resampled += 1
                    log.warning("patient %s/%d diverged at t=%.3g, resampling", split, i, exc.t)
            else:
                raise RuntimeError(f"patient {split}/{i} diverged 100 times in a row")
        splits[split] = patients
    if resampled:
        log.info("resampled %d divergent patients", resampled)
    manifest = {
        "schema": SCHEMA_VERSION,
        "system": system,
        "grid": {"dt": grid.dt, "n_obs": grid.n_obs, "n_horizon": grid.n_horizon,
                 "n_cycles": grid.n_cycles},
        "policy": {"alpha": policy.alpha, "d_w0": policy.d_w0,
                   "adjustment": policy.adjustment, "dose_scale": policy.dose_scale},
        "sizes": list(sizes),
        "master_seed": master_seed,
        "resampled": resampled,
    }
    return Dataset(train=splits["train"], val=splits["val"], test=splits["test"],
                   grid=grid, manifest=manifest)


# -- persistence ------------------------------------------------------------

def _patient_to_json(p: PatientTrajectory) -> str:
    obj = {
        "seed": p.seed,
        "y": p.outcomes.tolist(),
        "a": p.treatments.tolist(),
        "x": p.covariates.tolist(),
        "state": p.state.tolist(),
    }
    return json.dumps(obj, separators=(",", ":"))


def _patient_from_json(obj: dict) -> PatientTrajectory:
    return PatientTrajectory(
        outcomes=np.array(obj["y"], dtype=np.float64),
        treatments=np.array(obj["a"], dtype=np.float64),
        covariates=np.array(obj["x"], dtype=np.float64),
        state=np.array(obj["state"], dtype=np.float64),
        seed=int(obj["seed"]),
    )


def _split_filename(split: str, master_seed: int) -> str:
    return f"{split}_s{master_seed}.ndjson"


def save_dataset(dataset: Dataset, path) -> Path:
    """Write manifest.json plus one newline-delimited JSON file per split."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.json", "w") as fh:
        json.dump(dataset.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    seed = dataset.manifest["master_seed"]
    for split in ("train", "val", "test"):
        with open(path / _split_filename(split, seed), "w") as fh:
            for p in dataset.split(split):
                fh.write(_patient_to_json(p))
                fh.write("\n")
    return path


def load_dataset(path) -> Dataset:
    """Load a dataset directory written by save_dataset; validates format."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"no manifest.json in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"unsupported schema version {manifest.get('schema')!r}, expected {SCHEMA_VERSION!r}")
    seed = manifest["master_seed"]
    g = manifest["grid"]
    grid = TimeGrid(dt=g["dt"], n_obs=g["n_obs"], n_horizon=g["n_horizon"],
                    n_cycles=g["n_cycles"])
    splits = {}
    for split in ("train", "val", "test"):
        fname = _split_filename(split, seed)
        fpath = path / fname
        if not fpath.exists():
            candidates = sorted(path.glob(f"{split}_s*.ndjson"))
            if candidates:
                m = re.match(rf"{split}_s(-?\d+)\.ndjson", candidates[0].name)
                raise DatasetFormatError(
                    f"{candidates[0].name}: filename-embedded seed {m.group(1)} "
                    f"does not match manifest master_seed {seed}")
            raise DatasetFormatError(f"missing split file {fname}")
        patients = []
        with open(fpath) as fh:
            for lineno, line in enumerate(fh, start=1):
                try:
                    patients.append(_patient_from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DatasetFormatError(f"{fname}: parse error at line {lineno}: {exc}") from exc
        splits[split] = patients
    expected = dict(zip(("train", "val", "test"), manifest["sizes"]))
    for split, patients in splits.items():
        if len(patients) != expected[split]:
            raise DatasetFormatError(
                f"{split} split has {len(patients)} patients, manifest says {expected[split]}")
    return Dataset(train=splits["train"], val=splits["val"], test=splits["test"],
                   grid=grid, manifest=manifest)
