"""Gradient-based dose-trajectory selection under clamping constraints.

Raw per-step parameters u are mapped into the feasible set by a
constraint mapping v, the model's predictive mean/variance at a = v(u)
are obtained from fixed-seed stochastic passes, and the objective

    mse_weight * (1/tau) sum (mu - y*)^2  +  lambda * (1/tau) sum var

is minimized by decoupled-weight-decay Adam through the whole stack
(constraint mapping, decoder passes, variance). Pass seeds are fixed
per optimization step so each step sees a deterministic loss; the best
iterate over the run is returned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import History
from .uncertainty import EnsembleHandle, UncertaintyEstimate, aggregate_passes, forward_passes

CONSTRAINT_KINDS = ("range", "soft", "soft-paper", "tanh")


class SelectionError(Exception):
    """Selection aborted on a non-finite loss; carries the trace so far."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)


@dataclass(frozen=True)
class ConstraintSpec:
    """Which mapping v constrains the dose trajectory, plus its parameters."""
    kind: str = "soft"
    alpha: float = 0.01
    beta: float = 4.0
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "range" and not self.low < self.high:
            raise ValueError("range constraint needs low < high")
        if self.kind in ("soft", "soft-paper") and not 0.0 < self.alpha <= 1.0:
            raise ValueError("soft clamp needs 0 < alpha <= 1")
        if self.kind in ("soft", "soft-paper", "tanh") and self.beta <= 0:
            raise ValueError("clamp needs beta > 0")


# -- closed-form constraint mappings on arrays --------------------------------

def clamp_range(a_traj, low: float, high: float) -> np.ndarray:
    """Center the trajectory on its mean, then clamp into [low, high]."""
    if not low < high:
        raise ValueError("range constraint needs low < high")
    a = np.asarray(a_traj, dtype=np.float64)
    centered = a - a.mean(axis=-1, keepdims=True)
    return np.clip(centered, low, high)


def clamp_soft(a_traj, alpha: float, beta: float, variant: str = "paper") -> np.ndarray:
    """Soft clamp pulling values beyond +-beta toward the central band.

    "paper" scales out-of-band values to alpha*A exactly as displayed
    (discontinuous at +-beta); "continuous" keeps the same slope but
    glues the branches: sign(A) * (beta + alpha * (|A| - beta)).
    """
    if beta <= 0 or not 0.0 < alpha <= 1.0:
        raise ValueError("soft clamp needs beta > 0 and 0 < alpha <= 1")
    a = np.asarray(a_traj, dtype=np.float64)
    inside = np.abs(a) <= beta
    if variant == "paper":
        return np.where(inside, a, alpha * a)
    if variant == "continuous":
        return np.where(inside, a, np.sign(a) * (beta + alpha * (np.abs(a) - beta)))
    raise ValueError(f"unknown soft-clamp variant {variant!r}")


def clamp_tanh(a_traj, beta: float) -> np.ndarray:
    """Smooth clamp into (-beta, beta): beta * tanh(A)."""
    if beta <= 0:
        raise ValueError("tanh clamp needs beta > 0")
    return beta * np.tanh(np.asarray(a_traj, dtype=np.float64))


def apply_constraint(a_traj, spec: ConstraintSpec) -> np.ndarray:
    if spec.kind == "range":
        return clamp_range(a_traj, spec.low, spec.high)
    if spec.kind == "soft":
        return clamp_soft(a_traj, spec.alpha, spec.beta, "continuous")
    if spec.kind == "soft-paper":
        return clamp_soft(a_traj, spec.alpha, spec.beta, "paper")
    return clamp_tanh(a_traj, spec.beta)


# -- tape versions -------------------------------------------------------------

def _soft_factor(x: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    return np.where(np.abs(x) <= beta, 1.0, alpha)


def constraint_tape(u: ad.Tensor, spec: ConstraintSpec) -> ad.Tensor:
    """Differentiable constraint mapping a = v(u) on the tape.

    The hard range clamp uses a straight-through gradient so saturated
    components keep their learning signal; both soft variants share the
    exact piecewise slope (alpha outside the band, 1 inside).
    """
    if spec.kind == "range":
        tau = u.shape[-1]
        row_mean = ad.scale(ad.matmul(u, ad.constant(np.ones((tau, tau)))), 1.0 / tau)
        centered = ad.sub(u, row_mean)
        return ad.clip_straight_through(centered, spec.low, spec.high)
    if spec.kind == "soft":
        return ad.elementwise(
            u,
            lambda x: clamp_soft(x, spec.alpha, spec.beta, "continuous"),
            lambda x, y: _soft_factor(x, spec.alpha, spec.beta),
            "soft_clamp")
    if spec.kind == "soft-paper":
        return ad.elementwise(
            u,
            lambda x: clamp_soft(x, spec.alpha, spec.beta, "paper"),
            lambda x, y: _soft_factor(x, spec.alpha, spec.beta),
            "soft_clamp_paper")
    return ad.scale(ad.tanh(u), spec.beta)


@dataclass
class SelectionConfig:
    """Objective weights, constraint, and optimizer settings for selection."""
    lam: float = 0.0
    mse_weight: float = 0.02
    target: np.ndarray = None          # (tau,) desired outcome trajectory
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)
    steps: int = 50
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    init_dose: float = 0.5             # warm start: the observational policy's dose

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("uncertainty weight lambda must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)


@dataclass
class SelectionResult:
    """Optimized doses plus the optimization trace for one patient."""
    a_star: np.ndarray                 # (tau,) constrained doses
    raw_params: np.ndarray             # (tau,) pre-mapping parameters
    objective_trace: np.ndarray        # (steps + 1,) per-step loss
    final_estimate: UncertaintyEstimate
    best_step: int


def _row_mean(t: ad.Tensor) -> ad.Tensor:
    n = t.shape[-1]
    return ad.scale(ad.matmul(t, ad.constant(np.ones((n, 1)))), 1.0 / n)


def select_treatment_batch(handle: EnsembleHandle, histories: History,
                           config: SelectionConfig, seed: int = 0,
                           init_doses=None) -> list:
    """Optimize dose trajectories for a batch of patients jointly.

    Patients are independent: the loss is a sum of per-patient terms and
    Adam updates are per-coordinate. Returns one SelectionResult per
    patient, each holding its best-so-far iterate.
    """
    tau = handle.model.tau
    b = histories.n
    if config.target is None:
        raise ValueError("selection needs a target trajectory")
    target = np.broadcast_to(config.target, (b, tau))
    if init_doses is None:
        init = np.full((b, tau), config.init_dose, dtype=np.float64)
    else:
        init = np.broadcast_to(np.asarray(init_doses, dtype=np.float64).reshape(b, 1),
                               (b, tau)).copy()
    u = ad.parameter(init)
    opt = ad.AdamW([u], lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                   eps=config.eps, weight_decay=config.weight_decay)
    traces = np.empty((config.steps + 1, b))
    best_loss = np.full(b, np.inf)
    best_u = init.copy()
    best_a = np.empty_like(init)
    best_step = np.zeros(b, dtype=int)
    warned_saturation = False

    def step_loss(step_idx: int):
        a = constraint_tape(u, config.constraint)
        passes = forward_passes(handle, histories, a,
                                seed=_step_seed(seed, step_idx))
        mu, var = aggregate_passes(passes)
        mse_p = _row_mean(ad.square(ad.sub(mu, ad.constant(target))))
        var_p = _row_mean(var)
        loss_p = ad.add(ad.scale(mse_p, config.mse_weight), ad.scale(var_p, config.lam))
        return a, loss_p, ad.total(loss_p)

    for k in range(config.steps + 1):
        try:
            a, loss_p, total = step_loss(k)
        except ad.AutodiffError as exc:
            raise SelectionError(f"non-finite loss at step {k}: {exc}",
                                 trace=traces[:k]) from exc
        values = loss_p.data[:, 0]
        if not np.all(np.isfinite(values)):
            raise SelectionError(f"non-finite loss at step {k}", trace=traces[:k])
        traces[k] = values
        improved = values < best_loss
        if np.any(improved):
            best_loss[improved] = values[improved]
            best_u[improved] = u.data[improved]
            best_a[improved] = a.data[improved]
            best_step[improved] = k
        if k == config.steps:
            break
        if config.constraint.kind == "range" and not warned_saturation:
            centered = u.data - u.data.mean(axis=-1, keepdims=True)
            saturated = np.all((centered <= config.constraint.low)
                               | (centered >= config.constraint.high), axis=-1)
            if np.any(saturated):
                warnings.warn("range clamp saturated every component for some "
                              "patients; gradient is straight-through only",
                              RuntimeWarning, stacklevel=2)
                warned_saturation = True
        opt.zero_grad()
        ad.backward(total)
        opt.step()

    final = _final_estimates(handle, histories, best_a, seed)
    results = []
    for i in range(b):
        est = UncertaintyEstimate(mu=final.mu[i], var=final.var[i],
                                  n_passes=final.n_passes, method=final.method,
                                  passes=final.passes[:, i])
        results.append(SelectionResult(
            a_star=best_a[i].copy(), raw_params=best_u[i].copy(),
            objective_trace=traces[:, i].copy(), final_estimate=est,
            best_step=int(best_step[i])))
    return results


def _step_seed(seed: int, step_idx: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(step_idx,))
               .generate_state(1, np.uint64)[0])


def _final_estimates(handle, histories, a_star, seed) -> UncertaintyEstimate:
    from .uncertainty import estimate
    return estimate(handle, histories, a_star, seed=_step_seed(seed, 1 << 20))


def select_treatment(handle: EnsembleHandle, history: History,
                     config: SelectionConfig, seed: int = 0,
                     init_dose: float | None = None) -> SelectionResult:
    """Single-patient treatment selection (batch of one)."""
    if history.n != 1:
        raise ValueError("select_treatment expects a single-patient history")
    init = None if init_dose is None else np.array([init_dose])
    return select_treatment_batch(handle, history, config, seed=seed,
                                  init_doses=init)[0]
