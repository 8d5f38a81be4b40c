"""Model-agnostic predictive uncertainty over the horizon.

Three interchangeable methods produce per-step mean and variance from
eight stochastic forward passes:

* ``mc-dropout``: one model, dropout masks active at inference;
* ``ensemble``: eight independently trained models, one deterministic
  pass each;
* ``geometric``: eight models sampled at equally spaced points of a
  trained quadratic Bezier curve connecting two trained models in
  weight space (the midpoint control tensor is optimized so the whole
  curve stays in the low-loss region).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import (History, SurrogateModel, TrainConfig, batch_history,
                     revin_denormalize)

DEFAULT_PASSES = 8
METHODS = ("mc-dropout", "ensemble", "geometric")


@dataclass
class UncertaintyEstimate:
    """Per-horizon-step predictive mean and variance over stochastic passes."""
    mu: np.ndarray        # (tau,) or (B, tau)
    var: np.ndarray       # same shape, unbiased over passes
    n_passes: int
    method: str
    passes: np.ndarray = None  # (n_passes, ...) raw per-pass outputs

    @property
    def mean_variance(self) -> np.ndarray:
        """Horizon-averaged variance, the ranking/regularization scalar."""
        return self.var.mean(axis=-1)


@dataclass
class EnsembleHandle:
    """A group of predictors presenting one uncertainty interface."""
    method: str
    members: list
    n_passes: int = DEFAULT_PASSES

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown uncertainty method {self.method!r}")
        if self.method == "mc-dropout":
            if len(self.members) != 1:
                raise ValueError("mc-dropout uses exactly one member")
            if self.n_passes < 2:
                raise ValueError("need at least 2 passes for a variance")
        else:
            if len(self.members) < 2:
                raise ValueError(f"{self.method} needs at least 2 members")
            arch = {(m.flavor, m.d_x, m.hidden) for m in self.members}
            if len(arch) != 1:
                raise ValueError("ensemble members must share an architecture")
            self.n_passes = len(self.members)

    @property
    def model(self) -> SurrogateModel:
        return self.members[0]


def _pass_rng(seed: int, pass_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(pass_index,)))


def forward_passes(handle: EnsembleHandle, history: History, future_treatments,
                   seed: int) -> list:
    """Tape tensors for each stochastic pass, differentiable in the treatments.

    The encoder representation is deterministic per member and cached
    across passes; per-pass randomness enters through the dropout masks,
    with stream k derived from (seed, k).
    """
    if handle.method == "mc-dropout":
        model = handle.members[0]
        norm, stats, phi = model.encode_representation(history)
        a_norm = model.normalize_treatments(future_treatments, stats)
        return [model.decode_from(phi, norm, stats, a_norm, _pass_rng(seed, k))
                for k in range(handle.n_passes)]
    outs = []
    for member in handle.members:
        norm, stats, phi = member.encode_representation(history)
        a_norm = member.normalize_treatments(future_treatments, stats)
        outs.append(member.decode_from(phi, norm, stats, a_norm, None))
    return outs


def aggregate_passes(passes: list):
    """Tape-level mean and unbiased variance across pass tensors."""
    n = len(passes)
    acc = passes[0]
    for p in passes[1:]:
        acc = ad.add(acc, p)
    mu = ad.scale(acc, 1.0 / n)
    dev = [ad.square(ad.sub(p, mu)) for p in passes]
    acc_dev = dev[0]
    for d in dev[1:]:
        acc_dev = ad.add(acc_dev, d)
    var = ad.scale(acc_dev, 1.0 / (n - 1))
    return mu, var


def estimate(handle: EnsembleHandle, history, future_treatments,
             seed: int = 0) -> UncertaintyEstimate:
    """Per-step predictive mean/variance for one patient or a batch.

    Accepts a History (batched) and (B, tau) treatments, or 1-D
    treatments with a single-patient history; 1-D in, 1-D out.
    """
    future = np.asarray(future_treatments, dtype=np.float64)
    squeeze = future.ndim == 1
    if squeeze:
        future = future[None, :]
    tensors = forward_passes(handle, history, future, seed)
    passes = np.stack([t.data for t in tensors])  # (n_passes, B, tau)
    mu = passes.mean(axis=0)
    var = passes.var(axis=0, ddof=1)
    if squeeze:
        mu, var, passes = mu[0], var[0], passes[:, 0]
    return UncertaintyEstimate(mu=mu, var=var, n_passes=len(tensors),
                               method=handle.method, passes=passes)


# -- geometric (mode-connectivity) ensembling --------------------------------

def _bezier_weights(wa: dict, wm: dict, wb: dict, s: float) -> dict:
    ca, cm, cb = (1.0 - s) ** 2, 2.0 * s * (1.0 - s), s ** 2
    return {k: ca * wa[k] + cm * wm[k] + cb * wb[k] for k in wa}


def _curve_model(template: SurrogateModel, wa: dict, mid: dict, wb: dict,
                 s: float) -> SurrogateModel:
    """Model whose weights are the Bezier point at s, on the tape via mid."""
    ca, cm, cb = (1.0 - s) ** 2, 2.0 * s * (1.0 - s), s ** 2
    m = SurrogateModel(flavor=template.flavor, d_x=template.d_x,
                       hidden=template.hidden, dropout=template.dropout,
                       revin=template.revin, tau=template.tau)
    m.weights = {k: ad.add(ad.scale(mid[k], cm),
                           ad.constant(ca * wa[k] + cb * wb[k]))
                 for k in mid}
    return m


def build_geometric_ensemble(member_a: SurrogateModel, member_b: SurrogateModel,
                             dataset, n_samples: int = DEFAULT_PASSES,
                             config: TrainConfig | None = None) -> EnsembleHandle:
    """Fit a quadratic Bezier connector between two trained members.

    The midpoint control tensor starts at the straight-line average and
    is trained to minimize the expected train loss at uniformly sampled
    curve positions; n_samples equally spaced points (endpoints included)
    are then materialized as ensemble members.
    """
    if (member_a.flavor, member_a.d_x, member_a.hidden) != \
            (member_b.flavor, member_b.d_x, member_b.hidden):
        raise ValueError("geometric ensemble endpoints must share an architecture")
    config = config or TrainConfig(epochs=15, lr=0.01)
    wa = member_a.weight_values()
    wb = member_b.weight_values()
    mid = {k: ad.parameter(0.5 * (wa[k] + wb[k])) for k in wa}
    grid = dataset.grid
    hist, fut_a, fut_y = batch_history(dataset.train, grid)
    rng = np.random.default_rng(config.seed)
    opt = ad.AdamW(list(mid.values()), lr=config.lr, weight_decay=0.0)
    n = hist.n
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            bh = History(y=hist.y[idx], x=hist.x[idx], a_prev=hist.a_prev[idx])
            s = float(rng.uniform())
            model_s = _curve_model(member_a, wa, mid, wb, s)
            pred, _, _, _ = model_s.forward(bh, fut_a[idx], rng=None, teacher_y=fut_y[idx])
            loss = ad.mean(ad.square(ad.sub(pred, ad.constant(fut_y[idx]))))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    mid_values = {k: t.data for k, t in mid.items()}
    members = []
    for s in np.linspace(0.0, 1.0, n_samples):
        m = member_a.clone()
        m.set_weight_values(_bezier_weights(wa, mid_values, wb, float(s)))
        members.append(m)
    return EnsembleHandle(method="geometric", members=members, n_passes=n_samples)


# -- deferral ranking ---------------------------------------------------------

def rank_by_uncertainty(mean_variances, percent: float, rng: np.random.Generator):
    """Ascending-uncertainty ordering plus the least-uncertain p% subset.

    Returns (order, least_indices, random_indices) where the random
    subset is size-matched and drawn from the provided rng. Ties keep
    stable index order.
    """
    scores = np.asarray([float(v) for v in mean_variances])
    if scores.size == 0:
        raise ValueError("need at least one estimate to rank")
    order = np.argsort(scores, kind="stable")
    count = max(1, int(round(percent / 100.0 * scores.size)))
    count = min(count, scores.size)
    least = order[:count]
    random_subset = rng.choice(scores.size, size=count, replace=False)
    return order, least, random_subset
