"""Differentiable counterfactual trajectory predictors.

Two flavors map (patient history, future treatment trajectory) to the
predicted outcome trajectory over the horizon:

* ``crn-lite`` (recurrent-seq2seq): a gated recurrent encoder folds the
  observed (outcome, covariates, previous treatment) steps into a history
  representation; a gated recurrent decoder consumes each future
  treatment together with the previous prediction (teacher-forced during
  training, autoregressive at inference).
* ``gnet-lite`` (gcomp-rollout): a single gated recurrent cell with a
  common head predicting next (outcome, covariates); the horizon is
  produced by rolling the one-step model forward and feeding its own
  predictions back while the intervened treatments are applied.

Inputs are normalized per instance over the observed window and
predictions denormalized on the way out (RevIN); treatments stay live on
the autodiff tape so selection can differentiate through the model.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datagen import Dataset, PatientTrajectory
from .dynamics import TimeGrid
from .hsic import hsic

_STD_FLOOR = 1e-6
MODEL_MAGIC = b"CTSM"
MODEL_SCHEMA = 1
FLAVORS = ("crn-lite", "gnet-lite")


class ModelFormatError(Exception):
    """Model file is malformed, corrupted, or of an unexpected flavor."""


class TrainingError(Exception):
    """Training aborted (non-finite loss); carries epoch/batch indices."""

    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


@dataclass
class History:
    """Observed window channels, batched: (B, T) outcome/treatment, (B, T, d_x) covariates.

    ``a_prev`` is lagged so entry t holds the dose that produced the
    state at t; the dose assigned at the prediction time never leaks in.
    """
    y: np.ndarray
    x: np.ndarray
    a_prev: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_obs(self) -> int:
        return self.y.shape[1]


def batch_history(patients, grid: TimeGrid):
    """Split stored trajectories into (History, future_treatments, future_outcomes)."""
    if isinstance(patients, PatientTrajectory):
        patients = [patients]
    n_obs, tau = grid.n_obs, grid.n_horizon
    y = np.stack([p.outcomes[:n_obs, 0] for p in patients])
    x = np.stack([p.covariates[:n_obs] for p in patients])
    a = np.stack([p.treatments[:, 0] for p in patients])
    a_prev = np.concatenate([np.zeros((len(patients), 1)), a[:, :n_obs - 1]], axis=1)
    future = a[:, n_obs - 1:n_obs - 1 + tau]
    future_y = np.stack([p.outcomes[n_obs:n_obs + tau, 0] for p in patients])
    return History(y=y, x=x, a_prev=a_prev), future, future_y


@dataclass
class RevinStats:
    """Per-instance, per-channel mean/std over the observed window."""
    mu_y: np.ndarray
    sd_y: np.ndarray
    mu_x: np.ndarray
    sd_x: np.ndarray
    mu_a: np.ndarray
    sd_a: np.ndarray


def _stats(arr: np.ndarray, axis: int):
    mu = arr.mean(axis=axis, keepdims=True)
    sd = np.maximum(arr.std(axis=axis, keepdims=True), _STD_FLOOR)
    return mu, sd


def revin_normalize(history: History, enabled: bool = True):
    """Normalize each instance's channels over its observed window."""
    if history.n_obs < 2:
        raise ValueError("observed window must have length >= 2")
    if not enabled:
        b = history.n
        ident = RevinStats(np.zeros((b, 1)), np.ones((b, 1)),
                           np.zeros((b, 1, history.x.shape[2])), np.ones((b, 1, history.x.shape[2])),
                           np.zeros((b, 1)), np.ones((b, 1)))
        return history, ident
    mu_y, sd_y = _stats(history.y, 1)
    mu_x, sd_x = _stats(history.x, 1)
    mu_a, sd_a = _stats(history.a_prev[:, 1:], 1)  # skip the zero pad
    norm = History(
        y=(history.y - mu_y) / sd_y,
        x=(history.x - mu_x) / sd_x,
        a_prev=(history.a_prev - mu_a) / sd_a,
    )
    return norm, RevinStats(mu_y, sd_y, mu_x, sd_x, mu_a, sd_a)


def revin_denormalize(outputs, stats: RevinStats):
    """Invert the outcome-channel normalization; accepts arrays or tape tensors."""
    if isinstance(outputs, ad.Tensor):
        return ad.add(ad.mul(outputs, ad.constant(stats.sd_y)), ad.constant(stats.mu_y))
    return outputs * stats.sd_y + stats.mu_y


def _init_matrix(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def _gru_step(x: ad.Tensor, h: ad.Tensor, wx: ad.Tensor, wh: ad.Tensor,
              b: ad.Tensor, hidden: int) -> ad.Tensor:
    gx = ad.add(ad.matmul(x, wx), b)
    gh = ad.matmul(h, wh)
    r = ad.sigmoid(ad.add(ad.slice_axis(gx, 0, hidden), ad.slice_axis(gh, 0, hidden)))
    z = ad.sigmoid(ad.add(ad.slice_axis(gx, hidden, 2 * hidden),
                          ad.slice_axis(gh, hidden, 2 * hidden)))
    n = ad.tanh(ad.add(ad.slice_axis(gx, 2 * hidden, 3 * hidden),
                       ad.mul(r, ad.slice_axis(gh, 2 * hidden, 3 * hidden))))
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


@dataclass
class SurrogateModel:
    """Weights plus architecture descriptor for one predictor."""
    flavor: str
    d_x: int
    hidden: int = 64
    dropout: float = 0.1
    revin: bool = True
    tau: int = 10
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ModelFormatError(f"unknown flavor {self.flavor!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    # -- construction ------------------------------------------------------
    @classmethod
    def create(cls, flavor: str, d_x: int, rng: np.random.Generator,
               hidden: int = 64, dropout: float = 0.1, revin: bool = True,
               tau: int = 10) -> "SurrogateModel":
        m = cls(flavor=flavor, d_x=d_x, hidden=hidden, dropout=dropout,
                revin=revin, tau=tau)
        h = hidden
        w = {}
        if flavor == "crn-lite":
            d_enc = 2 + d_x
            w["enc_wx"] = _init_matrix(rng, d_enc, 3 * h)
            w["enc_wh"] = _init_matrix(rng, h, 3 * h)
            w["enc_b"] = np.zeros((1, 3 * h))
            w["dec_wx"] = _init_matrix(rng, 2, 3 * h)
            w["dec_wh"] = _init_matrix(rng, h, 3 * h)
            w["dec_b"] = np.zeros((1, 3 * h))
            w["head_w"] = _init_matrix(rng, h, 1)
            w["head_b"] = np.zeros((1, 1))
        else:
            d_in = 2 + d_x
            w["cell_wx"] = _init_matrix(rng, d_in, 3 * h)
            w["cell_wh"] = _init_matrix(rng, h, 3 * h)
            w["cell_b"] = np.zeros((1, 3 * h))
            w["head_w"] = _init_matrix(rng, h, 1 + d_x)
            w["head_b"] = np.zeros((1, 1 + d_x))
        m.weights = {k: ad.parameter(v) for k, v in w.items()}
        return m

    def parameters(self) -> list:
        return list(self.weights.values())

    def clone(self) -> "SurrogateModel":
        m = SurrogateModel(flavor=self.flavor, d_x=self.d_x, hidden=self.hidden,
                           dropout=self.dropout, revin=self.revin, tau=self.tau)
        m.weights = {k: ad.parameter(v.data) for k, v in self.weights.items()}
        return m

    def weight_values(self) -> dict:
        return {k: v.data.copy() for k, v in self.weights.items()}

    def set_weight_values(self, values: dict) -> None:
        for k, v in values.items():
            self.weights[k].data = v.copy()

    # -- forward -------------------------------------------------------------
    def _pass_masks(self, b: int, rng):
        """Per-pass dropout masks, shared across time steps (variational
        recurrent dropout): each stochastic pass acts as one coherent
        perturbed sub-model, so the pass-to-pass variance reflects
        model-level disagreement rather than per-step jitter."""
        if rng is None or self.dropout == 0.0:
            return None
        p = self.dropout
        d_in = 2 if self.flavor == "crn-lite" else 2 + self.d_x
        def mask(cols):
            return ad.constant((rng.random((b, cols)) >= p) / (1.0 - p))
        return {"in": mask(d_in), "h": mask(self.hidden), "phi": mask(self.hidden)}

    @staticmethod
    def _apply_mask(t: ad.Tensor, masks, key: str) -> ad.Tensor:
        if masks is None:
            return t
        return ad.mul(t, masks[key])

    def _encode(self, norm: History):
        """Fold the observed window into the history representation.

        Deterministic given the weights: dropout enters at the
        representation and the decoder states, not inside the recurrence,
        so selection can cache this result across stochastic passes.
        """
        b, n_obs = norm.n, norm.n_obs
        w = self.weights
        if self.flavor == "crn-lite":
            wx, wh, bias = w["enc_wx"], w["enc_wh"], w["enc_b"]
        else:
            wx, wh, bias = w["cell_wx"], w["cell_wh"], w["cell_b"]
        h = ad.constant(np.zeros((b, self.hidden)))
        last = n_obs if self.flavor == "crn-lite" else n_obs - 1
        for t in range(last):
            if self.flavor == "crn-lite":
                step = np.concatenate([norm.y[:, t:t + 1], norm.x[:, t],
                                       norm.a_prev[:, t:t + 1]], axis=1)
            else:
                # gcomp cell sees the treatment applied at t, i.e. a_prev[t+1]
                step = np.concatenate([norm.y[:, t:t + 1], norm.x[:, t],
                                       norm.a_prev[:, t + 1:t + 2]], axis=1)
            h = _gru_step(ad.constant(step), h, wx, wh, bias, self.hidden)
        return h

    def _decode(self, phi: ad.Tensor, norm: History, a_norm, rng,
                teacher_y_norm: np.ndarray | None = None,
                teacher_x_norm: np.ndarray | None = None):
        """Produce the normalized horizon predictions from the representation.

        a_norm is a list of tau (B, 1) tensors (normalized future doses);
        the treatment pathway stays differentiable. Returns the (B, tau)
        outcome tensor plus the per-step covariate predictions (gcomp
        flavor only, used for the one-step training loss).
        """
        w = self.weights
        outs, x_preds = [], []
        masks = self._pass_masks(norm.n, rng)
        if self.flavor == "crn-lite":
            h = self._apply_mask(phi, masks, "phi")
            y_prev = ad.constant(norm.y[:, -1:])
            for j in range(self.tau):
                # input dropout keeps the predictive variance sensitive to
                # the dose magnitude, including far outside the data
                inp = self._apply_mask(ad.concat([a_norm[j], y_prev], axis=1), masks, "in")
                h = _gru_step(inp, h, w["dec_wx"], w["dec_wh"], w["dec_b"], self.hidden)
                y_hat = ad.add(ad.matmul(self._apply_mask(h, masks, "h"), w["head_w"]),
                               w["head_b"])
                outs.append(y_hat)
                y_prev = (ad.constant(teacher_y_norm[:, j:j + 1])
                          if teacher_y_norm is not None else y_hat)
        else:
            h = phi
            y_in = ad.constant(norm.y[:, -1:])
            x_in = ad.constant(norm.x[:, -1])
            for j in range(self.tau):
                inp = self._apply_mask(ad.concat([y_in, x_in, a_norm[j]], axis=1),
                                       masks, "in")
                h = _gru_step(inp, h, w["cell_wx"], w["cell_wh"], w["cell_b"], self.hidden)
                out = ad.add(ad.matmul(self._apply_mask(h, masks, "h"), w["head_w"]),
                             w["head_b"])
                y_hat = ad.slice_axis(out, 0, 1)
                x_hat = ad.slice_axis(out, 1, 1 + self.d_x)
                outs.append(y_hat)
                x_preds.append(x_hat)
                if teacher_y_norm is not None:
                    # teacher forcing: factual next inputs
                    y_in = ad.constant(teacher_y_norm[:, j:j + 1])
                    x_in = ad.constant(teacher_x_norm[:, j])
                else:
                    y_in = y_hat
                    x_in = x_hat
        return ad.concat(outs, axis=1), x_preds

    def forward(self, history: History, future_treatments, rng=None,
                teacher_y: np.ndarray | None = None,
                teacher_x: np.ndarray | None = None,
                detach_encoder: bool = False):
        """Tape forward pass.

        Returns (denormalized (B, tau) outcome tensor, encoder
        representation, RevIN stats, normalized covariate predictions).
        teacher_y/teacher_x are the factual horizon outcomes/covariates
        in physical units; providing them switches on teacher forcing.
        """
        norm, stats = revin_normalize(history, self.revin)
        a_norm = self.normalize_treatments(future_treatments, stats)
        teacher_y_norm = None if teacher_y is None else (teacher_y - stats.mu_y) / stats.sd_y
        teacher_x_norm = None if teacher_x is None else (teacher_x - stats.mu_x) / stats.sd_x
        phi = self._encode(norm)
        dec_in = ad.constant(phi.data) if detach_encoder else phi
        y_norm, x_preds = self._decode(dec_in, norm, a_norm, rng,
                                       teacher_y_norm, teacher_x_norm)
        return revin_denormalize(y_norm, stats), phi, stats, x_preds

    # -- two-stage path used by uncertainty estimation and selection --------
    def encode_representation(self, history: History):
        """Cacheable encoder pass: returns (norm history, stats, phi values)."""
        norm, stats = revin_normalize(history, self.revin)
        return norm, stats, self._encode(norm).data

    def decode_from(self, phi_values: np.ndarray, norm: History, stats: RevinStats,
                    a_norm, rng) -> ad.Tensor:
        """One stochastic pass from a cached representation.

        a_norm is the list of tau (B, 1) normalized-treatment tensors;
        returns the denormalized (B, tau) prediction on the tape.
        """
        y_norm, _ = self._decode(ad.constant(phi_values), norm, a_norm, rng)
        return revin_denormalize(y_norm, stats)

    def normalize_treatments(self, future_treatments, stats: RevinStats):
        """Split a (B, tau) treatment tensor into normalized per-step columns."""
        a = (future_treatments if isinstance(future_treatments, ad.Tensor)
             else ad.constant(np.asarray(future_treatments, dtype=np.float64)))
        expected = (stats.mu_a.shape[0], self.tau)
        if a.shape != expected:
            raise ValueError(f"future treatments must be {expected}, got {a.shape}")
        a_scaled = ad.mul(ad.sub(a, ad.constant(stats.mu_a)), ad.constant(1.0 / stats.sd_a))
        return [ad.slice_axis(a_scaled, j, j + 1) for j in range(self.tau)]

    def predict(self, history: History, future_treatments, rng=None) -> np.ndarray:
        """Predicted outcome trajectory, (B, tau); stochastic iff rng given."""
        out, _, _, _ = self.forward(history, future_treatments, rng=rng)
        return out.data.copy()


@dataclass
class TrainConfig:
    """Optimization settings for surrogate training."""
    epochs: int = 120
    batch_size: int = 64
    lr: float = 0.01
    hsic_weight: float = 0.0
    seed: int = 0
    patience: int = 12
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch size must be positive")
        if self.hsic_weight < 0:
            raise ValueError("hsic_weight must be >= 0")


@dataclass
class TrainResult:
    model: SurrogateModel
    train_losses: list
    val_losses: list
    best_epoch: int


def validation_loss(model: SurrogateModel, histories: History, future_a,
                    future_y) -> float:
    """Deterministic autoregressive horizon MSE on held-out patients."""
    pred = model.predict(histories, future_a)
    return float(np.mean((pred - future_y) ** 2))


def persistence_mse(histories: History, future_y) -> float:
    """MSE of predicting the last observed outcome for every horizon step."""
    return float(np.mean((histories.y[:, -1:] - future_y) ** 2))


def train(model: SurrogateModel, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Minibatch AdamW training with validation-based early stopping."""
    if not dataset.train:
        raise ValueError("training split is empty")
    grid = dataset.grid
    hist, fut_a, fut_y = batch_history(dataset.train, grid)
    vhist, vfut_a, vfut_y = batch_history(dataset.val, grid) if dataset.val else (None, None, None)
    fut_x = np.stack([p.covariates[grid.n_obs:grid.n_obs + grid.n_horizon]
                      for p in dataset.train])
    rng = np.random.default_rng(config.seed)
    opt = ad.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    n = hist.n
    train_losses, val_losses = [], []
    best_val, best_weights, best_epoch, stale = np.inf, model.weight_values(), 0, 0
    # Treatment assigned at the prediction time: the balancing target.
    assigned = fut_a[:, :1]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            bh = History(y=hist.y[idx], x=hist.x[idx], a_prev=hist.a_prev[idx])
            by, ba = fut_y[idx], fut_a[idx]
            pred, phi, stats, x_preds = model.forward(
                bh, ba, rng=rng, teacher_y=by,
                teacher_x=fut_x[idx] if model.flavor == "gnet-lite" else None)
            loss = ad.mean(ad.square(ad.sub(pred, ad.constant(by))))
            if x_preds:
                # one-step covariate supervision keeps the rollout honest
                tx = (fut_x[idx] - stats.mu_x) / stats.sd_x
                x_cat = ad.concat(x_preds, axis=1)  # (B, tau*d_x), step-major
                x_true = ad.constant(np.concatenate([tx[:, j] for j in range(tx.shape[1])], axis=1))
                loss = ad.add(loss, ad.mean(ad.square(ad.sub(x_cat, x_true))))
            if config.hsic_weight > 0:
                bal = hsic(ad.constant(assigned[idx]), phi)
                loss = ad.add(loss, ad.scale(bal, config.hsic_weight))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(epoch, bi)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            epoch_loss += value * len(idx)
        train_losses.append(epoch_loss / n)
        if vhist is not None:
            vl = validation_loss(model, vhist, vfut_a, vfut_y)
            val_losses.append(vl)
            if vl < best_val:
                best_val, best_weights, best_epoch, stale = vl, model.weight_values(), epoch, 0
            else:
                stale += 1
                if stale > config.patience:
                    break
    if vhist is not None:
        model.set_weight_values(best_weights)
    return TrainResult(model=model, train_losses=train_losses,
                       val_losses=val_losses, best_epoch=best_epoch)


# -- serialization -----------------------------------------------------------

def save_model(model: SurrogateModel, path) -> None:
    """Binary container: JSON header, float64 weight blocks, trailing CRC-32."""
    names = list(model.weights)
    header = {
        "schema": MODEL_SCHEMA,
        "flavor": model.flavor,
        "d_x": model.d_x,
        "hidden": model.hidden,
        "dropout": model.dropout,
        "revin": model.revin,
        "tau": model.tau,
        "weights": [{"name": k, "shape": list(model.weights[k].data.shape)} for k in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blocks = b"".join(np.ascontiguousarray(model.weights[k].data, dtype="<f8").tobytes()
                      for k in names)
    crc = zlib.crc32(header_bytes + blocks) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blocks)
        fh.write(struct.pack("<I", crc))


def load_model(path, expected_flavor: str | None = None) -> SurrogateModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header_bytes = raw[8:8 + hlen]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    blocks = raw[8 + hlen:-4]
    if zlib.crc32(header_bytes + blocks) & 0xFFFFFFFF != crc_stored:
        raise ModelFormatError("checksum mismatch: corrupted weight block or header")
    header = json.loads(header_bytes)
    if header.get("schema") != MODEL_SCHEMA:
        raise ModelFormatError(f"unsupported model schema {header.get('schema')!r}")
    if expected_flavor is not None and header["flavor"] != expected_flavor:
        raise ModelFormatError(
            f"flavor mismatch: file holds {header['flavor']!r}, expected {expected_flavor!r}")
    model = SurrogateModel(flavor=header["flavor"], d_x=header["d_x"],
                           hidden=header["hidden"], dropout=header["dropout"],
                           revin=header["revin"], tau=header["tau"])
    offset = 0
    weights = {}
    for spec in header["weights"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blocks, dtype="<f8", count=count, offset=offset).reshape(shape)
        weights[spec["name"]] = ad.parameter(arr)
        offset += count * 8
    if offset != len(blocks):
        raise ModelFormatError("weight block size mismatch")
    model.weights = weights
    return model
