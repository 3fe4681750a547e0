"""Losses, regularizers, optimizer and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autograd import Gradients, LayerGrad, backward_pass
from .core import DEFAULT_BETA, TAU_MAX, copy_params, forward_pass, input_gain

log = logging.getLogger(__name__)

LOSS_KINDS = ("sum_softmax", "max_over_windows", "double_softmax")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, detail=""):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}{detail}")


# ---------------------------------------------------------------------------
# losses


def _log_softmax(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    zs = z - m
    return zs - np.log(np.sum(np.exp(zs), axis=axis, keepdims=True))


def _as_batch(out):
    out = np.asarray(out, dtype=np.float64)
    if out.ndim == 2:
        return out[None], False
    return out, True


def _check_finite(out):
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite output voltages")


def loss_sum(out, y, return_grad=False):
    """Time-averaged cross-entropy of per-step softmax, averaged over the batch."""
    out, batched = _as_batch(out)
    _check_finite(out)
    B, T, N = out.shape
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (B,) or np.any(y < 0) or np.any(y >= N):
        raise ValueError("labels out of range or wrong shape")
    logp = _log_softmax(out)
    picked = logp[np.arange(B), :, y]  # (B, T)
    value = float(-np.mean(picked))
    if not return_grad:
        return value
    grad = np.exp(logp)
    grad[np.arange(B), :, y] -= 1.0
    grad /= B * T
    return value, grad if batched else grad[0]


def loss_double_softmax(out, y, return_grad=False):
    """Cross-entropy on the softmax of time-summed per-step softmax outputs."""
    out, batched = _as_batch(out)
    _check_finite(out)
    B, T, N = out.shape
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    p = np.exp(_log_softmax(out))
    z = p.sum(axis=1)
    logq = _log_softmax(z)
    value = float(-np.mean(logq[np.arange(B), y]))
    if not return_grad:
        return value
    gz = np.exp(logq)
    gz[np.arange(B), y] -= 1.0
    gz /= B
    gz = gz[:, None, :]
    grad = p * (gz - np.sum(p * gz, axis=-1, keepdims=True))
    return value, grad if batched else grad[0]


def _windows_batch(windows, B):
    w = np.asarray(windows, dtype=np.int64)
    if w.ndim == 2:
        w = np.broadcast_to(w, (B,) + w.shape)
    if w.ndim != 3 or w.shape[0] != B or w.shape[2] != 3 or w.shape[1] == 0:
        raise ValueError("windows must be a non-empty (n_windows, 3) or (B, n_windows, 3) array")
    return w


def window_maxima(out, windows):
    """Per-window max voltage and its step, shapes (B, W, N)."""
    out, _ = _as_batch(out)
    B, T, N = out.shape
    w = _windows_batch(windows, B)
    W = w.shape[1]
    vals = np.empty((B, W, N))
    idx = np.empty((B, W, N), dtype=np.int64)
    # windows share their timing across the batch in all generated datasets
    if np.all(w[:, :, :2] == w[:1, :, :2]):
        for j in range(W):
            s, e = w[0, j, 0], w[0, j, 1]
            if not 0 <= s < e <= T:
                raise ValueError(f"window [{s}, {e}) outside [0, {T})")
            seg = out[:, s:e]
            k = np.argmax(seg, axis=1)
            idx[:, j] = k + s
            vals[:, j] = np.take_along_axis(seg, k[:, None], axis=1)[:, 0]
    else:
        for b in range(B):
            for j in range(W):
                s, e = w[b, j, 0], w[b, j, 1]
                if not 0 <= s < e <= T:
                    raise ValueError(f"window [{s}, {e}) outside [0, {T})")
                k = np.argmax(out[b, s:e], axis=0)
                idx[b, j] = k + s
                vals[b, j] = out[b, s + k, np.arange(N)]
    return vals, idx, w[:, :, 2]


def loss_max_windows(out, windows, return_grad=False):
    """Cross-entropy of the per-window maximum voltage, averaged over windows."""
    out_b, batched = _as_batch(out)
    _check_finite(out_b)
    B, T, N = out_b.shape
    vals, idx, labels = window_maxima(out_b, windows)
    W = vals.shape[1]
    if np.any(labels < 0) or np.any(labels >= N):
        raise ValueError("window label out of range")
    logp = _log_softmax(vals)
    bi, wi = np.meshgrid(np.arange(B), np.arange(W), indexing="ij")
    value = float(-np.mean(logp[bi, wi, labels]))
    if not return_grad:
        return value
    gv = np.exp(logp)
    gv[bi, wi, labels] -= 1.0
    gv /= B * W
    grad = np.zeros_like(out_b)
    ni = np.broadcast_to(np.arange(N), (B, W, N))
    np.add.at(grad, (np.broadcast_to(bi[..., None], (B, W, N)), idx, ni), gv)
    return value, grad if batched else grad[0]


def compute_loss(kind, out, labels=None, windows=None, return_grad=False):
    if kind == "sum_softmax":
        return loss_sum(out, labels, return_grad)
    if kind == "double_softmax":
        return loss_double_softmax(out, labels, return_grad)
    if kind == "max_over_windows":
        if windows is None:
            raise ValueError("max_over_windows loss needs windows")
        return loss_max_windows(out, windows, return_grad)
    raise ValueError(f"unknown loss kind {kind!r}")


def predict(kind, out, windows=None):
    """Predicted classes: (B,) for sum losses, (B, W) for windowed loss."""
    out, _ = _as_batch(out)
    if kind == "max_over_windows":
        vals, _, _ = window_maxima(out, windows)
        return np.argmax(vals, axis=-1)
    return np.argmax(_log_softmax(out).sum(axis=1), axis=-1)


def tau_regularizer(taus, return_grad=False):
    """Sum over layers of the squared norm of the mean-centred time constants."""
    value = 0.0
    grads = []
    for tau in taus:
        tau = np.asarray(tau, dtype=np.float64)
        centred = tau - tau.mean()
        value += float(centred @ centred)
        grads.append(2.0 * centred)
    if return_grad:
        return value, grads
    return value


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimSpec:
    lr0: float = 0.01
    decay_start: int = 25
    decay_factor: float = 0.5
    decay_mode: str = "linear"
    epochs: int = 60
    batch_size: int = 512
    dropout_p: float = 0.1
    l2_coeff: float = 0.0
    tau_reg_coeff: float = 1e-5
    train_tau: bool = False
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    surrogate_beta: float = DEFAULT_BETA
    reset_grad: bool = True
    tau_preconditioning: bool = True

    def __post_init__(self):
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.decay_mode not in ("linear", "step", "none"):
            raise ValueError(f"unknown decay mode {self.decay_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def learning_rate(optim: OptimSpec, epoch: int) -> float:
    """Constant until ``decay_start``, then linear down to ``lr0 * decay_factor``
    at the last epoch (0-based epoch index)."""
    lr0 = optim.lr0
    if optim.decay_mode == "none" or epoch < optim.decay_start:
        return lr0
    if optim.decay_mode == "step":
        return lr0 * optim.decay_factor
    last = optim.epochs - 1
    if last <= optim.decay_start:
        return lr0
    frac = min((epoch - optim.decay_start) / (last - optim.decay_start), 1.0)
    return lr0 * (1.0 - (1.0 - optim.decay_factor) * frac)


@dataclass
class AdamState:
    step: int
    m_W: list
    v_W: list
    m_tau: list
    v_tau: list

    @classmethod
    def zeros(cls, params):
        return cls(0, [np.zeros_like(p.W) for p in params], [np.zeros_like(p.W) for p in params],
                   [np.zeros_like(p.tau) for p in params], [np.zeros_like(p.tau) for p in params])


def optimizer_step(params, grads, state: AdamState, lr: float, optim: OptimSpec, dt: float):
    """Bias-corrected Adam update in place; returns ``params``.

    Weight gradients get ``l2_coeff * W`` added.  Hidden time constants are
    updated only with ``optim.train_tau`` and clamped to [1.5 * dt, 10 s].

    With ``optim.tau_preconditioning`` the step on a neuron's incoming weights
    is divided by its ``1 - alpha``.  Adam ignores gradient scale, so this is
    plain Adam on ``V = (1 - alpha) * W``, the weights of an integrator without
    the input gain; paired with ``tau_scaled`` init it keeps slow neurons
    learning at the same relative rate as fast ones.
    """
    if not grads.is_finite():
        bad = [i for i, g in enumerate(grads)
               if not (np.all(np.isfinite(g.W)) and np.all(np.isfinite(g.tau)))]
        raise FloatingPointError(f"non-finite gradients in layers {bad}; step skipped")
    b1, b2, eps = optim.beta1, optim.beta2, optim.eps
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    n_hidden = len(params) - 1
    for i, (p, g) in enumerate(zip(params, grads)):
        gW = g.W + optim.l2_coeff * p.W if optim.l2_coeff else g.W
        state.m_W[i] = b1 * state.m_W[i] + (1 - b1) * gW
        state.v_W[i] = b2 * state.v_W[i] + (1 - b2) * gW * gW
        step = lr * (state.m_W[i] / c1) / (np.sqrt(state.v_W[i] / c2) + eps)
        if optim.tau_preconditioning:
            step = step / input_gain(p.tau, dt)  # neuron axis is last for dense and conv
        p.W -= step
        if optim.train_tau and i < n_hidden:
            gt = g.tau
            state.m_tau[i] = b1 * state.m_tau[i] + (1 - b1) * gt
            state.v_tau[i] = b2 * state.v_tau[i] + (1 - b2) * gt * gt
            p.tau -= lr * (state.m_tau[i] / c1) / (np.sqrt(state.v_tau[i] / c2) + eps)
            np.clip(p.tau, 1.5 * dt, TAU_MAX, out=p.tau)
    return params


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    tau_median: list


@dataclass
class Metrics:
    rows: list = field(default_factory=list)
    tau_summary: list = field(default_factory=list)  # per epoch: per-layer stats
    best_epoch: int = 0
    best_valid_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    test_loss: float = float("nan")
    wall_clock: float = 0.0
    optim_state: Optional["AdamState"] = None  # Adam moments after the last step

    def split_rows(self, split):
        return [r for r in self.rows if r.split == split]


def tau_stats(params):
    stats = []
    for p in params[:-1]:
        q25, med, q75 = np.quantile(p.tau, [0.25, 0.5, 0.75])
        stats.append({"median": float(med), "mean": float(p.tau.mean()),
                      "q25": float(q25), "q75": float(q75),
                      "min": float(p.tau.min()), "max": float(p.tau.max())})
    return stats


def evaluate(spec, params, dataset, loss_kind, batch_size=512, use_numba=None):
    """Accuracy and mean loss on a dataset split; side-effect free."""
    n = len(dataset)
    if n == 0:
        return float("nan"), float("nan")
    correct = 0
    total = 0
    loss_acc = 0.0
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        out, _ = forward_pass(spec, params, dataset.data[sl], use_numba=use_numba)
        windows = dataset.windows[sl] if dataset.windows is not None else None
        labels = dataset.labels[sl] if dataset.labels is not None else None
        b = out.shape[0]
        loss_acc += compute_loss(loss_kind, out, labels, windows) * b
        pred = predict(loss_kind, out, windows)
        truth = windows[:, :, 2] if loss_kind == "max_over_windows" else labels
        correct += int(np.sum(pred == truth))
        total += int(np.size(truth))
    return correct / total, loss_acc / n


@dataclass
class DataSplits:
    train: object
    valid: object
    test: object


def _spawn(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def train(spec, optim: OptimSpec, data: DataSplits, params, loss_kind="sum_softmax",
          augment: Optional[Callable] = None, use_numba=None, on_epoch=None):
    """Mini-batch training from ``params`` (copied, not modified).

    Returns ``(best_params, metrics)`` where ``best_params`` is the snapshot with
    the highest validation accuracy (earliest on ties; epoch 0 is the
    initialization).  ``augment(batch, rng)`` transforms training inputs.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    t0 = time.perf_counter()
    params = copy_params(params)
    shuffle_rng, dropout_rng, augment_rng = _spawn(optim.seed, 3)
    state = AdamState.zeros(params)
    metrics = Metrics()
    dt = spec.grid.dt
    ev_bs = max(optim.batch_size, 256)

    def record_eval(epoch, lr, train_stats=None):
        meds = [s["median"] for s in tau_stats(params)]
        if train_stats is None:
            acc, loss = evaluate(spec, params, data.train, loss_kind, ev_bs, use_numba)
        else:
            loss, acc = train_stats
        metrics.rows.append(EpochRecord(epoch, "train", loss, acc, lr, meds))
        results = {}
        for split in ("valid", "test"):
            ds = getattr(data, split)
            if ds is None or len(ds) == 0:
                continue
            acc_s, loss_s = evaluate(spec, params, ds, loss_kind, ev_bs, use_numba)
            metrics.rows.append(EpochRecord(epoch, split, loss_s, acc_s, lr, meds))
            results[split] = (acc_s, loss_s)
        metrics.tau_summary.append(tau_stats(params))
        return results

    res = record_eval(0, learning_rate(optim, 0))
    best = copy_params(params)
    best_valid = res.get("valid", (float("nan"),))[0]
    best_epoch = 0

    n = len(data.train)
    for epoch in range(optim.epochs):
        lr = learning_rate(optim, epoch)
        order = shuffle_rng.permutation(n)
        loss_sum_ = 0.0
        correct = 0
        total = 0
        for bi, start in enumerate(range(0, n, optim.batch_size)):
            idx = np.sort(order[start:start + optim.batch_size])
            x = data.train.data[idx]
            if augment is not None:
                x = augment(x, augment_rng)
            labels = data.train.labels[idx] if data.train.labels is not None else None
            windows = data.train.windows[idx] if data.train.windows is not None else None
            out, tape = forward_pass(spec, params, x, record=True, dropout_p=optim.dropout_p,
                                     rng=dropout_rng, beta=optim.surrogate_beta,
                                     use_numba=use_numba)
            if not np.all(np.isfinite(out)):
                raise TrainingDivergedError(epoch + 1, bi, ": non-finite output")
            value, g_out = compute_loss(loss_kind, out, labels, windows, return_grad=True)
            grads = backward_pass(tape, g_out, optim.train_tau, reset_grad=optim.reset_grad,
                                  use_numba=use_numba)
            if optim.train_tau and optim.tau_reg_coeff:
                reg, reg_g = tau_regularizer([p.tau for p in params[:-1]], return_grad=True)
                value += optim.tau_reg_coeff * reg
                for g, rg in zip(grads, reg_g):
                    g.tau = g.tau + optim.tau_reg_coeff * rg
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch + 1, bi, ": loss is NaN")
            try:
                optimizer_step(params, grads, state, lr, optim, dt)
            except FloatingPointError as e:
                raise TrainingDivergedError(epoch + 1, bi, f": {e}") from e
            b = x.shape[0]
            loss_sum_ += value * b
            pred = predict(loss_kind, out, windows)
            truth = windows[:, :, 2] if loss_kind == "max_over_windows" else labels
            correct += int(np.sum(pred == truth))
            total += int(np.size(truth))
        res = record_eval(epoch + 1, lr, (loss_sum_ / n, correct / total))
        if "valid" in res and (np.isnan(best_valid) or res["valid"][0] > best_valid):
            best_valid = res["valid"][0]
            best = copy_params(params)
            best_epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch + 1, metrics)
        log.debug("epoch %d lr %.4g train %.4f valid %s", epoch + 1, lr,
                  correct / total, res.get("valid"))

    if "valid" not in res:
        best = copy_params(params)
        best_epoch = optim.epochs
    metrics.best_epoch = best_epoch
    metrics.best_valid_accuracy = best_valid
    if data.test is not None and len(data.test):
        metrics.test_accuracy, metrics.test_loss = evaluate(spec, best, data.test, loss_kind,
                                                            ev_bs, use_numba)
    metrics.optim_state = state
    metrics.wall_clock = time.perf_counter() - t0
    return best, metrics
