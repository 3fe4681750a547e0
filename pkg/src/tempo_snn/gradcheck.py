"""Compare BPTT gradients with central finite differences on small random nets.

The finite differences run through the relaxed forward (spike = clipped ramp of
half-width ``reference_beta``), whose derivative is exactly the box surrogate.
Trajectories with a voltage within ``edge_delta`` of a box edge, and max-loss
samples whose window argmax is nearly tied, are redrawn since the reference is
not differentiable there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import backward_pass, edge_margin, finite_difference_gradient, relative_error
from .core import HiddenLayer, NetworkSpec, SimGrid, forward_pass, init_params
from .training import compute_loss

MAX_REDRAWS = 200
MAX_PARAMS = 2000


class GradcheckSizeError(ValueError):
    pass


@dataclass
class NetCheck:
    index: int
    layer_kind: str
    loss: str
    err_weights: float
    err_tau: float
    redraws: int
    passed: bool


@dataclass
class GradcheckReport:
    checks: list = field(default_factory=list)
    tol_weights: float = 1e-5
    tol_tau: float = 1e-4

    @property
    def passed(self):
        return bool(self.checks) and all(c.passed for c in self.checks)

    @property
    def max_err_weights(self):
        return max(c.err_weights for c in self.checks)

    @property
    def max_err_tau(self):
        errs = [c.err_tau for c in self.checks if not np.isnan(c.err_tau)]
        return max(errs) if errs else float("nan")

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and np.isnan(v) else v
        nets = [{k: clean(v) for k, v in c.__dict__.items()} for c in self.checks]
        return {"passed": self.passed, "max_err_weights": self.max_err_weights,
                "max_err_tau": clean(self.max_err_tau), "tol_weights": self.tol_weights,
                "tol_tau": self.tol_tau, "nets": nets}


def _toy_windows(rng, B, T, n_out):
    # two non-overlapping windows covering the second and last thirds
    a, b = T // 3, 2 * T // 3
    w = np.empty((B, 2, 3), dtype=np.int64)
    w[:, 0, 0], w[:, 0, 1] = a, b
    w[:, 1, 0], w[:, 1, 1] = b, T
    w[:, :, 2] = rng.integers(0, n_out, size=(B, 2))
    return w


def _argmax_gap(out, windows):
    gap = np.inf
    for b in range(out.shape[0]):
        for s, e, _ in windows[b]:
            seg = np.sort(out[b, s:e], axis=0)
            if e - s > 1:
                gap = min(gap, float(np.min(seg[-1] - seg[-2])))
    return gap


def _toy_net(rng, gc, kind):
    grid = SimGrid(0.01, gc.T)
    if kind == "conv":
        hidden = tuple(HiddenLayer(gc.hidden_size, "conv", int(rng.integers(1, 4)),
                                   int(rng.integers(1, 3))) for _ in range(gc.n_hidden))
    else:
        hidden = tuple(HiddenLayer(gc.hidden_size) for _ in range(gc.n_hidden))
    spec = NetworkSpec(grid, gc.n_inputs, hidden, gc.n_outputs, 0.2)
    taus = [rng.uniform(0.02, 0.3, size=gc.hidden_size) for _ in range(gc.n_hidden)]
    params = init_params(spec, taus, rng, gain=rng.uniform(3.0, 8.0))
    x = (rng.random((gc.batch, gc.T, gc.n_inputs)) < 0.4).astype(np.float64)
    return spec, params, x


def check_one(index, rng, gc, kind, loss, beta, train_tau=True):
    """Draw admissible toy nets until one qualifies, then compare gradients."""
    for redraw in range(MAX_REDRAWS):
        spec, params, x = _toy_net(rng, gc, kind)
        labels = rng.integers(0, gc.n_outputs, size=gc.batch)
        windows = _toy_windows(rng, gc.batch, gc.T, gc.n_outputs)
        out, tape = forward_pass(spec, params, x, record=True, beta=gc.reference_beta,
                                 relaxed=True)
        if edge_margin(tape, gc.reference_beta) < gc.edge_delta:
            continue
        if loss == "max_over_windows" and _argmax_gap(out, windows) < 100 * gc.epsilon:
            continue
        _, g_out = compute_loss(loss, out, labels, windows, return_grad=True)
        ref = backward_pass(tape, g_out, train_tau=True, beta=gc.reference_beta)
        # a net whose gradients vanish in every hidden layer checks nothing
        if not all(np.any(g.tau != 0) for g in ref[:-1]):
            continue
        break
    else:
        raise RuntimeError(f"no admissible toy net after {MAX_REDRAWS} draws")

    def loss_fn(o):
        return compute_loss(loss, o, labels, windows)

    n_params = sum(p.W.size + (p.tau.size if train_tau else 0) for p in params[:-1])
    n_params += params[-1].W.size
    if n_params > MAX_PARAMS:
        raise GradcheckSizeError(f"gradcheck net has {n_params} parameters (max {MAX_PARAMS})")
    bptt = backward_pass(tape, g_out, train_tau=train_tau, beta=beta)
    fd = finite_difference_gradient(spec, params, x, loss_fn, gc.epsilon, train_tau=train_tau,
                                    beta=gc.reference_beta, relaxed=True)
    gw_a = np.concatenate([g.W.ravel() for g in bptt])
    gw_b = np.concatenate([g.W.ravel() for g in fd])
    gt_a = np.concatenate([g.tau.ravel() for g in bptt[:-1]])
    gt_b = np.concatenate([g.tau.ravel() for g in fd[:-1]])
    ew = relative_error(gw_a, gw_b)
    et = relative_error(gt_a, gt_b) if train_tau else float("nan")
    ok = bool(ew <= gc.tol_weights and (not train_tau or et <= gc.tol_tau))
    return NetCheck(index, kind, loss, ew, et, redraw, ok)


def run_gradcheck(gc, seed=0, beta=0.5, train_tau=True) -> GradcheckReport:
    """``beta`` is the surrogate half-width used by the backward pass under test.

    Time-constant gradients are compared only with ``train_tau``.
    """
    rng = np.random.default_rng([seed, 7])
    report = GradcheckReport(tol_weights=gc.tol_weights, tol_tau=gc.tol_tau)
    combos = [(k, l) for k in gc.layer_kinds for l in gc.losses]
    for i in range(gc.n_nets):
        kind, loss = combos[i % len(combos)]
        report.checks.append(check_one(i, rng, gc, kind, loss, beta, train_tau))
    return report
