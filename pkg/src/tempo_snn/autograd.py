"""Backpropagation through time over a recorded ``Tape``.

The Heaviside derivative is replaced by a box of half-width ``beta`` and height
``1 / (2 * beta)`` centred on the threshold.  The same surrogate carries the
gradient through the soft-reset term unless ``reset_grad`` is off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import DEFAULT_BETA, decay_factor, forward_pass, layer_current_backward


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, what, layer, step):
        self.layer = layer
        self.step = step
        super().__init__(f"non-finite {what} in layer {layer} at step {step}")


@dataclass
class LayerGrad:
    W: np.ndarray
    tau: np.ndarray


class Gradients(list):
    """One ``LayerGrad`` per entry of the params list (hidden layers, then output)."""

    def scaled(self, a):
        return Gradients(LayerGrad(a * g.W, a * g.tau) for g in self)

    def __add__(self, other):
        return Gradients(LayerGrad(g.W + h.W, g.tau + h.tau) for g, h in zip(self, other))

    def is_finite(self):
        return all(np.all(np.isfinite(g.W)) and np.all(np.isfinite(g.tau)) for g in self)


def surrogate_box(u, u_th=1.0, beta=DEFAULT_BETA):
    """Box pseudo-derivative of the spike function; integrates to 1 over ``u``.

    A non-positive width yields an all-zero derivative.
    """
    u = np.asarray(u, dtype=np.float64)
    height = 1.0 / (2.0 * beta) if beta > 0 else 0.0
    out = np.where(np.abs(u - u_th) < beta, height, 0.0)
    return float(out) if out.ndim == 0 else out


def _first_bad_step(a):
    bad = ~np.isfinite(a)
    if a.ndim == 3:
        return int(np.argwhere(bad.any(axis=(0, 2)))[0, 0])
    return -1


def backward_pass(tape, dL_dout, train_tau: bool = False, *, beta=None,
                  reset_grad: bool = True, use_numba=None) -> Gradients:
    """Gradients of a scalar loss given ``dL_dout`` with the shape of ``tape.out``.

    ``beta`` defaults to the width the forward pass was recorded with.
    """
    g = np.asarray(dL_dout, dtype=tape.out.dtype)
    if not tape.batched:
        g = g[None]
    if g.shape != tape.out.shape:
        raise ValueError(f"dL_dout shape {np.shape(dL_dout)} != output shape "
                         f"{tape.out.shape if tape.batched else tape.out.shape[1:]}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("upstream gradient", "output", _first_bad_step(g))
    if beta is None:
        beta = tape.beta
    spec = tape.spec
    dt = spec.grid.dt
    params = tape.params
    n_hidden = spec.n_hidden

    out_p = params[-1]
    alpha_out = np.full(out_p.n_out, decay_factor(spec.tau_out, dt))
    gc = _kernels.leaky_backward(g, alpha_out, use_numba)
    gW, gx = layer_current_backward(tape.out_input, gc, out_p)
    grads = [LayerGrad(gW, np.zeros_like(out_p.tau))]

    for l in range(n_hidden - 1, -1, -1):
        p = params[l]
        gs = gx if tape.masks[l] is None else gx * tape.masks[l]
        gc, g_alpha = _kernels.lif_backward(gs, tape.currents[l], tape.voltages[l],
                                            tape.alphas[l], p.u_th, beta, reset_grad,
                                            use_numba)
        if not np.all(np.isfinite(gc)):
            raise NonFiniteGradientError("current gradient", l, _first_bad_step(gc))
        if train_tau:
            a = tape.alphas[l]
            g_tau = g_alpha * a * dt / p.tau ** 2
        else:
            g_tau = np.zeros_like(p.tau)
        gW, gx = layer_current_backward(tape.inputs[l], gc, p, need_input_grad=l > 0)
        if not np.all(np.isfinite(gW)) or not np.all(np.isfinite(g_tau)):
            raise NonFiniteGradientError("parameter gradient", l, -1)
        grads.append(LayerGrad(gW, g_tau))
    grads.reverse()
    return Gradients(grads)


def finite_difference_gradient(spec, params, inputs, loss_fn, epsilon=1e-5, *,
                               train_tau=True, beta=DEFAULT_BETA, relaxed=True):
    """Central differences of ``loss_fn(forward_pass(...)[0])`` per parameter.

    Perturbs every weight and, with ``train_tau``, every hidden time constant.
    The forward uses the relaxed spike ramp by default, whose exact derivative
    is the box surrogate; meant for nets of up to a few thousand parameters.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    def loss_at():
        out, _ = forward_pass(spec, params, inputs, beta=beta, relaxed=relaxed)
        return float(loss_fn(out))

    grads = []
    for li, p in enumerate(params):
        gW = np.zeros_like(p.W)
        flat = p.W.reshape(-1)
        gflat = gW.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_at()
            flat[i] = orig - epsilon
            lm = loss_at()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * epsilon)
        g_tau = np.zeros_like(p.tau)
        if train_tau and li < len(params) - 1:
            for i in range(p.tau.size):
                orig = p.tau[i]
                p.tau[i] = orig + epsilon
                lp = loss_at()
                p.tau[i] = orig - epsilon
                lm = loss_at()
                p.tau[i] = orig
                g_tau[i] = (lp - lm) / (2 * epsilon)
        grads.append(LayerGrad(gW, g_tau))
    return Gradients(grads)


def relative_error(a, b, floor=1e-12):
    """Largest elementwise difference, normalised by the larger max-magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def edge_margin(tape, beta=None, u_th=1.0):
    """Smallest distance of any hidden voltage to the surrogate box edges."""
    if beta is None:
        beta = tape.beta
    m = np.inf
    for u in tape.voltages:
        d = np.abs(np.abs(u - u_th) - beta)
        m = min(m, float(d.min()))
    return m
