"""Discrete-time simulation of feed-forward spiking networks.

Hidden layers are LIF neurons with soft (subtractive) reset, driven by either a
dense map or a dilated causal temporal convolution of the layer input.  The
output layer is a bank of non-spiking leaky integrators.  The membrane update
is the exponential-Euler form

    u[t] = a * u[t-1] + (1 - a) * c[t] - u_th * s[t-1],   a = exp(-dt / tau)
    s[t] = 1 if u[t] >= u_th else 0

so that without spiking the voltage settles at the input current.

Two interfaces are provided.  The per-step functions (``lif_step``,
``dense_current``, ``causal_conv_current``, ``leaky_output_step``) act on one
sample and one step; they are the readable reference.  ``forward_pass`` runs
whole batches over all steps through the kernels in ``_kernels``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels

U_TH = 1.0
TAU_FLOOR_FACTOR = 1.5
TAU_MAX = 10.0
DEFAULT_BETA = 0.5


class TauDomainError(ValueError):
    """A time constant fell below the stability floor of 1.5 * dt."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SimGrid:
    dt: float = 0.01
    T: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")

    @property
    def tau_floor(self) -> float:
        return TAU_FLOOR_FACTOR * self.dt

    @property
    def duration(self) -> float:
        return self.T * self.dt


@dataclass(frozen=True)
class HiddenLayer:
    size: int
    kind: str = "dense"
    kernel_size: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("layer size must be >= 1")
        if self.kind == "conv" and (self.kernel_size < 1 or self.dilation < 1):
            raise ValueError("conv layers need kernel_size >= 1 and dilation >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    grid: SimGrid
    input_size: int
    hidden: tuple
    output_size: int
    tau_out: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(
            h if isinstance(h, HiddenLayer) else HiddenLayer(**h) for h in self.hidden))
        if len(self.hidden) < 1:
            raise ValueError("at least one hidden layer is required")
        if self.input_size < 1 or self.output_size < 1:
            raise ValueError("input_size and output_size must be >= 1")
        if self.tau_out < self.grid.tau_floor:
            raise TauDomainError(f"tau_out={self.tau_out} below floor {self.grid.tau_floor}")

    @property
    def n_hidden(self) -> int:
        return len(self.hidden)

    def layer_sizes(self):
        return [self.input_size] + [h.size for h in self.hidden] + [self.output_size]

    def to_dict(self) -> dict:
        return {
            "grid": {"dt": self.grid.dt, "T": self.grid.T},
            "input_size": self.input_size,
            "hidden": [{"size": h.size, "kind": h.kind, "kernel_size": h.kernel_size,
                        "dilation": h.dilation} for h in self.hidden],
            "output_size": self.output_size,
            "tau_out": self.tau_out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(grid=SimGrid(**d["grid"]), input_size=d["input_size"],
                   hidden=tuple(HiddenLayer(**h) for h in d["hidden"]),
                   output_size=d["output_size"], tau_out=d["tau_out"])


@dataclass
class LayerParams:
    """Weights and per-neuron time constants of one layer.

    ``W`` is ``(M, N)`` for dense layers and ``(K, M, N)`` for conv layers.
    """

    kind: str
    W: np.ndarray
    tau: np.ndarray
    kernel_size: Optional[int] = None
    dilation: Optional[int] = None
    u_th: float = U_TH

    def __post_init__(self):
        if self.kind == "dense":
            if self.W.ndim != 2:
                raise ShapeError(f"dense W must be 2-D, got shape {self.W.shape}")
        elif self.kind == "conv":
            if self.W.ndim != 3:
                raise ShapeError(f"conv W must be 3-D, got shape {self.W.shape}")
            if self.kernel_size is None:
                self.kernel_size = self.W.shape[0]
            if self.dilation is None:
                self.dilation = 1
            if self.W.shape[0] != self.kernel_size:
                raise ShapeError("W.shape[0] must equal kernel_size")
            if self.dilation < 1:
                raise ValueError("dilation must be >= 1")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.tau.shape != (self.n_out,):
            raise ShapeError(f"tau shape {self.tau.shape} != ({self.n_out},)")

    @property
    def n_in(self) -> int:
        return self.W.shape[-2]

    @property
    def n_out(self) -> int:
        return self.W.shape[-1]

    def copy(self) -> "LayerParams":
        return LayerParams(self.kind, self.W.copy(), self.tau.copy(),
                           self.kernel_size, self.dilation, self.u_th)


class InputHistory:
    """Ring buffer holding the last ``(K - 1) * d`` input vectors of a conv layer."""

    def __init__(self, n_inputs: int, kernel_size: int, dilation: int, dtype=np.float64):
        if dilation < 1:
            raise ValueError("dilation must be >= 1")
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.length = (kernel_size - 1) * dilation
        self.buf = np.zeros((max(self.length, 1), n_inputs), dtype=dtype)
        self.pos = 0  # slot of the most recent input

    def lag(self, steps: int) -> np.ndarray:
        """Input from ``steps`` steps ago (``1 <= steps <= length``)."""
        return self.buf[(self.pos - steps + 1) % self.length]

    def push(self, x: np.ndarray) -> None:
        if self.length == 0:
            return
        self.pos = (self.pos + 1) % self.length
        self.buf[self.pos] = x


@dataclass
class LayerState:
    u: np.ndarray
    s: np.ndarray
    history: Optional[InputHistory] = None

    @classmethod
    def zeros(cls, params: LayerParams) -> "LayerState":
        n = params.n_out
        hist = None
        if params.kind == "conv":
            hist = InputHistory(params.n_in, params.kernel_size, params.dilation)
        return cls(np.zeros(n), np.zeros(n), hist)


# ---------------------------------------------------------------------------
# per-step operations


def decay_factor(tau, dt):
    """Per-step decay ``exp(-dt / tau)``; raises below the 1.5 * dt floor."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    tau_arr = np.asarray(tau, dtype=np.float64)
    # tolerance absorbs the rounding of 1.5 * dt itself
    if np.any(tau_arr < TAU_FLOOR_FACTOR * dt * (1 - 1e-12)) or np.any(np.isnan(tau_arr)):
        raise TauDomainError(f"tau below stability floor {TAU_FLOOR_FACTOR * dt} "
                             f"(or NaN): min tau = {np.min(tau_arr)}")
    out = np.exp(-dt / tau_arr)
    return float(out) if out.ndim == 0 else out


def dense_current(spikes_in, W):
    spikes_in = np.asarray(spikes_in)
    if W.ndim != 2 or spikes_in.shape != (W.shape[0],):
        raise ShapeError(f"input {spikes_in.shape} incompatible with W {W.shape}")
    return spikes_in @ W


def causal_conv_current(history: InputHistory, spikes_in, W, d: int):
    """``sum_k I(t - k*d) @ W[k]``; tap 0 reads the present input.

    ``history`` must hold inputs strictly before the present step.  It is not
    advanced here; call ``history.push(spikes_in)`` once the step is done.
    """
    if d < 1:
        raise ValueError("dilation must be >= 1")
    spikes_in = np.asarray(spikes_in)
    if W.ndim != 3 or spikes_in.shape != (W.shape[1],):
        raise ShapeError(f"input {spikes_in.shape} incompatible with W {W.shape}")
    K = W.shape[0]
    if history.length < (K - 1) * d:
        raise ShapeError("history shorter than (K - 1) * d")
    current = spikes_in @ W[0]
    for k in range(1, K):
        current = current + history.lag(k * d) @ W[k]
    return current


def lif_step(state: LayerState, current, params: LayerParams, grid: SimGrid):
    """One exponential-Euler LIF update; returns ``(u_next, s_next)``."""
    current = np.asarray(current, dtype=np.float64)
    if current.shape != state.u.shape or current.shape != params.tau.shape:
        raise ShapeError(f"current {current.shape} vs state {state.u.shape}")
    a = decay_factor(params.tau, grid.dt)
    u_next = a * state.u + (1.0 - a) * current - params.u_th * state.s
    s_next = (u_next >= params.u_th).astype(np.float64)
    return u_next, s_next


def leaky_output_step(u, current, tau_out: float, grid: SimGrid):
    u = np.asarray(u, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    if u.shape != current.shape:
        raise ShapeError(f"u {u.shape} vs current {current.shape}")
    a = decay_factor(tau_out, grid.dt)
    return a * u + (1.0 - a) * current


# ---------------------------------------------------------------------------
# batched forward pass


@dataclass
class Tape:
    """Everything recorded during a forward pass that BPTT needs.

    Per hidden layer ``l``: ``inputs[l]`` (B, T, M) is what entered the layer,
    ``currents[l]`` and ``voltages[l]`` are (B, T, N), ``spikes[l]`` are the
    raw spikes and ``masks[l]`` the dropout mask applied on the way out (None
    when no dropout was used).
    """

    spec: NetworkSpec
    params: list
    inputs: list
    currents: list
    voltages: list
    spikes: list
    masks: list
    alphas: list
    out_input: np.ndarray
    out_current: np.ndarray
    out: np.ndarray
    beta: float = DEFAULT_BETA
    relaxed: bool = False
    batched: bool = True

    @property
    def T(self) -> int:
        return self.out.shape[1]


def layer_current(x, params: LayerParams):
    """Input current of a whole layer; ``x`` is (B, T, M)."""
    if params.kind == "dense":
        return x @ params.W
    d = params.dilation
    T = x.shape[1]
    c = x @ params.W[0]
    for k in range(1, params.kernel_size):
        lag = k * d
        if lag >= T:
            break
        c[:, lag:] += x[:, :T - lag] @ params.W[k]
    return c


def layer_current_backward(x, grad_c, params: LayerParams, need_input_grad=True):
    """Returns ``(grad_W, grad_x)`` for ``layer_current``."""
    M, N = params.n_in, params.n_out
    if params.kind == "dense":
        gW = x.reshape(-1, M).T @ grad_c.reshape(-1, N)
        gx = grad_c @ params.W.T if need_input_grad else None
        return gW, gx
    d = params.dilation
    T = x.shape[1]
    gW = np.zeros_like(params.W)
    gx = np.zeros_like(x) if need_input_grad else None
    for k in range(params.kernel_size):
        lag = k * d
        if lag >= T:
            continue
        xs = x[:, :T - lag].reshape(-1, M)
        gs = grad_c[:, lag:].reshape(-1, N)
        gW[k] = xs.T @ gs
        if need_input_grad:
            gx[:, :T - lag] += grad_c[:, lag:] @ params.W[k].T
    return gW, gx


def check_params(spec: NetworkSpec, params) -> None:
    if len(params) != spec.n_hidden + 1:
        raise ShapeError(f"expected {spec.n_hidden + 1} layer params, got {len(params)}")
    sizes = spec.layer_sizes()
    for i, (h, p) in enumerate(zip(spec.hidden, params[:-1])):
        if p.kind != h.kind or p.n_in != sizes[i] or p.n_out != h.size:
            raise ShapeError(f"layer {i} params do not match spec")
        if h.kind == "conv" and (p.kernel_size != h.kernel_size or p.dilation != h.dilation):
            raise ShapeError(f"layer {i} kernel/dilation do not match spec")
    out = params[-1]
    if out.kind != "dense" or out.n_in != sizes[-2] or out.n_out != spec.output_size:
        raise ShapeError("output layer params do not match spec")


def forward_pass(spec: NetworkSpec, params, inputs, record: bool = False, *,
                 dropout_p: float = 0.0, rng=None, beta: float = DEFAULT_BETA,
                 relaxed: bool = False, dtype=np.float64, use_numba=None):
    """Simulate the network over all ``spec.grid.T`` steps.

    ``inputs`` is (T, C) or (B, T, C) of spike counts.  Returns the output
    voltages with matching leading shape, and a ``Tape`` when ``record`` is set.
    ``dropout_p > 0`` applies inverted dropout to hidden spikes and needs
    ``rng``.  ``relaxed`` swaps the Heaviside spike for the piecewise-linear
    ramp whose derivative is the box surrogate; it exists for gradient checks.
    """
    check_params(spec, params)
    x = np.asarray(inputs)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != spec.grid.T or x.shape[2] != spec.input_size:
        raise ShapeError(f"input shape {np.shape(inputs)} does not match "
                         f"T={spec.grid.T}, input_size={spec.input_size}")
    x = x.astype(dtype, copy=False)
    dt = spec.grid.dt
    rec = dict(inputs=[], currents=[], voltages=[], spikes=[], masks=[], alphas=[])
    for p in params[:-1]:
        alpha = decay_factor(p.tau, dt)
        c = layer_current(x, p).astype(dtype, copy=False)
        u, s = _kernels.lif_forward(c, alpha, p.u_th, beta, relaxed, use_numba)
        mask = None
        if dropout_p > 0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            mask = dropout_mask(s.shape, dropout_p, rng).astype(dtype, copy=False)
            x_next = s * mask
        else:
            x_next = s
        if record:
            for key, val in (("inputs", x), ("currents", c), ("voltages", u),
                             ("spikes", s), ("masks", mask), ("alphas", alpha)):
                rec[key].append(val)
        x = x_next
    out_p = params[-1]
    alpha_out = np.full(out_p.n_out, decay_factor(spec.tau_out, dt))
    c_out = (x @ out_p.W).astype(dtype, copy=False)
    out = _kernels.leaky_forward(c_out, alpha_out, use_numba)
    tape = None
    if record:
        tape = Tape(spec=spec, params=params, out_input=x, out_current=c_out, out=out,
                    beta=beta, relaxed=relaxed, batched=batched, **rec)
    if not batched:
        out = out[0]
    return out, tape


def dropout_mask(shape, p: float, rng) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1 / (1 - p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def replay(tape: Tape, use_numba=None):
    """Recompute hidden voltages from the recorded layer inputs."""
    dt = tape.spec.grid.dt
    volts = []
    for x, p in zip(tape.inputs, tape.params[:-1]):
        c = layer_current(x, p).astype(x.dtype, copy=False)
        u, _ = _kernels.lif_forward(c, decay_factor(p.tau, dt), p.u_th, tape.beta,
                                    tape.relaxed, use_numba)
        volts.append(u)
    return volts


def simulate_stepwise(spec: NetworkSpec, params, inputs):
    """Single-sample forward pass built only from the per-step operations."""
    check_params(spec, params)
    inputs = np.asarray(inputs, dtype=np.float64)
    states = [LayerState.zeros(p) for p in params[:-1]]
    u_out = np.zeros(spec.output_size)
    out = np.zeros((spec.grid.T, spec.output_size))
    for t in range(spec.grid.T):
        x = inputs[t]
        for st, p in zip(states, params[:-1]):
            if p.kind == "dense":
                c = dense_current(x, p.W)
            else:
                c = causal_conv_current(st.history, x, p.W, p.dilation)
                st.history.push(x)
            st.u, st.s = lif_step(st, c, p, spec.grid)
            x = st.s
        u_out = leaky_output_step(u_out, dense_current(x, params[-1].W), spec.tau_out,
                                  spec.grid)
        out[t] = u_out
    return out


def xavier_uniform(shape, rng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def input_gain(tau, dt: float) -> np.ndarray:
    """Per-neuron factor ``1 - alpha`` multiplying the input current."""
    return 1.0 - decay_factor(np.asarray(tau, dtype=np.float64), dt)


def init_params(spec: NetworkSpec, hidden_taus, rng, gain: float = 1.0,
                tau_scaled: bool = False):
    """Xavier-uniform weights scaled by ``gain``; ``hidden_taus`` is one array
    per hidden layer.

    With ``tau_scaled`` each neuron's incoming weights are divided by its
    ``1 - alpha``, so the initial voltages match a ``u = alpha*u + W x``
    integrator with Xavier weights, whatever the time constants.
    """
    if len(hidden_taus) != spec.n_hidden:
        raise ShapeError("need one tau array per hidden layer")
    dt = spec.grid.dt
    params = []
    m = spec.input_size
    for h, tau in zip(spec.hidden, hidden_taus):
        tau = np.asarray(tau, dtype=np.float64)
        if h.kind == "dense":
            W = xavier_uniform((m, h.size), rng, m, h.size, gain)
            p = LayerParams("dense", W, tau)
        else:
            K = h.kernel_size
            W = xavier_uniform((K, m, h.size), rng, K * m, h.size, gain)
            p = LayerParams("conv", W, tau, kernel_size=K, dilation=h.dilation)
        if tau_scaled:
            p.W = p.W / input_gain(tau, dt)
        params.append(p)
        m = h.size
    W = xavier_uniform((m, spec.output_size), rng, m, spec.output_size, gain)
    out = LayerParams("dense", W, np.full(spec.output_size, spec.tau_out))
    if tau_scaled:
        out.W = out.W / input_gain(out.tau, dt)
    params.append(out)
    return params


def copy_params(params):
    return [p.copy() for p in params]
