"""Temporal-hierarchy schedules: per-layer time-constant means, per-neuron
time-constant draws, and per-layer kernel-size / dilation ramps.

Layers are indexed from 1 in every formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import TAU_FLOOR_FACTOR, TauDomainError

TAU_SHAPES = ("homogeneous", "linear", "tanh", "paper_literal_linear")


@dataclass(frozen=True)
class TauSchedule:
    shape: str = "linear"
    tau_mu: float = 0.3
    delta_tau: float = 0.0
    steepness: float = 0.5
    centering: float = 0.5
    n_layers: int = 2
    dt: float = 0.01

    def __post_init__(self):
        if self.shape not in TAU_SHAPES:
            raise ValueError(f"unknown tau schedule shape {self.shape!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    def means(self) -> np.ndarray:
        if self.shape == "homogeneous":
            out = np.full(self.n_layers, float(self.tau_mu))
        elif self.shape == "linear":
            out = linear_tau_means(self.tau_mu, self.delta_tau, self.n_layers)
        elif self.shape == "paper_literal_linear":
            out = linear_tau_means(self.tau_mu, self.delta_tau, self.n_layers, literal=True)
        else:
            out = tanh_tau_means(self.tau_mu, self.delta_tau, self.steepness,
                                 self.centering, self.n_layers)
        _check_floor(out, self.dt)
        return out


@dataclass(frozen=True)
class ConvSchedule:
    mean_kernel: int = 5
    delta_ker: int = 0
    mean_dilation: int = 5
    delta_dil: int = 0
    n_layers: int = 2

    def kernels_and_dilations(self):
        return conv_schedules(self.mean_kernel, self.delta_ker, self.mean_dilation,
                              self.delta_dil, self.n_layers)


def _check_floor(taus, dt):
    floor = TAU_FLOOR_FACTOR * dt
    if np.any(taus < floor * (1 - 1e-12)):
        raise TauDomainError(f"schedule {np.round(taus, 6).tolist()} violates the "
                             f"tau floor {floor}")


def _ramp(n_layers):
    """(l - 1) / (H - 1) - 1/2 for l = 1..H; zeros for a single layer."""
    if n_layers == 1:
        return np.zeros(1)
    l = np.arange(1, n_layers + 1)
    return (l - 1) / (n_layers - 1) - 0.5


def linear_tau_means(tau_mu, delta_tau, n_layers, literal=False, dt=None):
    """Linear time-constant ramp across layers.

    Default form has mean ``tau_mu`` and last-minus-first ``delta_tau``.  With
    ``literal`` it evaluates ``tau_mu + (l - H/2) * delta_tau / 2``.
    """
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if literal:
        l = np.arange(1, n_layers + 1)
        out = tau_mu + (l - n_layers / 2) * delta_tau / 2
    else:
        out = tau_mu + _ramp(n_layers) * delta_tau
    if dt is not None:
        _check_floor(out, dt)
    return out


def tanh_tau_means(tau_mu, delta_tau, steepness, centering, n_layers, dt=None):
    """``tau_mu + norm(tanh(s * (l/H - c))) * delta_tau / 2``.

    ``norm`` maps the realized min/max of the tanh values over the layers onto
    [-1, 1], so the schedule spans exactly ``tau_mu +- |delta_tau| / 2``.
    """
    if n_layers < 2:
        raise ValueError("tanh schedule needs at least 2 layers")
    if steepness == 0:
        raise ValueError("steepness must be non-zero")
    l = np.arange(1, n_layers + 1)
    g = np.tanh(steepness * (l / n_layers - centering))
    lo, hi = g.min(), g.max()
    if not hi > lo:
        raise ValueError("degenerate tanh schedule: all layers map to the same value")
    mapped = 2.0 * (g - lo) / (hi - lo) - 1.0
    out = tau_mu + mapped * delta_tau / 2
    if dt is not None:
        _check_floor(out, dt)
    return out


def sample_layer_taus(mean, n, rng, dt=0.01, rel_std=0.2):
    """Draw ``n`` time constants from Normal(mean, 0.2 * mean), floored at 1.5 * dt."""
    floor = TAU_FLOOR_FACTOR * dt
    if mean < floor * (1 - 1e-12):
        raise TauDomainError(f"mean tau {mean} below floor {floor}")
    taus = rng.normal(mean, rel_std * mean, size=int(n))
    return np.maximum(taus, floor)


def sample_network_taus(layer_means, sizes, rng, dt=0.01):
    return [sample_layer_taus(m, n, rng, dt) for m, n in zip(layer_means, sizes)]


def _round_half_away(x: Fraction) -> int:
    sign = -1 if x < 0 else 1
    return sign * math.floor(abs(x) + Fraction(1, 2))


def integer_ramp(mean, delta, n_layers):
    if n_layers == 1:
        return np.array([int(mean)])
    vals = []
    for l in range(1, n_layers + 1):
        v = Fraction(mean) + Fraction(delta) * Fraction(2 * (l - 1) - (n_layers - 1),
                                                        2 * (n_layers - 1))
        vals.append(_round_half_away(v))
    return np.array(vals, dtype=np.int64)


def conv_schedules(mean_kernel, delta_ker, mean_dilation, delta_dil, n_layers):
    """Integer linear ramps of kernel size and dilation over the layers."""
    kernels = integer_ramp(mean_kernel, delta_ker, n_layers)
    dilations = integer_ramp(mean_dilation, delta_dil, n_layers)
    if np.any(kernels < 1):
        raise ValueError(f"kernel schedule {kernels.tolist()} has values < 1")
    if np.any(dilations < 1):
        raise ValueError(f"dilation schedule {dilations.tolist()} has values < 1")
    return kernels, dilations
