"""Two-hidden-layer tanh network with hand-written first and second order passes.

All functions accept a single input vector ``(d_in,)`` or a batch
``(B, d_in)``. Parameter gradients are returned for the *sum* of the output
cotangents over the batch in :func:`backward_params`, and for the batch *mean*
of the penalty in the two penalty functions.

The penalty gradients differentiate the input Jacobian

    J = W3 diag(t2') W2 diag(t1') W1[:, cols]

with respect to every parameter, including the dependence of the tanh
derivatives on the pre-activations.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .numerics import Rng

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class _Tensors:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_NAMES]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays()]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_vector(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        parts, pos = {}, 0
        for name, shape in zip(PARAM_NAMES, self.shapes):
            size = int(np.prod(shape))
            parts[name] = vec[pos:pos + size].reshape(shape).copy()
            pos += size
        if pos != vec.size:
            raise ConfigError(f"parameter vector has {vec.size} entries, expected {pos}")
        extra = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in PARAM_NAMES}
        return type(self)(**parts, **extra)

    def copy(self):
        return self.with_vector(self.to_vector())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class NetParams(_Tensors):
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        h, d_in = self.w1.shape
        d_out = self.w3.shape[0]
        expect = [(h, d_in), (h,), (h, h), (h,), (d_out, h), (d_out,)]
        if self.shapes != expect:
            raise ConfigError(f"inconsistent parameter shapes {self.shapes}")

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w3.shape[0]

    @classmethod
    def init(cls, d_in: int, hidden: int, d_out: int, rng: Rng, out_scale: float = 0.01) -> "NetParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, output layer scaled down."""
        def layer(fan_out, fan_in, scale=1.0):
            bound = 1.0 / np.sqrt(fan_in)
            return scale * (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * bound

        return cls(
            w1=layer(hidden, d_in), b1=np.zeros(hidden),
            w2=layer(hidden, hidden), b2=np.zeros(hidden),
            w3=layer(d_out, hidden, out_scale), b3=np.zeros(d_out),
        )

    @classmethod
    def zeros(cls, d_in: int, hidden: int, d_out: int) -> "NetParams":
        return cls(
            w1=np.zeros((hidden, d_in)), b1=np.zeros(hidden),
            w2=np.zeros((hidden, hidden)), b2=np.zeros(hidden),
            w3=np.zeros((d_out, hidden)), b3=np.zeros(d_out),
        )


@dataclass
class ParamGrads(_Tensors):
    @classmethod
    def zeros_like(cls, p: _Tensors) -> "ParamGrads":
        return cls(*(np.zeros_like(a) for a in p.arrays()))

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def scale(self, c: float) -> "ParamGrads":
        return ParamGrads(*(c * a for a in self.arrays()))


class ForwardTrace(NamedTuple):
    x: np.ndarray  # (B, d_in)
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    y: np.ndarray  # (B, d_out)
    single: bool


def forward(p: NetParams, x) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != p.d_in:
        raise ConfigError(f"input has shape {x.shape}, network expects d_in={p.d_in}")
    z1 = xb @ p.w1.T + p.b1
    h1 = np.tanh(z1)
    z2 = h1 @ p.w2.T + p.b2
    h2 = np.tanh(z2)
    y = h2 @ p.w3.T + p.b3
    trace = ForwardTrace(xb, z1, h1, z2, h2, y, single)
    return (y[0] if single else y), trace


def _check_trace(p: NetParams, trace: ForwardTrace):
    if trace.x.shape[1] != p.d_in or trace.h1.shape[1] != p.hidden or trace.y.shape[1] != p.d_out:
        raise ConfigError("forward trace does not match these parameters")


def backward_params(p: NetParams, trace: ForwardTrace, dy) -> ParamGrads:
    """Gradient of ``sum_b dy_b . y_b`` with respect to all parameters."""
    _check_trace(p, trace)
    dy = np.asarray(dy, dtype=np.float64)
    dy = dy.reshape(trace.y.shape)
    dz2 = (dy @ p.w3) * (1.0 - trace.h2**2)
    dz1 = (dz2 @ p.w2) * (1.0 - trace.h1**2)
    return ParamGrads(
        w1=dz1.T @ trace.x, b1=dz1.sum(0),
        w2=dz2.T @ trace.h1, b2=dz2.sum(0),
        w3=dy.T @ trace.h2, b3=dy.sum(0),
    )


def _select(p: NetParams, cols):
    if cols is None:
        return p.w1, slice(None)
    cols = np.asarray(cols, dtype=int)
    return p.w1[:, cols], cols


def _jacobian_factors(p: NetParams, trace: ForwardTrace, cols):
    w1s, sel = _select(p, cols)
    d1 = 1.0 - trace.h1**2  # (B, h)
    d2 = 1.0 - trace.h2**2
    m1 = d1[:, :, None] * w1s[None]  # (B, h, s)
    m2 = np.einsum("ij,bjs->bis", p.w2, m1)
    m3 = d2[:, :, None] * m2
    jac = np.einsum("oi,bis->bos", p.w3, m3)
    return w1s, sel, d1, d2, m1, m2, m3, jac


def input_jacobian(p: NetParams, trace: ForwardTrace, cols=None) -> np.ndarray:
    """``dy/dx`` restricted to input columns ``cols``; (d_out, s) or (B, d_out, s)."""
    _check_trace(p, trace)
    jac = _jacobian_factors(p, trace, cols)[-1]
    return jac[0] if trace.single else jac


def _jacobian_backward(p: NetParams, trace: ForwardTrace, factors, g_jac: np.ndarray) -> ParamGrads:
    """Pull a cotangent on J back to the parameters (sum over batch)."""
    w1s, sel, d1, d2, m1, m2, m3, _ = factors
    h1, h2 = trace.h1, trace.h2
    g_w3 = np.einsum("bos,bis->oi", g_jac, m3)
    g_m3 = np.einsum("oi,bos->bis", p.w3, g_jac)
    g_d2 = np.einsum("bis,bis->bi", g_m3, m2)
    g_m2 = d2[:, :, None] * g_m3
    g_w2 = np.einsum("bis,bjs->ij", g_m2, m1)
    g_m1 = np.einsum("ij,bis->bjs", p.w2, g_m2)
    g_d1 = np.einsum("bjs,js->bj", g_m1, w1s)
    g_w1s = np.einsum("bj,bjs->js", d1, g_m1)

    # d(1 - tanh(z)^2)/dz = -2 tanh(z) (1 - tanh(z)^2)
    g_z2 = g_d2 * (-2.0 * h2 * d2)
    g_w2 += g_z2.T @ h1
    g_h1 = g_z2 @ p.w2
    g_z1 = g_h1 * d1 + g_d1 * (-2.0 * h1 * d1)
    g_w1 = g_z1.T @ trace.x
    g_w1[:, sel] += g_w1s
    return ParamGrads(
        w1=g_w1, b1=g_z1.sum(0),
        w2=g_w2, b2=g_z2.sum(0),
        w3=g_w3, b3=np.zeros(p.d_out),
    )


def jacobian_penalty_grads(p: NetParams, trace: ForwardTrace, cols=None) -> tuple[float, ParamGrads]:
    """Batch mean of ``||J||_F^2`` and its parameter gradient."""
    _check_trace(p, trace)
    factors = _jacobian_factors(p, trace, cols)
    jac = factors[-1]
    batch = jac.shape[0]
    penalty = float(np.sum(jac * jac)) / batch
    grads = _jacobian_backward(p, trace, factors, (2.0 / batch) * jac)
    return penalty, grads


def directional_penalty_grads(p: NetParams, trace: ForwardTrace, d, cols=None) -> tuple[float, ParamGrads]:
    """Batch mean of ``||J^T d||^2`` with ``d`` held constant, and its gradient."""
    _check_trace(p, trace)
    d = np.asarray(d, dtype=np.float64).reshape(-1, p.d_out)
    factors = _jacobian_factors(p, trace, cols)
    jac = factors[-1]
    batch = jac.shape[0]
    if d.shape[0] == 1 and batch > 1:
        d = np.broadcast_to(d, (batch, p.d_out))
    if d.shape[0] != batch:
        raise ConfigError(f"direction batch {d.shape[0]} does not match trace batch {batch}")
    v = np.einsum("bo,bos->bs", d, jac)
    penalty = float(np.sum(v * v)) / batch
    g_jac = (2.0 / batch) * d[:, :, None] * v[:, None, :]
    return penalty, _jacobian_backward(p, trace, factors, g_jac)
