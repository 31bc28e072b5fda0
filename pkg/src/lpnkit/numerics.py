"""Dense linear algebra helpers, spectra, gradient oracles and seeded RNG.

Matrices and vectors are plain float64 ``numpy`` arrays. The SVD is a
one-sided (Hestenes) Jacobi iteration run in parallel round-robin order, which
is accurate and fast enough for the <= 64x64 gain matrices used here.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, NumericalError

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


class SvdResult(NamedTuple):
    u: np.ndarray  # (m, r), orthonormal columns
    sigma: np.ndarray  # (r,), descending, >= 0
    vt: np.ndarray  # (r, n), orthonormal rows


class Spectrum(NamedTuple):
    freqs: np.ndarray
    energy: np.ndarray


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ConfigError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError("matrix contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings such that each round rotates disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        left, right = [], []
        for k in range(size // 2):
            p, q = players[k], players[size - 1 - k]
            if p >= 0 and q >= 0:
                left.append(min(p, q))
                right.append(max(p, q))
        rounds.append((np.array(left, dtype=int), np.array(right, dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` by an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, i] for i in np.flatnonzero(good)]
    out = u.copy()
    candidates = iter(np.eye(m))
    for i in np.flatnonzero(~good):
        while True:
            v = next(candidates).copy()
            for b in basis:
                v -= (b @ v) * b
            for b in basis:  # second pass for stability
                v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        basis.append(v)
        out[:, i] = v
    return out


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(SVD_MAX_SWEEPS):
        off = 0.0
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            if rel.size:
                off = max(off, float(rel.max()))
            act = rel > SVD_TOL
            if not np.any(act):
                continue
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= SVD_TOL:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge for a {m}x{n} matrix")

    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    good = sigma > max(m, n) * np.finfo(float).eps * (sigma[0] if sigma[0] > 0 else 1.0)
    good &= sigma > 0
    u = np.zeros_like(w)
    u[:, good] = w[:, good] / sigma[good]
    if not np.all(good):
        u = _complete_basis(u, good)
        sigma = np.where(good, sigma, 0.0)
    return SvdResult(u, sigma, v.T.copy())


def svd(a) -> SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with ``r = min(m, n)``."""
    a = _as_matrix(a)
    if a.shape[0] >= a.shape[1]:
        return _jacobi_tall(a)
    res = _jacobi_tall(a.T)
    return SvdResult(res.vt.T.copy(), res.sigma, res.u.T.copy())


def truncate_rank(s: SvdResult, k: int) -> np.ndarray:
    """Best rank-``k`` approximation from an SVD: sum of the top ``k`` triplets."""
    r = len(s.sigma)
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= r:
        raise ConfigError(f"rank k must be in [1, {r}], got {k!r}")
    return (s.u[:, :k] * s.sigma[:k]) @ s.vt[:k]


def rdft_energy(x, rate_hz: float) -> Spectrum:
    """One-sided energy spectrum of a real signal, normalised so that
    ``energy.sum() == (x**2).sum()``.

    Bin ``i`` sits at ``i * rate_hz / len(x)``; conjugate-pair energies are
    folded into the positive bin. Exact-length transform, no padding.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 4:
        raise ConfigError(f"signal needs at least 4 samples, got {x.size}")
    if not rate_hz > 0:
        raise ConfigError(f"sample rate must be positive, got {rate_hz}")
    n = x.size
    spec = np.fft.rfft(x)
    energy = (spec.real**2 + spec.imag**2) / n
    energy[1:] *= 2.0
    if n % 2 == 0:
        energy[-1] /= 2.0  # Nyquist bin has no conjugate partner
    freqs = np.arange(energy.size) * rate_hz / n
    return Spectrum(freqs, energy)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(flat.reshape(shape)))
        flat[i] = old - h
        fm = float(f(flat.reshape(shape)))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(shape)


class Rng:
    """Counter-based (Philox) random stream with Box-Muller normals.

    ``spawn(k)`` derives an independent stream from ``(seed, k)`` so worker
    streams don't depend on scheduling order.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence([self.seed, *self.path])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, stream: int) -> "Rng":
        return Rng(self.seed, *self.path, stream)

    def uniform(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def integers(self, high: int) -> int:
        return int(self._gen.integers(0, high))

    def normal(self, size) -> np.ndarray:
        count = int(np.prod(size))
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:count].reshape(size)
