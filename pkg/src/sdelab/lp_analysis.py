"""Littlewood-Paley blocks of periodic fields and dyadic Hoelder norms.

Fields are sampled on ``x_i = i * L / N``.  Frequencies are angular
wavenumbers ``xi = 2 pi k / L``, so a mode ``exp(i xi x)`` with ``|xi| ~ 2^j``
lands in block ``j``.  Block ``-1`` carries ``chi(2 xi)``; block ``j >= 0``
carries ``chi(2^-j xi) - chi(2^(1-j) xi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_PERIOD = 16 * math.pi
_DIRECT_PAIR_BUDGET = 1_000_000


class LPError(ValueError):
    pass


def _bump(s):
    """exp(1 - 1/(1 - s^2)) on |s| < 1, zero outside."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


def _step(s):
    """Smooth monotone step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    rise = _bump(1.0 - s)
    fall = _bump(s)
    return rise / (rise + fall)


def chi(xi):
    """Radial cutoff: 1 on |xi| <= 1, 0 on |xi| >= 3/2."""
    r = np.abs(np.asarray(xi, dtype=float))
    return 1.0 - _step((r - 1.0) / 0.5)


def chi_tilde(xi):
    """Second cutoff, 1 on [1/2, 3/2] and supported in [1/4, 7/4].

    Kept for completeness of the cutoff family; nothing here consumes it.
    """
    r = np.abs(np.asarray(xi, dtype=float))
    up = _step((r - 0.25) / 0.25)
    down = 1.0 - _step((r - 1.5) / 0.25)
    return up * down


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class DyadicCutoffs:
    N: int
    L: float
    xi: np.ndarray  # (N,) angular wavenumbers in fft order
    chi: np.ndarray  # chi(xi)
    phi: np.ndarray  # (J, N); row r is block j = r - 1
    phi_tilde: np.ndarray

    @property
    def j_max(self) -> int:
        return self.phi.shape[0] - 2

    @property
    def js(self) -> np.ndarray:
        return np.arange(-1, self.j_max + 1)

    @property
    def dx(self) -> float:
        return self.L / self.N

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(self.N)


def wavenumbers(N: int, L: float) -> np.ndarray:
    return 2 * np.pi * np.fft.fftfreq(N, d=L / N)


def build_cutoffs(N: int, L: float = DEFAULT_PERIOD) -> DyadicCutoffs:
    if not _is_pow2(int(N)) or N < 16:
        raise LPError(f"N must be a power of two >= 16, got {N}")
    if L < 4 * math.pi:
        # the top block must cover the whole lattice for exact reconstruction
        raise LPError("period must be at least 4*pi")
    N = int(N)
    j_max = int(math.log2(N)) - 2
    xi = wavenumbers(N, L)
    rows = [chi(2.0 * xi)]
    for j in range(0, j_max + 1):
        rows.append(chi(2.0**-j * xi) - chi(2.0 ** (1 - j) * xi))
    return DyadicCutoffs(N, float(L), xi, chi(xi), np.array(rows), chi_tilde(xi))


@dataclass
class DyadicDecomposition:
    cutoffs: DyadicCutoffs
    source: np.ndarray  # (..., N)
    blocks: np.ndarray  # (..., J, N)

    @property
    def block_sup(self) -> np.ndarray:
        """max_x |Delta_j f|, shape (..., J)."""
        return np.max(np.abs(self.blocks), axis=-1)

    def reconstruct(self) -> np.ndarray:
        return self.blocks.sum(axis=-2)

    def weighted_norms(self, s: float) -> np.ndarray:
        js = self.cutoffs.js
        return 2.0 ** (s * np.maximum(js, 0)) * self.block_sup


def decompose(f, cutoffs: DyadicCutoffs) -> DyadicDecomposition:
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != cutoffs.N:
        raise LPError(f"field has {f.shape[-1]} samples, cutoffs expect {cutoffs.N}")
    fh = np.fft.fft(f, axis=-1)
    blocks = np.fft.ifft(fh[..., None, :] * cutoffs.phi, axis=-1).real
    return DyadicDecomposition(cutoffs, f, blocks)


def besov_sup_norm(dec: DyadicDecomposition, s: float):
    """sup_j 2^(s max(j,0)) ||Delta_j f||_0 for any real ``s``."""
    out = dec.weighted_norms(s).max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def holder_norm_dyadic(dec: DyadicDecomposition, alpha: float):
    if not 0.0 < alpha < 1.0:
        raise LPError("alpha must lie in (0, 1)")
    return besov_sup_norm(dec, alpha)


def _offsets(N: int, budget: int = _DIRECT_PAIR_BUDGET) -> np.ndarray:
    half = N // 2
    if N * half <= budget:
        return np.arange(1, half + 1)
    per = max(budget // N, 2)
    dense = np.arange(1, per // 2 + 1)
    stride = np.unique(np.linspace(per // 2 + 1, half, per - per // 2).astype(int))
    return np.union1d(dense, stride)


def holder_seminorm_direct(f, alpha: float, L: float = DEFAULT_PERIOD):
    """max over periodic grid pairs of |f(x) - f(y)| / d(x, y)^alpha."""
    f = np.asarray(f, dtype=float)
    N = f.shape[-1]
    dx = L / N
    best = np.zeros(f.shape[:-1])
    for k in _offsets(N):
        diff = np.max(np.abs(f - np.roll(f, -int(k), axis=-1)), axis=-1)
        best = np.maximum(best, diff / (k * dx) ** alpha)
    return float(best) if best.ndim == 0 else best


def holder_norm_direct(f, alpha: float, L: float = DEFAULT_PERIOD):
    """sup|f| plus the direct alpha-seminorm over periodic grid pairs."""
    f = np.asarray(f, dtype=float)
    sup = np.max(np.abs(f), axis=-1)
    out = sup + holder_seminorm_direct(f, alpha, L)
    return float(out) if np.ndim(out) == 0 else out


def spectral_derivative(f, L: float, k: int = 1) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    xi = wavenumbers(f.shape[-1], L)
    mult = (1j * xi) ** k
    if f.shape[-1] % 2 == 0 and k % 2 == 1:
        mult[f.shape[-1] // 2] = 0.0
    return np.fft.ifft(np.fft.fft(f, axis=-1) * mult, axis=-1).real


def bernstein_check(dec: DyadicDecomposition, k: int) -> dict[int, float]:
    """Ratios ||d^k Delta_j f|| / (2^(kj) ||Delta_j f||), vanishing blocks skipped.

    For a stacked decomposition the ratio is the max over the stack.
    """
    if k not in (1, 2):
        raise LPError("k must be 1 or 2")
    cut = dec.cutoffs
    deriv = spectral_derivative(dec.blocks, cut.L, k)
    num = np.max(np.abs(deriv), axis=-1)
    den = dec.block_sup
    out = {}
    for r, j in enumerate(cut.js):
        d = den[..., r]
        ok = d >= 1e-12
        if not np.any(ok):
            continue
        ratio = np.where(ok, num[..., r] / np.where(ok, d, 1.0) / 2.0 ** (k * j), 0.0)
        out[int(j)] = float(np.max(ratio))
    return out


def holder_corpus(x: np.ndarray, count: int = 10, seed: int = 0, L: float = DEFAULT_PERIOD) -> np.ndarray:
    """Reference corpus of periodic fields with Hoelder regularity >= 0.8.

    Each field is defined pointwise, so sampling on a finer grid gives the
    same underlying function.
    """
    rng = np.random.default_rng(seed)
    base = 2 * np.pi / L
    out = []
    for i in range(count):
        kind = i % 4
        if kind == 0:
            r = rng.uniform(0.8, 1.0)
            m = int(rng.integers(1, 4))
            c = rng.uniform(0, np.pi)
            f = np.abs(np.sin(0.5 * m * base * x + c)) ** r
        elif kind == 1:
            r = 0.8 + 0.2 * rng.random()
            f = np.zeros_like(x)
            for j in range(0, 6):
                f += 2.0 ** (-j * r) * np.cos(2.0**j * x + rng.uniform(0, 2 * np.pi))
        elif kind == 2:
            modes = rng.integers(1, 24, size=4)
            amps = rng.normal(size=4)
            f = sum(a * np.sin(m * base * x + rng.uniform(0, 2 * np.pi)) for a, m in zip(amps, modes))
        else:
            r = rng.uniform(0.8, 1.0)
            c = rng.uniform(0, L)
            d = np.abs(((x - c + L / 2) % L) - L / 2)
            f = np.minimum(d, 2.0) ** r
        out.append(np.asarray(f, dtype=float))
    return np.array(out)


def field_report(f, alpha: float, L: float = DEFAULT_PERIOD) -> dict:
    f = np.asarray(f, dtype=float)
    cut = build_cutoffs(f.shape[-1], L)
    dec = decompose(f, cut)
    return {
        "N": cut.N,
        "L": cut.L,
        "alpha": alpha,
        "blocks": [
            {"j": int(j), "sup": float(s), "weighted": float(w)}
            for j, s, w in zip(cut.js, dec.block_sup, dec.weighted_norms(alpha))
        ],
        "dyadic_norm": holder_norm_dyadic(dec, alpha),
        "direct_norm": holder_norm_direct(f, alpha, L),
        "bernstein": {str(k): {str(j): r for j, r in bernstein_check(dec, k).items()} for k in (1, 2)},
    }
