"""Periodic fields on the unit 3-torus and their Fourier-multiplier calculus.

The torus is ``[0, 1)^3`` sampled on an ``n x n x n`` grid, so wavenumbers are
``2*pi*Z^3`` and a frequency ``lambda = 2*pi*m`` is an exact grid frequency.
Arrays carry components on the leading axes and space on the last three:
scalars ``(n, n, n)``, vectors ``(3, n, n, n)``, symmetric tensors
``(6, n, n, n)`` in the order ``xx, yy, zz, xy, yz, xz``.

Odd-order derivative multipliers vanish at the Nyquist index so that real
fields stay real; even-order multipliers (``|xi|^2`` and powers) keep it.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.fft as sfft

SYM_PAIRS: tuple[tuple[int, int], ...] = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))
SYM_INDEX = {}
for _c, (_i, _j) in enumerate(SYM_PAIRS):
    SYM_INDEX[(_i, _j)] = SYM_INDEX[(_j, _i)] = _c

DUMP_MAGIC = b"WEMHD1"

_WORKERS = 1


@contextlib.contextmanager
def fft_workers(n: int) -> Iterator[None]:
    """Thread count for FFTs inside the block.  Results do not depend on it."""
    global _WORKERS
    old, _WORKERS = _WORKERS, max(1, int(n))
    try:
        yield
    finally:
        _WORKERS = old


class GridMismatch(ValueError):
    pass


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class TorusGrid:
    """Uniform space-time grid on ``T^3 x [0, T)``."""

    n_space: int
    n_time: int = 64
    T: float = 1.0
    oversample: int = 1

    def __post_init__(self):
        if self.n_space < 8 or self.n_space % 2:
            raise ValueError("n_space must be even and >= 8")
        if self.n_time < 8:
            raise ValueError("n_time must be >= 8")
        if self.oversample < 1 or int(self.oversample) != self.oversample:
            raise ValueError("oversample must be a positive integer")
        if self.T <= 0:
            raise ValueError("T must be positive")

    # -- geometry -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_space,) * 3

    @property
    def dx(self) -> float:
        return 1.0 / self.n_space

    @property
    def dt(self) -> float:
        return self.T / self.n_time

    def axis(self) -> np.ndarray:
        return np.arange(self.n_space) / self.n_space

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable coordinate arrays of shapes (n,1,1), (1,n,1), (1,1,n)."""
        x = self.axis()
        return x[:, None, None], x[None, :, None], x[None, None, :]

    def times(self) -> np.ndarray:
        return np.arange(self.n_time) * self.dt

    # -- wavenumbers --------------------------------------------------------

    @cached_property
    def _k_int(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n_space
        full = np.fft.fftfreq(n, 1.0 / n)
        half = np.fft.rfftfreq(n, 1.0 / n)
        return full[:, None, None], full[None, :, None], half[None, None, :]

    @cached_property
    def wavevector(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Wavenumbers 2*pi*k used by even-order multipliers."""
        return tuple(2 * np.pi * k for k in self._k_int)

    @cached_property
    def derivative_symbols(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``i*xi`` per axis with the Nyquist index removed."""
        n = self.n_space
        out = []
        for k in self._k_int:
            kk = 2 * np.pi * k.copy()
            kk[np.abs(k) == n // 2] = 0.0
            out.append(1j * kk)
        return tuple(out)

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky, kz = self.wavevector
        return kx**2 + ky**2 + kz**2

    @cached_property
    def inv_k2(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        return out

    @cached_property
    def inv_d2(self) -> np.ndarray:
        """``1/|d|^2`` for the Nyquist-free derivative symbols (0 where ``d = 0``).

        Inverting this symbol instead of ``|xi|^2`` keeps ``div grad Delta^{-1} = 1``
        exact on the grid, so the Leray projector and the inverse divergence are
        exact on every mode a first derivative can see.
        """
        d2 = sum(np.abs(d) ** 2 for d in self.derivative_symbols)
        return np.where(d2 > 0, 1.0 / np.where(d2 > 0, d2, 1.0), 0.0)

    @cached_property
    def _shell(self) -> np.ndarray:
        kx, ky, kz = self._k_int
        return np.maximum(np.maximum(np.abs(kx), np.abs(ky)), np.abs(kz))

    # -- transforms ---------------------------------------------------------

    def fft(self, a: np.ndarray) -> np.ndarray:
        return sfft.rfftn(a, axes=(-3, -2, -1), workers=_WORKERS)

    def ifft(self, ah: np.ndarray) -> np.ndarray:
        return sfft.irfftn(ah, s=self.shape, axes=(-3, -2, -1), workers=_WORKERS)

    # -- array-level operators ---------------------------------------------

    def grad(self, f: np.ndarray) -> np.ndarray:
        fh = self.fft(f)
        return self.ifft(np.stack([d * fh for d in self.derivative_symbols]))

    def grad_hat(self, fh: np.ndarray) -> np.ndarray:
        return np.stack([d * fh for d in self.derivative_symbols])

    def div(self, v: np.ndarray) -> np.ndarray:
        return self.ifft(self.div_hat(self.fft(v)))

    def div_hat(self, vh: np.ndarray) -> np.ndarray:
        d = self.derivative_symbols
        return d[0] * vh[0] + d[1] * vh[1] + d[2] * vh[2]

    def curl_hat(self, vh: np.ndarray) -> np.ndarray:
        d = self.derivative_symbols
        return np.stack([d[1] * vh[2] - d[2] * vh[1],
                         d[2] * vh[0] - d[0] * vh[2],
                         d[0] * vh[1] - d[1] * vh[0]])

    def curl(self, v: np.ndarray) -> np.ndarray:
        return self.ifft(self.curl_hat(self.fft(v)))

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        return self.ifft(-self.k2 * self.fft(f))

    def frac_laplacian(self, f: np.ndarray, alpha: float) -> np.ndarray:
        """``(-Delta)^alpha`` with multiplier ``|xi|^(2 alpha)`` (zero at the mean)."""
        return self.ifft(self.frac_symbol(alpha) * self.fft(f))

    def frac_symbol(self, alpha: float) -> np.ndarray:
        if alpha < 0:
            raise SpectralError("alpha must be >= 0")
        sym = np.power(self.k2, float(alpha))
        sym[0, 0, 0] = 0.0
        return sym

    def inv_laplacian_hat(self, fh: np.ndarray) -> np.ndarray:
        """``Delta^{-1}`` on mean-zero data."""
        return -self.inv_d2 * fh

    def leray_hat(self, vh: np.ndarray) -> np.ndarray:
        """``P_H v = v + grad (-Delta)^{-1} div v`` mode by mode."""
        pot = self.inv_d2 * self.div_hat(vh)
        return vh + self.grad_hat(pot)

    def leray(self, v: np.ndarray) -> np.ndarray:
        return self.ifft(self.leray_hat(self.fft(v)))

    def gradient_potential(self, v: np.ndarray) -> np.ndarray:
        """Scalar ``q`` with ``v - P_H v = grad q`` (``q = Delta^{-1} div v``)."""
        return self.ifft(self.inv_laplacian_hat(self.div_hat(self.fft(v))))

    def remove_mean(self, a: np.ndarray) -> np.ndarray:
        return a - a.mean(axis=(-3, -2, -1), keepdims=True)

    def inverse_divergence_hat(self, vh: np.ndarray) -> np.ndarray:
        """Symmetric trace-free ``R v`` with ``div R v = v`` for mean-zero ``v``.

        ``(Rv)_kl = d_k D^{-1} v_l + d_l D^{-1} v_k - 1/2 (delta_kl + d_k d_l D^{-1}) div D^{-1} v``
        where ``D`` is the Laplacian.
        """
        d = self.derivative_symbols
        u = self.inv_laplacian_hat(vh)                 # Delta^{-1} v
        s = self.div_hat(u)                            # div Delta^{-1} v
        ss = self.inv_laplacian_hat(s)                 # Delta^{-1} div Delta^{-1} v
        out = np.empty((6,) + vh.shape[1:], dtype=vh.dtype)
        for c, (k, l) in enumerate(SYM_PAIRS):
            val = d[k] * u[l] + d[l] * u[k] - 0.5 * d[k] * d[l] * ss
            if k == l:
                val = val - 0.5 * s
            out[c] = val
        return out

    def inverse_divergence(self, v: np.ndarray) -> np.ndarray:
        return self.ifft(self.inverse_divergence_hat(self.fft(v)))

    def tensor_div_hat(self, th: np.ndarray) -> np.ndarray:
        d = self.derivative_symbols
        out = []
        for i in range(3):
            out.append(sum(d[j] * th[SYM_INDEX[(i, j)]] for j in range(3)))
        return np.stack(out)

    def tensor_div(self, t: np.ndarray) -> np.ndarray:
        return self.ifft(self.tensor_div_hat(self.fft(t)))

    # -- products -----------------------------------------------------------

    def dealiased_product(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Product of the trigonometric interpolants, truncated back to this grid.

        Uses ``oversample``-times padding; with ``oversample == 1`` this is the
        pointwise product of samples.
        """
        if self.oversample == 1:
            return a * b
        m = self.oversample * self.n_space
        fine_a = _resample(self, a, m)
        fine_b = _resample(self, b, m)
        return _resample_back(self, fine_a * fine_b, m)

    def spectral_tail(self, a: np.ndarray) -> float:
        """Energy fraction in the top octave of resolved wavenumbers."""
        ah = self.fft(a)
        weight = np.full(ah.shape[-1], 2.0)
        weight[0] = 1.0
        if self.n_space % 2 == 0:
            weight[-1] = 1.0
        energy = (np.abs(ah) ** 2) * weight
        energy = energy.reshape((-1,) + ah.shape[-3:]).sum(axis=0)
        total = energy.sum()
        if total == 0:
            return 0.0
        return float(energy[self._shell >= self.n_space // 4].sum() / total)


def _resample(grid: TorusGrid, a: np.ndarray, m: int) -> np.ndarray:
    n = grid.n_space
    ah = np.fft.fftn(a, axes=(-3, -2, -1))
    big = np.zeros(a.shape[:-3] + (m, m, m), dtype=complex)
    idx = np.r_[0 : n // 2, m - n // 2 : m]
    src = np.r_[0 : n // 2, n - n // 2 : n]
    big[..., idx[:, None, None], idx[None, :, None], idx[None, None, :]] = \
        ah[..., src[:, None, None], src[None, :, None], src[None, None, :]]
    return np.fft.ifftn(big, axes=(-3, -2, -1)).real * (m / n) ** 3


def _resample_back(grid: TorusGrid, a: np.ndarray, m: int) -> np.ndarray:
    n = grid.n_space
    ah = np.fft.fftn(a, axes=(-3, -2, -1))
    idx = np.r_[0 : n // 2, m - n // 2 : m]
    small = ah[..., idx[:, None, None], idx[None, :, None], idx[None, None, :]]
    return np.fft.ifftn(small, axes=(-3, -2, -1)).real * (n / m) ** 3


# ---------------------------------------------------------------------------
# Field wrappers
# ---------------------------------------------------------------------------


class _Field:
    ncomp: int | None = None

    def __init__(self, grid: TorusGrid, data: np.ndarray, **flags):
        data = np.asarray(data, dtype=float)
        expect = grid.shape if self.ncomp is None else (self.ncomp,) + grid.shape
        if data.shape != expect:
            raise GridMismatch(f"{type(self).__name__} expects shape {expect}, got {data.shape}")
        data = np.array(data, copy=True)
        data.flags.writeable = False
        self.grid = grid
        self.data = data
        self.flags = dict(flags)

    @cached_property
    def hat(self) -> np.ndarray:
        return self.grid.fft(self.data)

    @cached_property
    def mean(self):
        return self.data.mean(axis=(-3, -2, -1))

    def _check(self, other: "_Field"):
        if other.grid != self.grid:
            raise GridMismatch("fields live on different grids")

    def __add__(self, other):
        self._check(other)
        return type(self)(self.grid, self.data + other.data)

    def __sub__(self, other):
        self._check(other)
        return type(self)(self.grid, self.data - other.data)

    def __mul__(self, s: float):
        return type(self)(self.grid, self.data * s, **self.flags)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


class ScalarField(_Field):
    ncomp = None


class SpectralVectorField(_Field):
    ncomp = 3

    @property
    def divergence_free(self) -> bool:
        return bool(self.flags.get("divergence_free", False))


class SymTensorField(_Field):
    ncomp = 6

    @property
    def trace_free(self) -> bool:
        return bool(self.flags.get("trace_free", False))

    def trace(self) -> np.ndarray:
        return self.data[0] + self.data[1] + self.data[2]

    def matrix(self) -> np.ndarray:
        """Full ``(3, 3, n, n, n)`` array."""
        return sym_to_matrix(self.data)


VectorField = SpectralVectorField


def sym_to_matrix(t: np.ndarray) -> np.ndarray:
    return np.stack([np.stack([t[SYM_INDEX[(i, j)]] for j in range(3)]) for i in range(3)])


def matrix_to_sym(m: np.ndarray) -> np.ndarray:
    return np.stack([0.5 * (m[i, j] + m[j, i]) for i, j in SYM_PAIRS])


def outer_sym(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Symmetrized outer product ``(u (x) v + v (x) u) / 2`` in packed form."""
    return np.stack([0.5 * (u[i] * v[j] + u[j] * v[i]) for i, j in SYM_PAIRS])


def outer_self(u: np.ndarray) -> np.ndarray:
    return np.stack([u[i] * u[j] for i, j in SYM_PAIRS])


def trace_free_part(t: np.ndarray) -> np.ndarray:
    out = np.array(t, copy=True)
    tr = (t[0] + t[1] + t[2]) / 3.0
    for c in range(3):
        out[c] = out[c] - tr
    return out


def sym_frobenius(t: np.ndarray) -> np.ndarray:
    """Pointwise Frobenius norm of a packed symmetric tensor."""
    return np.sqrt(t[0] ** 2 + t[1] ** 2 + t[2] ** 2 + 2 * (t[3] ** 2 + t[4] ** 2 + t[5] ** 2))


# ---------------------------------------------------------------------------
# Public operators on field objects
# ---------------------------------------------------------------------------


def _grid_of(*fields: _Field) -> TorusGrid:
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatch("fields live on different grids")
    return g


def gradient(f: ScalarField) -> SpectralVectorField:
    g = f.grid
    return SpectralVectorField(g, g.ifft(g.grad_hat(f.hat)))


def divergence(v: SpectralVectorField) -> ScalarField:
    g = v.grid
    return ScalarField(g, g.ifft(g.div_hat(v.hat)))


def curl(v: SpectralVectorField) -> SpectralVectorField:
    g = v.grid
    return SpectralVectorField(g, g.ifft(g.curl_hat(v.hat)), divergence_free=True)


def curl_curl(v: SpectralVectorField) -> SpectralVectorField:
    g = v.grid
    return SpectralVectorField(g, g.ifft(g.curl_hat(g.curl_hat(v.hat))), divergence_free=True)


def laplacian(f: _Field) -> _Field:
    g = f.grid
    return type(f)(g, g.ifft(-g.k2 * f.hat))


def frac_laplacian(f: _Field, alpha: float, sign: int = 1) -> _Field:
    """``sign * (-Delta)^alpha f``; the mean mode is mapped to zero."""
    if alpha < 0:
        raise SpectralError("alpha must be >= 0")
    if sign not in (1, -1):
        raise SpectralError("sign must be +1 or -1")
    g = f.grid
    return type(f)(g, sign * g.ifft(g.frac_symbol(alpha) * f.hat), **f.flags)


def leray_project(v: SpectralVectorField) -> SpectralVectorField:
    g = v.grid
    return SpectralVectorField(g, g.ifft(g.leray_hat(v.hat)), divergence_free=True)


def project_nonzero(f: _Field) -> _Field:
    return type(f)(f.grid, f.grid.remove_mean(f.data), **f.flags)


def inverse_divergence(v: SpectralVectorField, tol: float = 1e-8) -> SymTensorField:
    g = v.grid
    scale = max(float(np.abs(v.data).max()), 1e-300)
    if np.abs(v.mean).max() > tol * scale:
        raise SpectralError("inverse_divergence needs a mean-zero input")
    return SymTensorField(g, g.ifft(g.inverse_divergence_hat(v.hat)), trace_free=True)


def tensor_divergence(t: SymTensorField) -> SpectralVectorField:
    g = t.grid
    return SpectralVectorField(g, g.ifft(g.tensor_div_hat(t.hat)))


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------


def pointwise_magnitude(a: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Euclidean magnitude over component axes (Frobenius for packed tensors)."""
    if a.shape == grid.shape:
        return np.abs(a)
    if a.shape[0] == 6 and a.shape[1:] == grid.shape:
        return sym_frobenius(a)
    comps = a.reshape((-1,) + grid.shape)
    return np.sqrt(np.einsum("c...,c...->...", comps, comps))


def _raw(f) -> tuple[np.ndarray, TorusGrid]:
    return f.data, f.grid


def lp_norm_array(a: np.ndarray, grid: TorusGrid, p: float) -> float:
    if p < 1:
        raise SpectralError("p must be >= 1")
    m = pointwise_magnitude(a, grid)
    if np.isinf(p):
        return float(m.max())
    if p == 1:
        return float(m.mean())
    if p == 2:
        return float(np.sqrt(np.mean(m * m)))
    return float(np.mean(m ** p) ** (1.0 / p))


def lp_norm(f: _Field, p: float) -> float:
    """``L^p`` norm on the unit torus by uniform quadrature (grid max for ``p = inf``)."""
    a, g = _raw(f)
    return lp_norm_array(a, g, p)


def derivative_tensor(a: np.ndarray, grid: TorusGrid, order: int) -> np.ndarray:
    """All partial derivatives of the given order stacked on a leading axis."""
    out = a.reshape((-1,) + grid.shape)
    for _ in range(order):
        h = grid.fft(out)
        out = grid.ifft(np.concatenate([d * h for d in grid.derivative_symbols]))
    return out


def sobolev_norm_array(a: np.ndarray, grid: TorusGrid, k: int, p: float) -> float:
    if k not in (0, 1, 2, 3):
        raise SpectralError("k must be 0..3")
    total = 0.0
    for j in range(k + 1):
        total += lp_norm_array(derivative_tensor(a, grid, j), grid, p)
    return total


def sobolev_norm(f: _Field, k: int, p: float) -> float:
    """``W^{k,p}`` norm as the sum of ``||grad^j f||_{L^p}`` for ``j <= k``."""
    a, g = _raw(f)
    return sobolev_norm_array(a, g, k, p)


def time_norm(values: Sequence[float], dt: float, gamma: float) -> float:
    """``L^gamma`` norm in time of per-slice values (uniform periodic quadrature)."""
    v = np.abs(np.asarray(values, dtype=float))
    if gamma < 1:
        raise SpectralError("gamma must be >= 1")
    if np.isinf(gamma):
        return float(v.max())
    return float((dt * np.sum(v ** gamma)) ** (1.0 / gamma))


# ---------------------------------------------------------------------------
# Space-time fields
# ---------------------------------------------------------------------------


class SpaceTimeField:
    """A field sampled at ``grid.n_time`` uniform times on ``[0, T)``.

    Slices are produced on demand.  Three storage modes are supported:

    * ``SpaceTimeField.separable(grid, terms)``: ``sum_i c_i(t) S_i(x)`` with
      the time coefficients (and their derivatives) given on the time grid;
    * ``SpaceTimeField.from_array(grid, data)``: all slices in memory (or a
      memory map), time derivative by 4th-order periodic differences;
    * ``SpaceTimeField(grid, comp_shape, slice_fn, dt_fn)``: callables.
    """

    def __init__(self, grid: TorusGrid, comp_shape: tuple[int, ...],
                 slice_fn: Callable[[int], np.ndarray],
                 dt_fn: Callable[[int], np.ndarray] | None = None,
                 time_derivative_mode: str | None = None):
        self.grid = grid
        self.comp_shape = tuple(comp_shape)
        self._slice = slice_fn
        self._dt = dt_fn
        self.static = False
        self.terms = None
        self.time_derivative_mode = time_derivative_mode or (
            "analytic" if dt_fn is not None else "finite-difference")
        if self.time_derivative_mode == "analytic" and dt_fn is None:
            raise ValueError("analytic mode requires a closed-form time derivative")

    @property
    def n_time(self) -> int:
        return self.grid.n_time

    def __len__(self) -> int:
        return self.grid.n_time

    def __getitem__(self, j: int) -> np.ndarray:
        return self.slice(j)

    def slice(self, j: int) -> np.ndarray:
        if not 0 <= j < self.grid.n_time:
            raise IndexError(j)
        return self._slice(j)

    def time_derivative(self, j: int) -> np.ndarray:
        if self._dt is not None:
            return self._dt(j)
        n, h = self.grid.n_time, self.grid.dt
        f = lambda i: self._slice(i % n)  # noqa: E731
        return (-f(j + 2) + 8 * f(j + 1) - 8 * f(j - 1) + f(j - 2)) / (12 * h)

    def field(self, j: int) -> _Field:
        cls = {(): ScalarField, (3,): SpectralVectorField, (6,): SymTensorField}[self.comp_shape]
        return cls(self.grid, self.slice(j))

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, grid: TorusGrid, data: np.ndarray) -> "SpaceTimeField":
        data = np.asarray(data, dtype=float)
        zero = np.zeros_like(data)
        out = cls(grid, data.shape[:-3], lambda j: data, lambda j: zero)
        out.static = True
        out.terms = [(np.ones(grid.n_time), np.zeros(grid.n_time), data)]
        return out

    @classmethod
    def zeros(cls, grid: TorusGrid, comp_shape: tuple[int, ...] = ()) -> "SpaceTimeField":
        return cls.constant(grid, np.zeros(tuple(comp_shape) + grid.shape))

    @classmethod
    def from_array(cls, grid: TorusGrid, data: np.ndarray) -> "SpaceTimeField":
        if data.shape[0] != grid.n_time or data.shape[-3:] != grid.shape:
            raise GridMismatch("array does not match the grid")
        return cls(grid, data.shape[1:-3], lambda j: np.asarray(data[j]))

    @classmethod
    def separable(cls, grid: TorusGrid,
                  terms: Sequence[tuple[np.ndarray, np.ndarray | None, np.ndarray]]) -> "SpaceTimeField":
        """``sum_i c_i(t) S_i(x)``; each term is ``(c_i, dc_i/dt or None, S_i)``."""
        terms = [(np.asarray(c, float), None if dc is None else np.asarray(dc, float),
                  np.asarray(s, float)) for c, dc, s in terms]
        if not terms:
            raise ValueError("need at least one term")
        comp_shape = terms[0][2].shape[:-3]
        for c, dc, s in terms:
            if c.shape != (grid.n_time,) or s.shape[:-3] != comp_shape:
                raise GridMismatch("inconsistent separable term")
        analytic = all(dc is not None for _, dc, _ in terms)

        def value(j):
            out = np.zeros(comp_shape + grid.shape)
            for c, _, s in terms:
                if c[j] != 0.0:
                    out += c[j] * s
            return out

        def deriv(j):
            out = np.zeros(comp_shape + grid.shape)
            for _, dc, s in terms:
                if dc[j] != 0.0:
                    out += dc[j] * s
            return out

        field = cls(grid, comp_shape, value, deriv if analytic else None)
        field.terms = terms
        field.static = all(np.all(c == c[0]) for c, _, _ in terms)
        return field

    def materialize(self) -> "SpaceTimeField":
        data = np.stack([self.slice(j) for j in range(self.n_time)])
        out = SpaceTimeField.from_array(self.grid, data)
        if self._dt is not None:
            dd = np.stack([self.time_derivative(j) for j in range(self.n_time)])
            out._dt = lambda j: dd[j]
            out.time_derivative_mode = "analytic"
        return out

    def support(self, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of time slices where the field is not identically zero."""
        return np.array([np.abs(self.slice(j)).max() > tol for j in range(self.n_time)])


def space_time_norm(F: SpaceTimeField, gamma: float, spatial: Callable[[np.ndarray], float] | tuple
                    = ("lp", 2)) -> float:
    """``L^gamma_t`` of a spatial norm.

    ``spatial`` is a callable on slice arrays, ``("lp", p)`` or ``("sobolev", k, p)``.
    """
    g = F.grid
    if callable(spatial):
        fn = spatial
    elif spatial[0] == "lp":
        fn = lambda a: lp_norm_array(a, g, spatial[1])  # noqa: E731
    elif spatial[0] == "sobolev":
        fn = lambda a: sobolev_norm_array(a, g, spatial[1], spatial[2])  # noqa: E731
    else:
        raise SpectralError(f"unknown spatial norm {spatial!r}")
    values = [fn(F.slice(j)) for j in range(F.n_time)]
    return time_norm(values, g.dt, gamma)


# ---------------------------------------------------------------------------
# Binary dumps
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<6sIII")


def write_dump(path: str | Path, F: SpaceTimeField | np.ndarray, grid: TorusGrid | None = None) -> None:
    """Write slices as little-endian float64, x fastest, slice by slice."""
    if isinstance(F, SpaceTimeField):
        grid = F.grid
        ncomp = int(np.prod(F.comp_shape)) if F.comp_shape else 1
        slices = (F.slice(j) for j in range(F.n_time))
        n_time = F.n_time
    else:
        data = np.asarray(F)
        n_time = data.shape[0]
        ncomp = int(np.prod(data.shape[1:-3])) if data.ndim > 4 else 1
        slices = iter(data)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, grid.n_space, n_time, ncomp))
        for s in slices:
            comps = np.asarray(s, dtype="<f8").reshape((ncomp,) + grid.shape)
            for c in comps:
                fh.write(np.asfortranarray(c).tobytes(order="F"))


def create_dump(path: str | Path, grid: TorusGrid, ncomp: int) -> np.ndarray:
    """Allocate a zero-filled dump and return a writable ``[t, c, x, y, z]`` view."""
    n = grid.n_space
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, n, grid.n_time, ncomp))
        fh.truncate(_HEADER.size + 8 * grid.n_time * ncomp * n**3)
    raw = np.memmap(path, dtype="<f8", mode="r+", offset=_HEADER.size,
                    shape=(grid.n_time, ncomp, n, n, n), order="C")
    return np.swapaxes(raw, 2, 4)


def read_dump(path: str | Path) -> tuple[int, int, int, np.ndarray]:
    """Memory-map a dump; returns ``(n_space, n_time, ncomp, array[t, c, x, y, z])``."""
    with open(path, "rb") as fh:
        magic, n_space, n_time, ncomp = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != DUMP_MAGIC:
        raise ValueError(f"{path}: not a field dump")
    raw = np.memmap(path, dtype="<f8", mode="r", offset=_HEADER.size,
                    shape=(n_time, ncomp, n_space, n_space, n_space), order="C")
    # bytes are x-fastest per component; reinterpret the trailing axes
    arr = raw.reshape(n_time, ncomp, n_space, n_space, n_space)
    return n_space, n_time, ncomp, np.swapaxes(arr, 2, 4)
