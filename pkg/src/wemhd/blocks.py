"""Spatial building blocks (Mikado tubes and intermittent jets) and temporal blocks.

Profiles are polynomial bumps with exact rational normalization:

* ``Phi(y) = c_Phi (1 - |y|^2)^m`` on the unit disk, ``phi = -Laplace Phi``
  with ``(1/4 pi^2) int phi^2 = 1``;
* ``psi(z) = c_psi d/dz (1 - z^2)^m`` with ``(1/2 pi) int psi^2 = 1``;
* ``g(t) = c_g (1 - u^2)^m``, ``u = (t - T/2) / (T/4)``, with mean of ``g^2``
  over ``[0, T]`` equal to one.

A block for direction ``k`` lives in the coordinates
``y_i = lam r N k_i . (x - p)`` (transverse, 2 pi periodic) and
``z = lam r N (k . x + mu t)`` (along ``k``, jets only).  Because ``{k, k1, k2}``
is orthonormal, ``grad_x = lam r N (k1 d_y1 + k2 d_y2 + k d_z)`` and the map
``x -> (y, z)`` pushes Lebesgue measure on the unit torus to the normalized
measure on ``[0, 2 pi)^d``; both facts are used by the verification helpers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

import numpy as np
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P

from .geometry import Direction, DirectionSet
from .spectral import SpaceTimeField, TorusGrid, outer_self

TWO_PI = 2 * math.pi


class BlockError(ValueError):
    pass


class ResolutionError(BlockError):
    pass


class ShiftSelectionError(BlockError):
    pass


# ---------------------------------------------------------------------------
# exact polynomial helpers
# ---------------------------------------------------------------------------


def _int_poly_mul(a: list[int], b: list[int]) -> list[int]:
    out = [0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if x:
            for j, y in enumerate(b):
                out[i + j] += x * y
    return out


def _int_poly_der(a: list[int]) -> list[int]:
    return [i * a[i] for i in range(1, len(a))] or [0]


def _integrate(a: list[int], lo: int, hi: int) -> Fraction:
    return sum((Fraction(c, i + 1) * (Fraction(hi) ** (i + 1) - Fraction(lo) ** (i + 1))
                for i, c in enumerate(a)), Fraction(0))


def _one_minus_square_power(m: int) -> list[int]:
    """Integer coefficients of ``(1 - z^2)^m`` in increasing powers of ``z``."""
    out = [0] * (2 * m + 1)
    for j in range(m + 1):
        out[2 * j] = (-1) ** j * comb(m, j)
    return out


def _power_to_chebyshev(a: list[int]) -> np.ndarray:
    """Exact power-to-Chebyshev conversion, rounded once at the end."""
    out = [Fraction(0)] * len(a)
    for n, c in enumerate(a):
        if not c:
            continue
        # z^n = 2^{1-n} sum_{j < n/2} C(n, j) T_{n-2j} + [n even] 2^{-n} C(n, n/2) T_0
        for j in range(n // 2 + 1):
            weight = Fraction(comb(n, j), 2 ** (n - 1)) if 2 * j != n else Fraction(comb(n, j), 2**n)
            out[n - 2 * j] += c * weight
    return np.array([float(x) for x in out])


def _radial_power_2d(m: int) -> np.ndarray:
    """Coefficient matrix ``C[a, b]`` of ``(1 - y1^2 - y2^2)^m``."""
    C = np.zeros((2 * m + 1, 2 * m + 1))
    for j in range(m + 1):
        for i in range(j + 1):
            C[2 * i, 2 * (j - i)] += (-1) ** j * comb(m, j) * comb(j, i)
    return C


def _laplacian_2d(C: np.ndarray) -> np.ndarray:
    out = np.zeros_like(C)
    d1 = P.polyder(C, 2, axis=0)
    d2 = P.polyder(C, 2, axis=1)
    out[: d1.shape[0], : d1.shape[1]] += d1
    out[: d2.shape[0], : d2.shape[1]] += d2
    return out


# ---------------------------------------------------------------------------
# profile library
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileLibrary:
    m_space: int = 12
    m_jet: int = 12
    m_time: int = 12
    T: float = 1.0
    constants: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        m = self.m_space
        if min(self.m_space, self.m_jet, self.m_time) < 4:
            raise BlockError("profile exponents below 4 are not smooth enough")
        # int_disk phi^2 = pi int_0^1 phi(u)^2 du with u = 1 - |y|^2 and
        # phi = c 4m u^{m-2} (m u - (m - 1))
        I = (Fraction(m * m, 2 * m - 1) - Fraction(2 * m * (m - 1), 2 * m - 2)
             + Fraction((m - 1) ** 2, 2 * m - 3))
        c_phi = math.sqrt(math.pi / (4 * m * m * float(I)))
        bump = _one_minus_square_power(self.m_jet)
        dbump = _int_poly_der(bump)
        c_psi = math.sqrt(TWO_PI / float(_integrate(_int_poly_mul(dbump, dbump), -1, 1)))
        gpow = _one_minus_square_power(self.m_time)
        J = _integrate(_int_poly_mul(gpow, gpow), -1, 1)
        c_g = math.sqrt(4 / float(J))
        consts = {
            "phi_quadrature": I, "c_Phi": c_phi, "c_psi": c_psi, "c_g": c_g, "g_square_integral": J,
            "Phi_coef": c_phi * _radial_power_2d(m),
            "psi_poly": c_psi * np.array(dbump, dtype=float),
            "g_poly": c_g * np.array(gpow, dtype=float),
            # antiderivative of (1 - u^2)^{2m} in the Chebyshev basis (the power
            # basis loses ~1e-8 to cancellation); G(t) = (T/4) c_g^2 [Q(u) - Q(-1)]
            "g2_anti": C.chebint(_power_to_chebyshev(_int_poly_mul(gpow, gpow))),
        }
        consts["phi_coef"] = -_laplacian_2d(consts["Phi_coef"])
        object.__setattr__(self, "constants", consts)

    # -- 2D transverse profiles -------------------------------------------------

    def _radial(self, s1, s2):
        s1, s2 = np.broadcast_arrays(np.asarray(s1, float), np.asarray(s2, float))
        u = 1.0 - s1 * s1 - s2 * s2
        return s1, s2, u, u > 0

    def Phi(self, s1, s2) -> np.ndarray:
        s1, s2, u, inside = self._radial(s1, s2)
        m = self.m_space
        return np.where(inside, self.constants["c_Phi"] * np.where(inside, u, 0) ** m, 0.0)

    def grad_Phi(self, s1, s2) -> np.ndarray:
        s1, s2, u, inside = self._radial(s1, s2)
        m, c = self.m_space, self.constants["c_Phi"]
        f = np.where(inside, -2 * m * c * np.where(inside, u, 0) ** (m - 1), 0.0)
        return np.stack([f * s1, f * s2])

    def phi(self, s1, s2) -> np.ndarray:
        s1, s2, u, inside = self._radial(s1, s2)
        m, c = self.m_space, self.constants["c_Phi"]
        uu = np.where(inside, u, 0)
        return np.where(inside, 4 * m * c * uu ** (m - 2) * (m * uu - (m - 1)), 0.0)

    def derivative_2d(self, which: str, n1: int, n2: int, s1, s2) -> np.ndarray:
        """``d^{n1}_{s1} d^{n2}_{s2}`` of ``Phi`` or ``phi`` (any order)."""
        coef = self.constants["Phi_coef" if which == "Phi" else "phi_coef"]
        if n1:
            coef = P.polyder(coef, n1, axis=0)
        if n2:
            coef = P.polyder(coef, n2, axis=1)
        s1, s2, _, inside = self._radial(s1, s2)
        out = np.zeros(s1.shape)
        out[inside] = P.polyval2d(s1[inside], s2[inside], coef)
        return out

    def _radial_poly(self, which: str) -> np.ndarray:
        """``Phi`` or ``phi`` as a polynomial in ``u = 1 - |s|^2``."""
        m, c = self.m_space, self.constants["c_Phi"]
        F = np.zeros(m + 1)
        if which == "Phi":
            F[m] = c
        else:
            F[m - 1] = 4 * m * m * c
            F[m - 2] = -4 * m * (m - 1) * c
        return F

    def derivative_tensor_2d(self, which: str, order: int, s1, s2) -> np.ndarray:
        """Frobenius magnitude of the ``order``-th derivative tensor.

        Orders up to two use the radial chain rule in ``u``; higher orders go
        through the bivariate polynomial.
        """
        if order <= 2:
            s1, s2, u, inside = self._radial(s1, s2)
            F = self._radial_poly(which)
            uu = np.where(inside, u, 0.0)
            q = s1 * s1 + s2 * s2
            if order == 0:
                val = np.abs(P.polyval(uu, F))
            elif order == 1:
                val = 2 * np.abs(P.polyval(uu, P.polyder(F))) * np.sqrt(q)
            else:
                d1, d2 = P.polyval(uu, P.polyder(F)), P.polyval(uu, P.polyder(F, 2))
                # Hessian = 4 F'' s s^T - 2 F' Id
                val = np.sqrt(np.maximum(16 * d2**2 * q**2 - 16 * d1 * d2 * q + 8 * d1**2, 0.0))
            return np.where(inside, val, 0.0)
        total = 0.0
        for n1 in range(order + 1):
            mult = comb(order, n1)
            total = total + mult * self.derivative_2d(which, n1, order - n1, s1, s2) ** 2
        return np.sqrt(total)

    # -- 1D jet profile -------------------------------------------------------------

    def psi(self, z, order: int = 0) -> np.ndarray:
        z = np.asarray(z, float)
        coef = self.constants["psi_poly"]
        if order:
            coef = P.polyder(coef, order)
        inside = np.abs(z) < 1
        out = np.zeros(z.shape)
        out[inside] = P.polyval(z[inside], coef)
        return out

    # -- temporal profile ---------------------------------------------------------------

    def g(self, t, order: int = 0) -> np.ndarray:
        """The bump ``g`` on ``[0, T]`` (not periodized) and its derivatives."""
        t = np.asarray(t, float)
        T = self.T
        u = (t - T / 2) / (T / 4)
        coef = self.constants["g_poly"]
        if order:
            coef = P.polyder(coef, order)
        inside = np.abs(u) < 1
        out = np.zeros(t.shape)
        out[inside] = P.polyval(u[inside], coef) * (4 / T) ** order
        return out

    def g_square_integral(self, t) -> np.ndarray:
        """``int_0^t g^2`` in closed form (equals ``T`` past the support)."""
        t = np.asarray(t, float)
        T = self.T
        u = np.clip((t - T / 2) / (T / 4), -1.0, 1.0)
        Q = self.constants["g2_anti"]
        scale = (T / 4) * self.constants["c_g"] ** 2
        return scale * (C.chebval(u, Q) - C.chebval(-1.0, Q))

    def g_square_integral_rate(self, t) -> np.ndarray:
        """Derivative of :meth:`g_square_integral` from the antiderivative polynomial."""
        t = np.asarray(t, float)
        T = self.T
        u = (t - T / 2) / (T / 4)
        dQ = C.chebder(self.constants["g2_anti"])
        inside = np.abs(u) < 1
        out = np.zeros(t.shape)
        out[inside] = self.constants["c_g"] ** 2 * C.chebval(u[inside], dQ)
        return out

    # -- bookkeeping ------------------------------------------------------------------

    def describe(self) -> dict:
        c = self.constants
        return {"m_space": self.m_space, "m_jet": self.m_jet, "m_time": self.m_time, "T": self.T,
                "c_Phi": c["c_Phi"], "c_psi": c["c_psi"], "c_g": c["c_g"]}

    def normalization_report(self, samples: int = 4001) -> dict:
        """Quadrature values of the three normalizations (Gauss-Legendre, exact for polynomials)."""
        x, w = np.polynomial.legendre.leggauss(samples // 2 + 40)
        # phi: radial, int = 2 pi int_0^1 phi(rho)^2 rho drho
        rho = 0.5 * (x + 1)
        phi_int = TWO_PI * 0.5 * np.sum(w * self.phi(rho, 0 * rho) ** 2 * rho)
        psi_sq = np.sum(w * self.psi(x) ** 2)
        psi_mean = np.sum(w * self.psi(x))
        t = self.T / 2 + self.T / 4 * x
        g_sq = self.T / 4 * np.sum(w * self.g(t) ** 2) / self.T
        return {"phi_sq": phi_int / (4 * math.pi**2), "psi_sq": psi_sq / TWO_PI,
                "psi_mean": psi_mean, "g_sq": g_sq}


DEFAULT_PROFILES = ProfileLibrary()


# ---------------------------------------------------------------------------
# temporal blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemporalBlocks:
    tau: float
    sigma: int
    profiles: ProfileLibrary = DEFAULT_PROFILES

    @property
    def T(self) -> float:
        return self.profiles.T

    def _phase(self, t):
        """``sigma t`` reduced to one period ``[0, T)``."""
        return np.mod(self.sigma * np.asarray(t, float), self.T)

    def g_tau(self, t, order: int = 0) -> np.ndarray:
        s = np.mod(np.asarray(t, float), self.T)
        return self.tau ** (0.5 + order) * self.profiles.g(self.tau * s, order)

    def g(self, t, order: int = 0) -> np.ndarray:
        """``d^order/dt^order g_(tau)(t)``."""
        return self.sigma**order * self.g_tau(self._phase(t), order)

    def h(self, t) -> np.ndarray:
        s = self._phase(t)
        return self.profiles.g_square_integral(self.tau * s) - s

    def h_rate(self, t) -> np.ndarray:
        """``d/dt h_(tau)`` via the antiderivative polynomial (independent of ``g``)."""
        s = self._phase(t)
        return self.sigma * (self.tau * self.profiles.g_square_integral_rate(self.tau * s) - 1.0)

    def cancel_residual(self, t) -> float:
        """``max |d_t(h/sigma) - (g^2 - 1)|``."""
        return float(np.abs(self.h_rate(t) / self.sigma - (self.g(t) ** 2 - 1)).max())

    def first_support_time(self) -> float:
        return self.T / (4 * self.tau * self.sigma)


def temporal_blocks(tau: float, sigma: int, n_time: int | None = None,
                    profiles: ProfileLibrary = DEFAULT_PROFILES) -> TemporalBlocks:
    """Temporal blocks; with ``n_time`` the oscillation must span at least 8 samples."""
    if tau < 1 or sigma < 1:
        raise BlockError("tau and sigma must be >= 1")
    if int(sigma) != sigma:
        raise BlockError("sigma must be an integer for periodicity on [0, T]")
    if n_time is not None and sigma * tau > n_time / 16:
        raise ResolutionError(
            f"sigma*tau = {sigma * tau:g} leaves fewer than 8 samples per bump at n_time={n_time}")
    return TemporalBlocks(float(tau), int(sigma), profiles)


# ---------------------------------------------------------------------------
# spatial blocks
# ---------------------------------------------------------------------------


def _lattice_index(lam: float, r: float) -> tuple[int, int]:
    n = lam / TWO_PI
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise BlockError("lambda must be 2 pi times a positive integer")
    n = int(round(n))
    K = n * r
    if abs(K - round(K)) > 1e-9 or round(K) < 1:
        raise BlockError(f"lambda r / 2 pi = {K:g} must be a positive integer (periodic tubes)")
    return n, int(round(K))


def _wrap_turns(turns: np.ndarray) -> np.ndarray:
    """Map ``turns`` to ``2 pi * [-1/2, 1/2)``."""
    return TWO_PI * (turns - np.floor(turns + 0.5))


def _int_vec(v, n_lambda: int) -> list[int]:
    out = [n_lambda * Fraction(c) for c in v]
    if any(c.denominator != 1 for c in out):
        raise BlockError("N_Lambda k is not integral")
    return [int(c) for c in out]


def transverse_coordinates(grid: TorusGrid, direction: Direction, K: int, n_lambda: int,
                           shift=None) -> tuple[np.ndarray, np.ndarray]:
    """``y_i = 2 pi K (N k_i) . (x - p)`` wrapped to ``[-pi, pi)``."""
    x = grid.coords()
    p = direction.shift if shift is None else shift
    out = []
    for v in (direction.k1, direction.k2):
        ints = _int_vec(v, n_lambda)
        turns = K * sum(c * (xi - pi) for c, xi, pi in zip(ints, x, p))
        out.append(_wrap_turns(np.broadcast_to(turns, grid.shape)))
    return out[0], out[1]


def support_mask(grid: TorusGrid, direction: Direction, K: int, r: float, n_lambda: int,
                 shift=None) -> np.ndarray:
    y1, y2 = transverse_coordinates(grid, direction, K, n_lambda, shift)
    return y1 * y1 + y2 * y2 < r * r


@dataclass
class BlockBundle:
    """Building blocks of one direction sampled on the assembly grid.

    Case I blocks are time independent.  Case II blocks translate along ``k``
    with speed ``mu``; every time-dependent quantity has a closed-form time
    derivative.  ``normalization`` is the factor applied to the sampled
    transverse profile so that its discrete mean square is one.
    """

    case: str
    direction: Direction
    grid: TorusGrid
    lam: float
    r: float
    n_lambda: int
    K: int
    phi: np.ndarray
    Phi: np.ndarray
    grad_Phi_y: np.ndarray          # (2, n, n, n): d_{y_i} Phi_r
    normalization: float
    profiles: ProfileLibrary
    ell: float | None = None
    mu: float | None = None
    resolution_cells: dict = field(default_factory=dict)

    @property
    def k(self) -> np.ndarray:
        return self.direction.array("k")

    @property
    def params(self) -> dict:
        return {"lambda": self.lam, "r": self.r, "ell": self.ell, "mu": self.mu}

    @property
    def static(self) -> bool:
        return self.case == "I"

    @property
    def support(self) -> np.ndarray:
        return self.phi != 0

    @property
    def potential_scale(self) -> float:
        return 1.0 / (self.lam * self.n_lambda) ** 2

    # -- jet profile ----------------------------------------------------------------

    def _z(self, t: float) -> np.ndarray:
        g = self.grid
        ints = _int_vec(self.direction.k, self.n_lambda)
        x = g.coords()
        turns = self.K * sum(c * xi for c, xi in zip(ints, x))
        turns = turns + self.lam * self.r * self.n_lambda * self.mu * t / TWO_PI
        return _wrap_turns(np.broadcast_to(turns, g.shape))

    def psi(self, j: int, order: int = 0) -> np.ndarray:
        """``d^order/dz^order psi_ell`` at the phase of slice ``j``."""
        return self.psi_at(self.grid.times()[j], order)

    def psi_at(self, t: float, order: int = 0) -> np.ndarray:
        if self.case != "II":
            return np.ones(self.grid.shape)
        ell = self.ell
        return ell ** (-0.5 - order) * self.profiles.psi(self._z(t) / ell, order)

    @property
    def phase_speed(self) -> float:
        return self.lam * self.r * self.n_lambda * (self.mu or 0.0)

    def dpsi_dt(self, j: int) -> np.ndarray:
        return self.phase_speed * self.psi(j, 1)

    # -- vector blocks ------------------------------------------------------------------

    def _times_k(self, s: np.ndarray) -> np.ndarray:
        return s[None] * self.k[:, None, None, None]

    def _transverse_vector(self) -> np.ndarray:
        k1, k2 = self.direction.array("k1"), self.direction.array("k2")
        return (self.grad_Phi_y[0][None] * k1[:, None, None, None]
                + self.grad_Phi_y[1][None] * k2[:, None, None, None])

    def grad_potential_profile(self) -> np.ndarray:
        """``grad_x Phi_(k)`` in closed form; it is transverse to ``k``."""
        return self.lam * self.r * self.n_lambda * self._transverse_vector()

    def W(self, j: int = 0) -> np.ndarray:
        return self._times_k(self.phi if self.static else self.psi(j) * self.phi)

    def Wc(self, j: int = 0) -> np.ndarray:
        s = self.Phi if self.static else self.psi(j) * self.Phi
        return self._times_k(s * self.potential_scale)

    def Wtilde(self, j: int = 0) -> np.ndarray:
        if self.static:
            return np.zeros((3,) + self.grid.shape)
        return self.r**2 * self.psi(j, 1)[None] * self._transverse_vector()

    def dW(self, j: int = 0) -> np.ndarray:
        if self.static:
            return np.zeros((3,) + self.grid.shape)
        return self._times_k(self.dpsi_dt(j) * self.phi)

    def dWc(self, j: int = 0) -> np.ndarray:
        if self.static:
            return np.zeros((3,) + self.grid.shape)
        return self._times_k(self.dpsi_dt(j) * self.Phi * self.potential_scale)

    def dWtilde(self, j: int = 0) -> np.ndarray:
        if self.static:
            return np.zeros((3,) + self.grid.shape)
        return self.r**2 * self.phase_speed * self.psi(j, 2)[None] * self._transverse_vector()

    def profile_square(self, j: int = 0) -> np.ndarray:
        """``|W|^2`` as a scalar (``phi^2`` or ``psi^2 phi^2``)."""
        s = self.phi if self.static else self.psi(j) * self.phi
        return s * s

    def field(self, name: str) -> SpaceTimeField:
        """``W``, ``Wc`` or ``Wtilde`` as a space-time field with analytic time derivative."""
        value = getattr(self, name)
        deriv = getattr(self, "d" + name)
        if self.static:
            return SpaceTimeField.constant(self.grid, value(0))
        return SpaceTimeField(self.grid, (3,), value, deriv)

    # -- identities on the assembly grid ----------------------------------------------

    def grid_identity_residuals(self, j: int = 0) -> dict:
        """Spectral identity defects measured on the assembly grid.

        These are small only when the grid resolves the tube; see
        :func:`verify_block_identities` for the resolved check.
        """
        g = self.grid
        W = self.W(j)
        scale = max(np.abs(W).max(), 1e-300)
        target = W + self.Wtilde(j)
        cc = g.curl(g.curl(self.Wc(j)))
        out = {"curl_curl": float(np.abs(cc - target).max() / scale),
               "div_W_plus_Wtilde": float(np.abs(g.div(target)).max() / (scale * self.lam))}
        if self.static:
            out["div_W"] = float(np.abs(g.div(W)).max() / (scale * self.lam))
            out["div_WW"] = float(np.abs(g.tensor_div(outer_self(W))).max() / (scale**2 * self.lam))
        return out


def _check_common(grid: TorusGrid, lam: float, r: float, n_lambda: int, min_cells: float):
    n, K = _lattice_index(lam, r)
    if lam * r * n_lambda < 1:
        raise BlockError("lambda r N_Lambda must be at least 1")
    diameter = 2.0 / (lam * n_lambda) * grid.n_space
    if diameter < min_cells:
        raise ResolutionError(
            f"tube diameter spans {diameter:.2f} grid cells (< {min_cells}) at n_space={grid.n_space},"
            f" lambda=2pi*{n}")
    return K, diameter


def _sample_transverse(grid, direction, lam, r, n_lambda, K, profiles):
    y1, y2 = transverse_coordinates(grid, direction, K, n_lambda)
    s1, s2 = y1 / r, y2 / r
    phi = profiles.phi(s1, s2) / r
    if not np.any(phi):
        raise ResolutionError("no grid point falls inside the tube")
    c = 1.0 / math.sqrt(float(np.mean(phi * phi)))
    Phi = c * profiles.Phi(s1, s2) / r
    grad = c * profiles.grad_Phi(s1, s2) / r**2
    return c * phi, Phi, grad, c


def mikado_block(direction: Direction, r: float, lam: float, grid: TorusGrid, n_lambda: int = 3,
                 profiles: ProfileLibrary = DEFAULT_PROFILES, min_cells: float = 4.0) -> BlockBundle:
    """Concentrated Mikado block ``W = phi_(k) k`` with potential ``Phi_(k) k / (lam N)^2``."""
    K, diameter = _check_common(grid, lam, r, n_lambda, min_cells)
    phi, Phi, grad, c = _sample_transverse(grid, direction, lam, r, n_lambda, K, profiles)
    return BlockBundle("I", direction, grid, lam, r, n_lambda, K, phi, Phi, grad, c, profiles,
                       resolution_cells={"tube_diameter": diameter})


def jet_block(direction: Direction, r: float, ell: float, mu: float, lam: float, grid: TorusGrid,
              n_lambda: int = 3, profiles: ProfileLibrary = DEFAULT_PROFILES,
              min_cells: float = 4.0) -> BlockBundle:
    """Intermittent jet ``W = psi_(k) phi_(k) k`` translating along ``k`` at speed ``mu``."""
    if not r * r < ell < 1:
        raise BlockError("ell must lie in (r^2, 1)")
    if mu <= 0:
        raise BlockError("mu must be positive")
    K, diameter = _check_common(grid, lam, r, n_lambda, min_cells)
    length = 2 * ell / (lam * r * n_lambda) * grid.n_space
    if length < min_cells:
        raise ResolutionError(f"jet length spans {length:.2f} grid cells (< {min_cells})")
    phi, Phi, grad, c = _sample_transverse(grid, direction, lam, r, n_lambda, K, profiles)
    return BlockBundle("II", direction, grid, lam, r, n_lambda, K, phi, Phi, grad, c, profiles,
                       ell=ell, mu=mu, resolution_cells={"tube_diameter": diameter, "jet_length": length})


# ---------------------------------------------------------------------------
# shifts
# ---------------------------------------------------------------------------


def select_shifts(directions: DirectionSet, lam: float, r: float, grid: TorusGrid,
                  candidates_per_axis: int = 16, seed: int = 7) -> DirectionSet:
    """Choose ``p_k`` so that the sampled tube supports are pairwise disjoint on the grid.

    Shifts are searched on a ``candidates_per_axis^2`` lattice of transverse
    offsets, visited in a seeded order; the first offset that avoids every
    previously placed tube wins.
    """
    _, K = _lattice_index(lam, r)
    n_lambda = directions.n_lambda
    occupied = np.zeros(grid.shape, dtype=bool)
    order = np.random.default_rng(seed).permutation(candidates_per_axis**2)
    shifts = []
    for e in directions:
        k1, k2 = e.array("k1"), e.array("k2")
        cell = 1.0 / (K * n_lambda)
        for idx in order:
            a, b = divmod(int(idx), candidates_per_axis)
            p = cell * (a * k1 + b * k2) / candidates_per_axis
            mask = support_mask(grid, e, K, r, n_lambda, p)
            if not np.any(mask & occupied):
                occupied |= mask
                shifts.append(tuple(float(v) for v in p))
                break
        else:
            raise ShiftSelectionError(
                f"no disjoint placement for k={[str(c) for c in e.k]} among "
                f"{candidates_per_axis**2} candidate shifts")
    return directions.with_shifts(shifts)


def build_blocks(directions: DirectionSet, case: str, lam: float, r: float, grid: TorusGrid,
                 ell: float | None = None, mu: float | None = None,
                 profiles: ProfileLibrary = DEFAULT_PROFILES, min_cells: float = 4.0,
                 select: bool = True) -> tuple[DirectionSet, list[BlockBundle]]:
    """Place shifts (optional) and build one bundle per direction, checking disjointness."""
    _check_common(grid, lam, r, directions.n_lambda, min_cells)
    if select:
        directions = select_shifts(directions, lam, r, grid)
    if case == "I":
        blocks = [mikado_block(e, r, lam, grid, directions.n_lambda, profiles, min_cells)
                  for e in directions]
    else:
        blocks = [jet_block(e, r, ell, mu, lam, grid, directions.n_lambda, profiles, min_cells)
                  for e in directions]
    count = np.zeros(grid.shape, dtype=np.int16)
    for b in blocks:
        count += b.support
    if count.max() > 1:
        raise ShiftSelectionError("block supports overlap on the grid")
    return directions, blocks


# ---------------------------------------------------------------------------
# resolved identity checks in block coordinates
# ---------------------------------------------------------------------------


class _LocalBox:
    """Periodic box around a block support, in ``(y1, y2, z)`` coordinates."""

    def __init__(self, half_widths: tuple[float, float, float], n: tuple[int, int, int]):
        self.axes = [(-h + 2 * h * np.arange(m) / m) if m > 1 else np.zeros(1)
                     for h, m in zip(half_widths, n)]
        self.mesh = np.meshgrid(*self.axes, indexing="ij")
        self.k = [2 * math.pi * np.fft.fftfreq(m, d=2 * h / m) if m > 1 else np.zeros(1)
                  for h, m in zip(half_widths, n)]
        for i, m in enumerate(n):
            if m > 1 and m % 2 == 0:
                self.k[i][m // 2] = 0.0

    def d(self, f: np.ndarray, axis: int) -> np.ndarray:
        if len(self.axes[axis]) == 1:
            return np.zeros_like(f)
        shape = [1, 1, 1]
        shape[axis] = -1
        return np.real(np.fft.ifftn(1j * self.k[axis].reshape(shape) * np.fft.fftn(f)))


def verify_block_identities(bundle_or_direction, case: str = "I", r: float = 0.25, lam: float = TWO_PI * 8,
                            ell: float = 0.5, n_lambda: int = 3,
                            profiles: ProfileLibrary = DEFAULT_PROFILES,
                            cells_per_radius: int = 32) -> dict:
    """Resolved spectral residuals of the block identities.

    The block is sampled on a periodic box covering its support in block
    coordinates; x-derivatives are ``lam r N (k1 d_y1 + k2 d_y2 + k d_z)``.
    Returns relative residuals of ``curl curl Wc - (W + Wtilde)``,
    ``div W`` (Case I), ``div(W (x) W)`` (Case I) and ``div(W + Wtilde)``.
    """
    if isinstance(bundle_or_direction, BlockBundle):
        b = bundle_or_direction
        direction, case, r, lam, n_lambda = b.direction, b.case, b.r, b.lam, b.n_lambda
        ell, profiles = b.ell, b.profiles
    else:
        direction = bundle_or_direction
    D = lam * r * n_lambda
    frame = [direction.array(w) for w in ("k1", "k2", "k")]
    half_y = 1.25 * r
    n_y = 2 * int(math.ceil(cells_per_radius * 1.25))
    if case == "I":
        box = _LocalBox((half_y, half_y, 0.0), (n_y, n_y, 1))
    else:
        n_z = 2 * int(math.ceil(cells_per_radius * 1.25))
        box = _LocalBox((half_y, half_y, 1.25 * ell), (n_y, n_y, n_z))
    y1, y2, z = box.mesh
    s1, s2 = y1 / r, y2 / r
    phi = profiles.phi(s1, s2) / r
    Phi = profiles.Phi(s1, s2) / r
    if case == "I":
        psi = np.ones_like(phi)
        dpsi = np.zeros_like(phi)
    else:
        psi = ell**-0.5 * profiles.psi(z / ell)
        dpsi = ell**-1.5 * profiles.psi(z / ell, 1)
    k = frame[2]
    gP = profiles.grad_Phi(s1, s2) / r**2
    V = gP[0][None] * frame[0][:, None, None, None] + gP[1][None] * frame[1][:, None, None, None]

    def times_k(s):
        return s[None] * k[:, None, None, None]

    W = times_k(psi * phi)
    Wt = r**2 * dpsi[None] * V if case == "II" else np.zeros_like(W)
    Wc = times_k(psi * Phi / (lam * n_lambda) ** 2)

    def grad_x(f):
        parts = [box.d(f, a) for a in range(3)]
        return D * sum(parts[a][None] * frame[a][:, None, None, None] for a in range(3))

    def div_x(v):
        return sum(grad_x(v[i])[i] for i in range(3))

    def curl_x(v):
        g = [grad_x(v[i]) for i in range(3)]   # g[i][j] = d_j v_i
        return np.stack([g[2][1] - g[1][2], g[0][2] - g[2][0], g[1][0] - g[0][1]])

    scale = np.abs(W).max()
    out = {"curl_curl": float(np.abs(curl_x(curl_x(Wc)) - W - Wt).max() / scale),
           "div_W_plus_Wtilde": float(np.abs(div_x(W + Wt)).max() / (scale * lam))}
    if case == "I":
        out["div_W"] = float(np.abs(div_x(W)).max() / (scale * lam))
        WW = np.einsum("i...,j...->ij...", W, W)
        dWW = np.stack([sum(grad_x(WW[i, j])[j] for j in range(3)) for i in range(3)])
        out["div_WW"] = float(np.abs(dWW).max() / (scale**2 * lam))
    return out


# ---------------------------------------------------------------------------
# scaling harness
# ---------------------------------------------------------------------------


@dataclass
class ScalingRow:
    lemma: str
    quantity: str
    parameter: str
    predicted_exponent: float
    fitted_exponent: float
    points: int

    @property
    def rel_error(self) -> float:
        return abs(self.fitted_exponent - self.predicted_exponent) / max(abs(self.predicted_exponent), 1.0)


@dataclass
class ScalingReport:
    rows: list[ScalingRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lemma", "quantity", "parameter", "predicted_exponent", "fitted_exponent",
                    "rel_error"])
        for r in self.rows:
            w.writerow([r.lemma, r.quantity, r.parameter, f"{r.predicted_exponent:.6g}",
                        f"{r.fitted_exponent:.6g}", f"{r.rel_error:.3e}"])
        return buf.getvalue()

    def failures(self, tol: float = 0.10) -> list[ScalingRow]:
        return [r for r in self.rows if not r.rel_error <= tol]

    def passed(self, tol: float = 0.10) -> bool:
        return not self.failures(tol)

    def __add__(self, other: "ScalingReport") -> "ScalingReport":
        return ScalingReport(self.rows + other.rows)


def fit_exponent(params, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(params)``."""
    x, y = np.log(np.asarray(params, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(x, y, 1)[0])


def _avg_norm(samples: np.ndarray, cell_measure: float, p: float) -> float:
    """``L^p`` norm of a compactly supported function for the normalized measure."""
    a = np.abs(samples)
    if math.isinf(p):
        return float(a.max())
    return float((np.sum(a**p) * cell_measure) ** (1 / p))


# Absolute sampling steps for the harness: fixed in the block coordinates so
# that the sample count per support varies across a sweep.
_Y_STEP = TWO_PI / 8192
_T_SAMPLES = 1 << 16


def _transverse_samples(r: float):
    n = int(math.ceil(r / _Y_STEP)) + 1
    axis = _Y_STEP * np.arange(-n, n + 1)
    y1, y2 = np.meshgrid(axis, axis, indexing="ij")
    return y1 / r, y2 / r, _Y_STEP**2 / (TWO_PI**2)


_SAMPLE_CACHE: dict = {}


def _mikado_norm(profiles, which: str, order: int, p: float, r: float, lam: float, n_lambda: int):
    """``||grad^order F||_{L^p(T^3)}`` for ``F = phi_(k)`` or ``Phi_(k)``."""
    key = (id(profiles), which, order, r)
    if key not in _SAMPLE_CACHE:
        if len(_SAMPLE_CACHE) > 32:
            _SAMPLE_CACHE.clear()
        s1, s2, meas = _transverse_samples(r)
        # grad_y^N f_r = r^{-1-N} (grad^N f)(y / r)
        vals = profiles.derivative_tensor_2d(which, order, s1, s2) * r ** (-1 - order)
        _SAMPLE_CACHE[key] = (vals[vals != 0], meas)
    vals, meas = _SAMPLE_CACHE[key]
    # grad_x^N F = (lam r N)^N grad_y^N f_r
    return (lam * r * n_lambda) ** order * _avg_norm(vals, meas, p)


def _psi_norm(profiles, order_t: int, p: float, ell: float, speed: float):
    n = int(math.ceil(ell / _Y_STEP)) + 1
    z = _Y_STEP * np.arange(-n, n + 1)
    vals = ell ** (-0.5 - order_t) * profiles.psi(z / ell, order_t) * speed**order_t
    return _avg_norm(vals, _Y_STEP / TWO_PI, p)


def _mikado_rows(profiles, n_lambda) -> list[ScalingRow]:
    rows = []
    r_sweep = [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    lam_sweep = [TWO_PI * n for n in (4, 8, 16, 32)]
    for which, lam_shift in (("phi", 0), ("Phi", 0), ("W", 0), ("Wc", -2)):
        base = "phi" if which in ("phi", "W") else "Phi"
        for order in (0, 1, 2):
            for p in (1.0, 2.0, math.inf):
                ptxt = "inf" if math.isinf(p) else f"{p:g}"
                label = f"grad^{order} {which}_k L^{ptxt}"
                pot = (lambda lam: 1.0 / (lam * n_lambda) ** 2) if which == "Wc" else (lambda lam: 1.0)
                lam0 = TWO_PI * 32
                vals = [pot(lam0) * _mikado_norm(profiles, base, order, p, r, lam0, n_lambda)
                        for r in r_sweep]
                pred = 2 / p - 1
                rows.append(ScalingRow("mikado", label, "r", pred, fit_exponent(r_sweep, vals), 4))
                r0 = 1 / 4
                vals = [pot(lam) * _mikado_norm(profiles, base, order, p, r0, lam, n_lambda)
                        for lam in lam_sweep]
                rows.append(ScalingRow("mikado", label, "lambda", order + lam_shift,
                                       fit_exponent(lam_sweep, vals), 4))
    return rows


def _jet_rows(profiles, n_lambda) -> list[ScalingRow]:
    rows = []
    lam0, r0, ell0, mu0 = TWO_PI * 16, 1 / 8, 1 / 4, 4.0
    ell_sweep = [1 / 2, 1 / 4, 1 / 8, 1 / 16]
    mu_sweep = [1.0, 2.0, 4.0, 8.0]
    r_sweep = [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    lam_sweep = [TWO_PI * n for n in (4, 8, 16, 32)]
    for M in (0, 1):
        for p in (1.0, 2.0, math.inf):
            ptxt = "inf" if math.isinf(p) else f"{p:g}"
            label = f"dt^{M} psi_k C_tL^{ptxt}"

            def psi_val(lam=lam0, r=r0, ell=ell0, mu=mu0):
                return _psi_norm(profiles, M, p, ell, lam * r * n_lambda * mu)

            rows.append(ScalingRow("jet", label, "ell", 1 / p - 0.5 - M,
                                   fit_exponent(ell_sweep, [psi_val(ell=e) for e in ell_sweep]), 4))
            if M:
                rows.append(ScalingRow("jet", label, "mu", 1.0,
                                       fit_exponent(mu_sweep, [psi_val(mu=m) for m in mu_sweep]), 4))
                rows.append(ScalingRow("jet", label, "lambda", 1.0,
                                       fit_exponent(lam_sweep, [psi_val(lam=x) for x in lam_sweep]), 4))
        for p in (1.0, 2.0):
            label = f"dt^{M} W_k C_tL^{p:g}"

            def w_val(r=r0, ell=ell0, lam=lam0):
                transverse = _mikado_norm(profiles, "phi", 0, p, r, lam, n_lambda)
                return transverse * _psi_norm(profiles, M, p, ell, lam * r * n_lambda * mu0)

            rows.append(ScalingRow("jet", label, "r", 2 / p - 1 + M,
                                   fit_exponent(r_sweep, [w_val(r=x) for x in r_sweep]), 4))
            rows.append(ScalingRow("jet", label, "ell", 1 / p - 0.5 - M,
                                   fit_exponent(ell_sweep, [w_val(ell=x) for x in ell_sweep]), 4))
    return rows


def _temporal_rows(profiles) -> list[ScalingRow]:
    rows = []
    t = profiles.T * np.arange(_T_SAMPLES) / _T_SAMPLES
    dt = profiles.T / _T_SAMPLES
    tau_sweep = [1.0, 2.0, 4.0, 8.0]
    sigma_sweep = [1, 2, 4, 8]

    def norm(vals, gamma):
        from .spectral import time_norm
        return time_norm(np.abs(vals), dt, gamma)

    for M in (0, 1):
        for gamma in (1.0, 2.0, 4.0):
            label = f"dt^{M} g_(tau) L^{gamma:g}_t"
            vals = [norm(TemporalBlocks(tau, 2, profiles).g(t, M), gamma) for tau in tau_sweep]
            rows.append(ScalingRow("temporal", label, "tau", M + 0.5 - 1 / gamma,
                                   fit_exponent(tau_sweep, vals), 4))
            vals = [norm(TemporalBlocks(2.0, s, profiles).g(t, M), gamma) for s in sigma_sweep]
            pred = float(M)
            fitted = fit_exponent(sigma_sweep, vals)
            rows.append(ScalingRow("temporal", label, "sigma", pred, fitted, 4))
    return rows


def verify_scaling(family: str = "all", n_lambda: int = 3,
                   profiles: ProfileLibrary = DEFAULT_PROFILES) -> ScalingReport:
    """Fit measured norm exponents against the predicted parameter powers.

    ``family`` is ``"mikado"``, ``"jet"``, ``"temporal"`` or ``"all"``.
    Norms are measured on fixed-step samples of the block coordinates and
    converted to unit-torus averages; every sweep has four points.
    """
    builders = {"mikado": lambda: _mikado_rows(profiles, n_lambda),
                "jet": lambda: _jet_rows(profiles, n_lambda),
                "temporal": lambda: _temporal_rows(profiles)}
    if family == "all":
        rows = []
        for name in ("mikado", "jet", "temporal"):
            rows += builders[name]()
        return ScalingReport(rows)
    if family not in builders:
        raise BlockError(f"unknown block family {family!r}")
    return ScalingReport(builders[family]())
