"""Rational direction sets, the geometric decomposition near the identity,
the stress cutoff ``chi`` and the amplitude fields ``a_k``.

The direction set holds the three coordinate axes and the twelve directions
``(+-1, +-2, +-2)/3`` (all coordinate permutations, one sign per pair +-k).
Each comes with a rational orthonormal frame, so ``3 * {k, k1, k2}`` are integer
vectors.  Weights ``c_k(R)`` with ``sum_k c_k(R) k (x) k = R`` are selected by the
exponential family ``c_k = w_k exp(k^T Y k)``: ``Y`` is the unique minimiser of
the convex function ``sum_k w_k exp(k^T Y k) - <Y, R>``, which makes every
``c_k`` positive and smooth in ``R``.  At ``R = Id`` all weights equal 1/5.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .spectral import (SYM_PAIRS, SpaceTimeField, TorusGrid, matrix_to_sym, sym_frobenius,
                       sym_to_matrix)

# Largest admissible ||R - Id||_op for the decomposition.  The cutoff below keeps
# ||R/rho||_op <= BLEND_MAX < BALL_RADIUS.
BALL_RADIUS = 0.625

Vec = tuple[Fraction, Fraction, Fraction]


class GeometryError(ValueError):
    pass


class DomainError(GeometryError):
    pass


class DecompositionError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# Direction set
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Direction:
    k: Vec
    k1: Vec
    k2: Vec
    weight: Fraction
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def array(self, which: str = "k") -> np.ndarray:
        return np.array([float(x) for x in getattr(self, which)])


def _dot(u: Sequence[Fraction], v: Sequence[Fraction]) -> Fraction:
    return sum((a * b for a, b in zip(u, v)), Fraction(0))


def _packed(k: Sequence[Fraction]) -> list[Fraction]:
    return [k[i] * k[j] for i, j in SYM_PAIRS]


def _det(m: list[list[Fraction]]) -> Fraction:
    m = [row[:] for row in m]
    n = len(m)
    det = Fraction(1)
    for c in range(n):
        pivot = next((r for r in range(c, n) if m[r][c] != 0), None)
        if pivot is None:
            return Fraction(0)
        if pivot != c:
            m[c], m[pivot] = m[pivot], m[c]
            det = -det
        det *= m[c][c]
        for r in range(c + 1, n):
            f = m[r][c] / m[c][c]
            m[r] = [a - f * b for a, b in zip(m[r], m[c])]
    return det


@dataclass(frozen=True)
class DirectionSet:
    entries: tuple[Direction, ...]
    n_lambda: int
    spanning_det: Fraction = field(default=Fraction(0))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> Direction:
        return self.entries[i]

    @property
    def k_array(self) -> np.ndarray:
        """``(|L|, 3)`` float array of directions."""
        return np.array([e.array("k") for e in self.entries])

    @property
    def weights(self) -> np.ndarray:
        return np.array([float(e.weight) for e in self.entries])

    def packed_basis(self) -> np.ndarray:
        """``(|L|, 6)`` packed ``k (x) k``."""
        k = self.k_array
        return np.stack([k[:, i] * k[:, j] for i, j in SYM_PAIRS], axis=1)

    def with_shifts(self, shifts: Sequence[Sequence[float]]) -> "DirectionSet":
        if len(shifts) != len(self.entries):
            raise GeometryError("one shift per direction required")
        entries = tuple(replace(e, shift=tuple(float(s) for s in p))
                        for e, p in zip(self.entries, shifts))
        return replace(self, entries=entries)

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        """Exact checks of frames, integrality, spanning and the weights at Id."""
        for e in self.entries:
            frame = (e.k, e.k1, e.k2)
            for a in range(3):
                for b in range(3):
                    if _dot(frame[a], frame[b]) != (1 if a == b else 0):
                        raise GeometryError(f"frame of k={_fmt_vec(e.k)} is not orthonormal")
            for v in frame:
                if any((self.n_lambda * x).denominator != 1 for x in v):
                    raise GeometryError(f"N_Lambda * {_fmt_vec(v)} is not integral")
            if e.weight <= 0:
                raise GeometryError("weights must be positive")
        if spanning_determinant(self.entries) == 0:
            raise GeometryError("k (x) k do not span the symmetric matrices")
        identity = [sum((e.weight * p[c] for e, p in zip(self.entries,
                                                           (_packed(e.k) for e in self.entries))),
                        Fraction(0)) for c in range(6)]
        if identity != [1, 1, 1, 0, 0, 0]:
            raise GeometryError("weights do not decompose the identity")

    # -- text serialization -------------------------------------------------

    def to_text(self) -> str:
        lines = ["# direction set: k | k1 | k2 | weight | shift", f"n_lambda = {self.n_lambda}"]
        for e in self.entries:
            shift = " ".join(repr(float(s)) for s in e.shift)
            lines.append(f"direction = {_fmt_vec(e.k)} | {_fmt_vec(e.k1)} | {_fmt_vec(e.k2)}"
                         f" | {e.weight.numerator}/{e.weight.denominator} | {shift}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "DirectionSet":
        n_lambda = None
        entries = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key == "n_lambda":
                n_lambda = int(value)
            elif key == "direction":
                parts = [p.strip() for p in value.split("|")]
                if len(parts) != 5:
                    raise GeometryError(f"malformed direction line: {raw!r}")
                k, k1, k2 = (_parse_vec(p) for p in parts[:3])
                shift = tuple(float(s) for s in parts[4].split())
                entries.append(Direction(k, k1, k2, Fraction(parts[3]), shift))
            else:
                raise GeometryError(f"unknown key {key!r}")
        if n_lambda is None or not entries:
            raise GeometryError("direction file lacks n_lambda or entries")
        out = cls(tuple(entries), n_lambda, spanning_determinant(entries))
        out.validate()
        return out

    @classmethod
    def load(cls, path: str | Path) -> "DirectionSet":
        return cls.from_text(Path(path).read_text())


def _fmt_vec(v: Vec) -> str:
    return " ".join(f"{x.numerator}/{x.denominator}" for x in v)


def _parse_vec(text: str) -> Vec:
    vals = tuple(Fraction(s) for s in text.split())
    if len(vals) != 3:
        raise GeometryError(f"expected three rationals, got {text!r}")
    return vals


def spanning_determinant(entries: Sequence[Direction]) -> Fraction:
    """Determinant of the Gram matrix of packed ``k (x) k`` over the set."""
    vecs = [_packed(e.k) for e in entries]
    gram = [[sum((v[i] * v[j] for v in vecs), Fraction(0)) for j in range(6)] for i in range(6)]
    return _det(gram)


_ROTATION = ((1, 2, 2), (2, 1, -2), (2, -2, 1))


def _frame_for(k: Vec) -> tuple[Vec, Vec]:
    """Rational orthonormal completion of a (1,2,2)/3-type direction."""
    third = Fraction(1, 3)
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            rows = [tuple(third * signs[c] * _ROTATION[r][perm[c]] for c in range(3))
                    for r in range(3)]
            for r, row in enumerate(rows):
                if row == k:
                    others = [rows[i] for i in range(3) if i != r]
                    return others[0], others[1]
    raise AssertionError(f"no rational frame for {k}")


def build_direction_set() -> DirectionSet:
    """The fixed 15-direction set with weights 1/5 and ``N_Lambda = 3``."""
    one, zero, third = Fraction(1), Fraction(0), Fraction(1, 3)
    axes = [(one, zero, zero), (zero, one, zero), (zero, zero, one)]
    entries = [Direction(axes[i], axes[(i + 1) % 3], axes[(i + 2) % 3], Fraction(1, 5))
               for i in range(3)]
    seen = set()
    for pos in range(3):
        for s1, s2 in itertools.product((1, -1), repeat=2):
            base = [2, 2, 2]
            base[pos] = 1
            others = [i for i in range(3) if i != pos]
            vec = [Fraction(base[i]) * third for i in range(3)]
            vec[others[0]] *= s1
            vec[others[1]] *= s2
            k = tuple(vec)
            if k in seen:
                continue
            seen.add(k)
            k1, k2 = _frame_for(k)
            entries.append(Direction(k, k1, k2, Fraction(1, 5)))
    dens = [x.denominator for e in entries for v in (e.k, e.k1, e.k2) for x in v]
    n_lambda = math.lcm(*dens)
    out = DirectionSet(tuple(entries), n_lambda, spanning_determinant(entries))
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Decomposition weights
# ---------------------------------------------------------------------------


_SCALE = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


def _hessians(c: np.ndarray, lin: np.ndarray) -> np.ndarray:
    outer = (lin[:, :, None] * lin[:, None, :]).reshape(len(lin), 36)
    return (c @ outer).reshape(-1, 6, 6)


def _solve_weights(directions: DirectionSet, targets: np.ndarray, tol: float = 4e-15,
                   max_iter: int = 80) -> tuple[np.ndarray, np.ndarray]:
    """Batched damped Newton solve; ``targets`` is ``(m, 6)`` packed.  Returns (c, hessian)."""
    basis = directions.packed_basis()              # (K, 6)
    lin = basis * _SCALE                           # k^T Y k = lin . y
    w = directions.weights
    r = targets * _SCALE
    y = np.zeros_like(r)
    scale = max(1.0, float(np.abs(r).max()))

    def objective(yy, rr):
        return np.exp(yy @ lin.T) @ w - np.einsum("mi,mi->m", yy, rr)

    for _ in range(max_iter):
        c = w * np.exp(y @ lin.T)                   # (m, K)
        grad = c @ lin - r
        if np.abs(grad).max() <= tol * scale:
            break
        step = np.linalg.solve(_hessians(c, lin), grad[..., None])[..., 0]
        trial = y - step
        f0 = c.sum(axis=1) - np.einsum("mi,mi->m", y, r)
        slack = 1e-13 * (np.abs(f0) + 1.0)
        bad = np.nonzero(objective(trial, r) > f0 + slack)[0]
        t = 1.0
        while bad.size and t > 1e-12:
            t *= 0.5
            trial[bad] = y[bad] - t * step[bad]
            still = objective(trial[bad], r[bad]) > f0[bad] + slack[bad]
            bad = bad[still]
        y = trial
    else:
        raise DecompositionError("weight selection did not converge")
    c = w * np.exp(y @ lin.T)
    return c, _hessians(c, lin)


def _as_packed(R: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    R = np.asarray(R, dtype=float)
    if R.shape[:2] == (3, 3):
        R = matrix_to_sym(R)
    if R.shape[0] != 6:
        raise GeometryError("expected a 3x3 matrix or packed symmetric tensor")
    rest = R.shape[1:]
    return R.reshape(6, -1).T, rest


def _op_norm_packed(p: np.ndarray) -> np.ndarray:
    """Operator norm of each packed symmetric row (``(m, 6)``)."""
    return np.abs(np.linalg.eigvalsh(sym_to_matrix(p.T).transpose(2, 0, 1))).max(axis=-1)


def decomposition_weights(directions: DirectionSet, R: np.ndarray,
                          radius: float = BALL_RADIUS) -> np.ndarray:
    """``c_k(R)`` for a matrix (``(3,3,...)``) or packed (``(6,...)``) input.

    Returns an array of shape ``(|L|,) + batch``.
    """
    p, rest = _as_packed(R)
    dev = p - np.array([1, 1, 1, 0, 0, 0.0])
    if (_op_norm_packed(dev) > radius + 1e-12).any():
        raise DomainError(f"||R - Id|| exceeds {radius}")
    c, _ = _solve_weights(directions, p)
    if (c <= 0).any():
        raise DecompositionError("non-positive decomposition weight")
    return c.T.reshape((len(directions),) + rest)


def gamma(directions: DirectionSet, index: int, R: np.ndarray,
          radius: float = BALL_RADIUS) -> float | np.ndarray:
    """``gamma_k(R) = sqrt(c_k(R))`` for direction ``index``."""
    c = decomposition_weights(directions, R, radius)[index]
    out = np.sqrt(c)
    return float(out) if out.ndim == 0 else out


def gamma_gradient(directions: DirectionSet, R: np.ndarray) -> np.ndarray:
    """Derivatives ``d gamma_k / d R_c`` for packed coordinates ``c`` (single matrix).

    Returns ``(|L|, 6)``.  Differentiation is with respect to independent packed
    entries, so an off-diagonal entry moves both symmetric positions.
    """
    p, _ = _as_packed(R)
    c, hess = _solve_weights(directions, p)
    lin = directions.packed_basis() * _SCALE
    # d(grad)/dR_c = -scale_c e_c, so dy/dR = H^{-1} diag(scale)
    dy = np.linalg.solve(hess[0], np.diag(_SCALE))
    dc = c[0][:, None] * (lin @ dy)
    return dc / (2 * np.sqrt(c[0]))[:, None]


def reconstruct(directions: DirectionSet, c: np.ndarray) -> np.ndarray:
    """Packed ``sum_k c_k k (x) k`` for weights of shape ``(|L|,) + batch``."""
    basis = directions.packed_basis()
    return np.tensordot(basis.T, c, axes=(1, 0))


@dataclass
class BallCertificate:
    radius: float
    samples: int
    min_weight: float
    max_gamma: float
    max_gamma_gradient: float
    max_reconstruction_error: float

    @property
    def ok(self) -> bool:
        return self.min_weight > 0 and self.max_reconstruction_error < 1e-12


def certify_ball(directions: DirectionSet, radius: float = BALL_RADIUS, samples: int = 20000,
                 seed: int = 0) -> BallCertificate:
    """Sample the sphere ``||R - Id|| = radius`` and record weight extremes.

    Points are ``Id + radius * Q diag(s) Q^T`` with random rotations ``Q`` and
    eigenvalues ``s`` with ``max |s_i| = 1``.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(samples, 3, 3)))
    s = rng.uniform(-1, 1, size=(samples, 3))
    idx = rng.integers(0, 3, size=samples)
    s[np.arange(samples), idx] = rng.choice([-1.0, 1.0], size=samples)
    mats = np.eye(3) + radius * np.einsum("mij,mj,mkj->mik", q, s, q)
    packed = matrix_to_sym(mats.transpose(1, 2, 0)).T
    c, hess = _solve_weights(directions, packed)
    err = np.abs(reconstruct(directions, c.T).T - packed).max()
    lin = directions.packed_basis() * _SCALE
    # gradient bound on a subsample (full Jacobians are (m, K, 6))
    sub = slice(0, min(samples, 2000))
    dy = np.linalg.solve(hess[sub], np.broadcast_to(np.diag(_SCALE), hess[sub].shape))
    dc = c[sub][:, :, None] * np.einsum("ki,mij->mkj", lin, dy)
    dg = np.abs(dc / (2 * np.sqrt(c[sub]))[:, :, None]).max()
    return BallCertificate(radius, samples, float(c.min()), float(np.sqrt(c).max()),
                           float(dg), float(err))


def geometric_constant(directions: DirectionSet, samples: int = 5000, seed: int = 1) -> float:
    """Sampled ``sup sum_k (|gamma_k| + |grad gamma_k|)`` over the ball (a C^1 proxy)."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(samples // 500):
        q, _ = np.linalg.qr(rng.normal(size=(500, 3, 3)))
        s = rng.uniform(-1, 1, size=(500, 3)) * BALL_RADIUS * rng.uniform(0, 1, (500, 1))
        mats = np.eye(3) + np.einsum("mij,mj,mkj->mik", q, s, q)
        packed = matrix_to_sym(mats.transpose(1, 2, 0)).T
        c, hess = _solve_weights(directions, packed)
        lin = directions.packed_basis() * _SCALE
        dy = np.linalg.solve(hess, np.broadcast_to(np.diag(_SCALE), hess.shape))
        dc = c[:, :, None] * np.einsum("ki,mij->mkj", lin, dy)
        dg = np.linalg.norm(dc / (2 * np.sqrt(c))[:, :, None], axis=2)
        best = max(best, float((np.sqrt(c) + dg).sum(axis=1).max()))
    return best


# ---------------------------------------------------------------------------
# Stress cutoff
# ---------------------------------------------------------------------------


def _smoothstep(u):
    return u * u * u * (10 - 15 * u + 6 * u * u)


def _smoothstep_prime(u):
    return 30 * u * u * (1 - u) ** 2


def chi(s: np.ndarray | float) -> np.ndarray:
    """1 on ``[0, 1]``, identity on ``[2, inf)``, ``1 + S(s-1)(s-1)`` in between."""
    s = np.asarray(s, dtype=float)
    u = np.clip(s - 1.0, 0.0, 1.0)
    mid = 1.0 + _smoothstep(u) * u
    return np.where(s <= 1.0, 1.0, np.where(s >= 2.0, s, mid))


def chi_prime(s: np.ndarray | float) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    u = np.clip(s - 1.0, 0.0, 1.0)
    mid = _smoothstep_prime(u) * u + _smoothstep(u)
    return np.where(s <= 1.0, 0.0, np.where(s >= 2.0, 1.0, mid))


def _blend_max() -> float:
    s = np.linspace(1.0, 2.0, 200001)
    return float((s / (2 * chi(s))).max())


BLEND_MAX = _blend_max()


def stress_norm(R: np.ndarray) -> np.ndarray:
    """Pointwise Frobenius norm of a packed symmetric tensor ``(6, ...)``.

    The Frobenius norm is smooth away from 0 (where ``chi`` is flat), so
    ``rho = 2 chi(|R|)`` is smooth in time; it also dominates the operator
    norm, which is what the ball condition needs.
    """
    return sym_frobenius(R)


def smooth_chi(R: np.ndarray) -> np.ndarray:
    """``chi(||R||_op)`` pointwise for a packed tensor slice."""
    return chi(stress_norm(R))


# ---------------------------------------------------------------------------
# Amplitudes
# ---------------------------------------------------------------------------


def _amplitude_slice(directions: DirectionSet, R: np.ndarray, dR: np.ndarray | None):
    """``(c, rho, dc, drho)`` at one time slice; derivatives when ``dR`` is given."""
    flat = R.reshape(6, -1).T
    s = stress_norm(R).reshape(-1)
    rho = 2 * chi(s)
    m = np.array([1, 1, 1, 0, 0, 0.0]) - flat / rho[:, None]
    if (s / rho > BALL_RADIUS).any():
        raise DomainError("Id - R/rho left the admissible ball")
    c, hess = _solve_weights(directions, m)
    if dR is None:
        return c, rho, None, None
    dflat = dR.reshape(6, -1).T
    weights = np.array([1, 1, 1, 2, 2, 2.0])
    ds = np.einsum("mc,mc,c->m", flat, dflat, weights) / np.where(s > 0, s, 1.0)
    drho = 2 * chi_prime(s) * ds
    dm = -dflat / rho[:, None] + flat * (drho / rho**2)[:, None]
    lin = directions.packed_basis() * _SCALE
    dy = np.linalg.solve(hess, (dm * _SCALE)[..., None])[..., 0]
    dc = c * (dy @ lin.T)
    return c, rho, dc, drho


@dataclass
class AmplitudeSlice:
    a: np.ndarray          # (K, n, n, n)
    rho: np.ndarray        # (n, n, n), cutoff-weighted: theta^2 * rho
    theta: float
    da: np.ndarray | None = None


class AmplitudeBundle:
    """Amplitudes ``a_k = theta(t) rho^{1/2} gamma_k(Id - R/rho)`` evaluated per slice.

    ``theta`` is the time cutoff: 1 on slices where the stress is nonzero and 0
    elsewhere (a smooth cutoff whose transitions fall between samples, so its
    derivative vanishes at every sample).  With ``time_cutoff=False`` it is 1.
    """

    def __init__(self, stress: SpaceTimeField, directions: DirectionSet, time_cutoff: bool = True):
        self.stress = stress
        self.directions = directions
        self.grid: TorusGrid = stress.grid
        self.time_cutoff = time_cutoff
        support = stress_time_support(stress)
        self.theta = support.astype(float) if time_cutoff else np.ones(self.grid.n_time)
        self.static = stress.static
        self._cache: dict[int, AmplitudeSlice] = {}

    @property
    def n_directions(self) -> int:
        return len(self.directions)

    @property
    def time_derivative_mode(self) -> str:
        return self.stress.time_derivative_mode

    def slice(self, j: int, derivative: bool = False) -> AmplitudeSlice:
        key = 0 if self.static else j
        theta = float(self.theta[j])
        hit = self._cache.get(key)
        if hit is None or (derivative and hit.da is None and not self.static):
            hit = self._compute(key, derivative and not self.static)
            self._cache = {key: hit}
        if theta == 1.0:
            out = hit
        else:
            out = AmplitudeSlice(hit.a * theta, hit.rho * theta**2, theta,
                                 None if hit.da is None else hit.da * theta)
        if derivative and out.da is None:
            out = AmplitudeSlice(out.a, out.rho, out.theta, np.zeros_like(out.a))
        return AmplitudeSlice(out.a, out.rho, theta, out.da)

    def _compute(self, j: int, derivative: bool) -> AmplitudeSlice:
        g = self.grid
        R = self.stress.slice(j)
        dR = self.stress.time_derivative(j) if derivative else None
        c, rho, dc, drho = _amplitude_slice(self.directions, R, dR)
        K = self.n_directions
        a2 = rho[:, None] * c
        a = np.sqrt(a2).T.reshape((K,) + g.shape)
        da = None
        if derivative:
            da2 = drho[:, None] * c + rho[:, None] * dc
            da = (da2 / (2 * np.sqrt(a2))).T.reshape((K,) + g.shape)
        return AmplitudeSlice(a, rho.reshape(g.shape), 1.0, da)

    def reconstruction_error(self, j: int) -> float:
        """``max |sum a_k^2 k (x) k + R - theta^2 rho Id|`` relative to ``max(rho)``."""
        s = self.slice(j)
        total = reconstruct(self.directions, s.a**2) + self.stress.slice(j)
        for c in range(3):
            total[c] = total[c] - s.rho
        return float(np.abs(total).max() / max(s.rho.max(), 1e-300))


def stress_time_support(stress: SpaceTimeField) -> np.ndarray:
    terms = stress.terms
    if terms is not None:
        mask = np.zeros(stress.n_time, dtype=bool)
        for c, _, s in terms:
            if np.abs(s).max() > 0:
                mask |= c != 0
        return mask
    return stress.support()


def amplitudes(stress: SpaceTimeField, directions: DirectionSet,
               time_cutoff: bool = True) -> AmplitudeBundle:
    return AmplitudeBundle(stress, directions, time_cutoff)
