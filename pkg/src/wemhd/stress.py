"""Iteration states, the new stress, pressure bookkeeping and the inductive checks.

A state ``(A, B, R, P)`` solves the relaxed system

    d_t A + div(B (x) B) + grad P + D A = div R,    B = curl A,  div A = 0,

with ``D = (-Delta)^alpha`` (or 0 in the non-resistive mode) and ``R``
symmetric trace-free.  One step adds the perturbation ``(v, w)`` and writes the
new stress as a sum of named parts whose divergences account for every term of
the expanded equation on the grid:

* ``R_lin = R P_H[d_t v_p + D v + div(B (x) w + w (x) B)]``
* ``R_osc2 = -sigma^{-1} h R P_H(sum_k m_k k (k . grad d_t a_k^2))``
* ``R_osc1 = R P_H div Q`` with ``Q = w_p (x) w_p - sum a^2 k (x) k - (g^2 - 1) sum m a^2 k (x) k``
  (Case II: plus ``d_t v_t``, minus ``R_osc3``)
* ``R_osc3 = -mu^{-1} R P_H P_{!=0}(sum_k d_t(a^2 g^2) |W_k|^2 k)`` (Case II)
* ``R_cor = R P_H div(w (x) w - w_p (x) w_p)``
* ``carry = (1 - s^2) R`` when the amplitudes are scaled by ``s`` (0 normally)

The gradients left over (``theta^2 rho``, the temporal-block gradient and the
gradient part of ``div Q``) go into the pressure.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blocks as bl
from . import geometry as geo
from .perturbation import PerturbationBundle, commutator_closed_form, strip_nyquist
from .spectral import _resample_back
from .spectral import (GridMismatch, SpaceTimeField, TorusGrid, create_dump, fft_workers,
                       lp_norm_array, outer_self, outer_sym, read_dump, sobolev_norm_array,
                       time_norm, trace_free_part, write_dump)


class StressError(RuntimeError):
    pass


class InitialDataError(StressError, ValueError):
    pass


@dataclass(frozen=True)
class StepConfig:
    case: str = "I"
    alpha: float = 1.0
    dissipation: bool = True

    def __post_init__(self):
        if self.case not in ("I", "II"):
            raise StressError(f"unknown case {self.case!r}")


FIELDS = {"A": 3, "dA": 3, "B": 3, "R": 6, "P": 1}


class FieldStore:
    """Slice-indexed arrays ``[t, c, x, y, z]``, in memory or as dumps in a directory."""

    def __init__(self, grid: TorusGrid, directory: str | Path | None = None):
        self.grid = grid
        self.directory = None if directory is None else Path(directory)
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.arrays: dict[str, np.ndarray] = {}

    def allocate(self, name: str, ncomp: int) -> np.ndarray:
        g = self.grid
        if self.directory is None:
            arr = np.zeros((g.n_time, ncomp) + g.shape)
        else:
            arr = create_dump(self.directory / f"{name}.bin", g, ncomp)
        self.arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def flush(self):
        for arr in self.arrays.values():
            base = arr.base
            while base is not None and not hasattr(base, "flush"):
                base = base.base
            if base is not None:
                base.flush()


def dissipation(grid: TorusGrid, v: np.ndarray, config: StepConfig) -> np.ndarray:
    if not config.dissipation:
        return np.zeros_like(v)
    return grid.frac_laplacian(v, config.alpha)


def _inv_div_leray(grid: TorusGrid, xh: np.ndarray) -> np.ndarray:
    """``R P_H`` of Fourier data, returned in physical space."""
    return grid.ifft(grid.inverse_divergence_hat(grid.leray_hat(xh)))


def _div_tensor(grid: TorusGrid, t: np.ndarray) -> np.ndarray:
    return grid.ifft(grid.tensor_div_hat(grid.fft(t)))


def _zero_mean(grid: TorusGrid, p: np.ndarray) -> np.ndarray:
    return p - p.mean()


class IterationState:
    """A solution ``(A, B, R, P)`` of the relaxed system at level ``q``."""

    def __init__(self, q: int, grid: TorusGrid, store: FieldStore, lam: float,
                 delta: tuple[float, float], config: StepConfig, static: bool = False,
                 time_derivative_mode: str = "analytic", meta: dict | None = None):
        self.q = q
        self.grid = grid
        self.store = store
        self.lam = lam
        self.delta = tuple(delta)
        self.config = config
        self.static = static
        self.time_derivative_mode = time_derivative_mode
        self.meta = dict(meta or {})

    @classmethod
    def from_arrays(cls, q: int, grid: TorusGrid, arrays: dict, lam: float,
                    delta: tuple[float, float], config: StepConfig, **kw) -> "IterationState":
        """Wrap in-memory arrays ``[t, c, x, y, z]`` (``P`` may omit the component axis)."""
        store = FieldStore(grid)
        for name, ncomp in FIELDS.items():
            arr = np.asarray(arrays[name], dtype=float)
            if name == "P" and arr.ndim == 4:
                arr = arr[:, None]
            if arr.shape != (grid.n_time, ncomp) + grid.shape:
                raise GridMismatch(f"{name} has shape {arr.shape}")
            store.arrays[name] = arr
        return cls(q, grid, store, lam, delta, config, **kw)

    # -- views ----------------------------------------------------------------

    @property
    def A(self) -> np.ndarray:
        return self.store["A"]

    @property
    def dA(self) -> np.ndarray:
        return self.store["dA"]

    @property
    def B(self) -> np.ndarray:
        return self.store["B"]

    @property
    def R(self) -> np.ndarray:
        return self.store["R"]

    @property
    def P(self) -> np.ndarray:
        return self.store["P"][:, 0]

    def stress_field(self) -> SpaceTimeField:
        """``R`` as a space-time field; constant states keep an exact zero derivative."""
        if self.static:
            return SpaceTimeField.constant(self.grid, np.array(self.R[0]))
        R = self.R
        return SpaceTimeField(self.grid, (6,), lambda j: np.asarray(R[j]))

    def stress_norm(self) -> float:
        """``||R||_{L^1_t L^1_x}``."""
        g = self.grid
        return time_norm([lp_norm_array(np.asarray(self.R[j]), g, 1) for j in range(g.n_time)], g.dt, 1)

    def invariants(self, slices=None) -> dict:
        g = self.grid
        slices = range(g.n_time) if slices is None else slices
        out = {"B_minus_curl_A": 0.0, "div_A": 0.0, "mean_A": 0.0, "mean_B": 0.0, "trace_R": 0.0}
        for j in slices:
            A, B, R = np.asarray(self.A[j]), np.asarray(self.B[j]), np.asarray(self.R[j])
            sB = max(np.abs(B).max(), 1e-300)
            sA = max(np.abs(A).max(), 1e-300)
            sR = max(np.abs(R).max(), 1e-300)
            vals = {"B_minus_curl_A": np.abs(B - g.curl(A)).max() / sB,
                    "div_A": np.abs(g.div(A)).max() / (sA * max(self.lam, 1.0)),
                    "mean_A": np.abs(A.mean(axis=(1, 2, 3))).max() / sA,
                    "mean_B": np.abs(B.mean(axis=(1, 2, 3))).max() / sB,
                    "trace_R": np.abs(R[0] + R[1] + R[2]).max() / sR}
            for k, v in vals.items():
                out[k] = max(out[k], float(v) if np.any(A) or k == "trace_R" else 0.0)
        return out

    # -- persistence --------------------------------------------------------------

    def describe(self) -> dict:
        return {"q": self.q, "n_space": self.grid.n_space, "n_time": self.grid.n_time,
                "T": self.grid.T, "oversample": self.grid.oversample, "lam": self.lam, "delta": list(self.delta),
                "config": asdict(self.config), "static": self.static,
                "time_derivative_mode": self.time_derivative_mode, "meta": self.meta}

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in FIELDS:
            target = directory / f"{name}.bin"
            src = None if self.store.directory is None else self.store.directory / f"{name}.bin"
            if src is not None and src.exists():
                self.store.flush()
                if src.resolve() != target.resolve():
                    shutil.copyfile(src, target)
            else:
                write_dump(target, self.store[name], self.grid)
        (directory / "state.json").write_text(json.dumps(self.describe(), indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "IterationState":
        directory = Path(directory)
        try:
            info = json.loads((directory / "state.json").read_text())
        except (OSError, ValueError) as exc:
            raise StressError(f"cannot read state in {directory}: {exc}") from exc
        grid = TorusGrid(info["n_space"], info["n_time"], info.get("T", 1.0), info.get("oversample", 1))
        store = FieldStore(grid)
        for name, ncomp in FIELDS.items():
            n, nt, nc, arr = read_dump(directory / f"{name}.bin")
            if (n, nt, nc) != (grid.n_space, grid.n_time, ncomp):
                raise GridMismatch(f"{name}.bin does not match state.json")
            store.arrays[name] = arr
        return cls(info["q"], grid, store, info["lam"], tuple(info["delta"]),
                   StepConfig(**info["config"]), info["static"], info["time_derivative_mode"],
                   info.get("meta"))


# ---------------------------------------------------------------------------
# initial triple and residual
# ---------------------------------------------------------------------------


def _vector_potential(grid: TorusGrid, h: np.ndarray) -> np.ndarray:
    """``curl (-Delta)^{-1} h``; its curl is ``h`` for divergence-free, mean-zero ``h``."""
    return grid.ifft(grid.curl_hat(-grid.inv_laplacian_hat(grid.fft(h))))


def initial_triple(H: SpaceTimeField, alpha: float = 1.0, dissipation_on: bool = True,
                   case: str = "I", lam: float = 2 * math.pi, store_dir: str | Path | None = None,
                   tol: float = 1e-8) -> IterationState:
    """``B = H``, ``A = curl(-Delta)^{-1} H``, ``R = R(d_t A + D A + div(B (x)o B))``, ``P = -|B|^2/3``."""
    g = H.grid
    if H.comp_shape != (3,):
        raise InitialDataError("H must be a vector field")
    config = StepConfig(case, alpha, dissipation_on)
    store = FieldStore(g, store_dir)
    A, dA, B, R, P = (store.allocate(n, c) for n, c in FIELDS.items())
    for j in range(g.n_time):
        h = H.slice(j)
        scale = max(np.abs(h).max(), 1e-300)
        if np.any(h):
            if np.abs(g.div(h)).max() > tol * scale * max(lam, 1.0):
                raise InitialDataError(f"H is not divergence free at slice {j}")
            if np.abs(h.mean(axis=(1, 2, 3))).max() > tol * scale:
                raise InitialDataError(f"H has nonzero mean at slice {j}")
        a = _vector_potential(g, h)
        da = _vector_potential(g, H.time_derivative(j))
        b = g.curl(a)
        x = da + dissipation(g, a, config) + _div_tensor(g, trace_free_part(outer_self(b)))
        A[j], dA[j], B[j] = a, da, b
        R[j] = g.inverse_divergence(x)
        P[j, 0] = _zero_mean(g, -np.einsum("i...,i...->...", b, b) / 3.0)
    mode = "analytic" if (H.static or H.time_derivative_mode == "analytic") else "finite-difference"
    state = IterationState(0, g, store, lam, (1.0, 0.5), config, static=H.static, time_derivative_mode=mode)
    d1 = max(1.0, state.stress_norm())
    state.delta = (d1, d1 / 2)
    return state


@dataclass
class ResidualReport:
    value: float
    tolerance: float
    mode: str
    per_slice: list[float]

    @property
    def passed(self) -> bool:
        return self.value < self.tolerance


RESIDUAL_CONTRACT = {"analytic": 1e-5, "finite-difference": 1e-3}


def residual_check(state: IterationState, time_derivative: str = "stored") -> ResidualReport:
    """``||P_H(d_t A + div(B (x) B) + D A - div R)||_{L^2_{t,x}}`` over the sum of term norms.

    ``time_derivative="finite-difference"`` replaces the stored ``d_t A`` by
    4th-order periodic differences of the stored ``A`` slices.
    """
    g = state.grid
    n = g.n_time
    res, scale, per = [], [], []
    for j in range(n):
        A = np.asarray(state.A[j])
        if time_derivative == "stored":
            dA = np.asarray(state.dA[j])
        else:
            f = lambda i: np.asarray(state.A[i % n])  # noqa: E731
            dA = (-f(j + 2) + 8 * f(j + 1) - 8 * f(j - 1) + f(j - 2)) / (12 * g.dt)
        B = np.asarray(state.B[j])
        terms = [dA, _div_tensor(g, outer_self(B)), dissipation(g, A, state.config),
                 -_div_tensor(g, np.asarray(state.R[j]))]
        r = g.leray(sum(terms))
        res.append(lp_norm_array(r, g, 2))
        scale.append(sum(lp_norm_array(t, g, 2) for t in terms))
        per.append(res[-1] / max(scale[-1], 1e-300))
    total = time_norm(res, g.dt, 2) / max(time_norm(scale, g.dt, 2), 1e-300)
    mode = state.time_derivative_mode if time_derivative == "stored" else "finite-difference"
    return ResidualReport(float(total), RESIDUAL_CONTRACT[mode], mode, per)


def pressure_consistency(state: IterationState) -> float:
    """``P`` against ``Delta^{-1} div(div R - div(B (x) B))`` (both zero mean), relative."""
    g = state.grid
    worst = 0.0
    for j in range(g.n_time):
        B = np.asarray(state.B[j])
        rhs = _div_tensor(g, np.asarray(state.R[j])) - _div_tensor(g, outer_self(B))
        p = g.gradient_potential(rhs)
        P = np.asarray(state.P[j])
        scale = max(np.abs(P).max(), np.abs(p).max(), 1e-300)
        if np.any(P) or np.any(p):
            worst = max(worst, float(np.abs(_zero_mean(g, p) - P).max() / scale))
    return worst


# ---------------------------------------------------------------------------
# identity checks tied to the oscillation terms
# ---------------------------------------------------------------------------


def _mean_squares(blocks: list[bl.BlockBundle]) -> np.ndarray:
    return np.array([float(np.mean(b.profile_square())) for b in blocks])


def oscillation_identity_check(amps: geo.AmplitudeBundle, blocks: list[bl.BlockBundle],
                               amplitude_scale: float = 1.0) -> float:
    """``max |sum_k a_k^2 m_k k (x) k + R - theta^2 rho Id|`` over the time grid (Case I)."""
    if any(b.case != "I" for b in blocks):
        raise StressError("the oscillation identity check applies to Case I blocks")
    m = _mean_squares(blocks)
    basis = amps.directions.packed_basis()
    worst = 0.0
    for j in range(amps.grid.n_time):
        s = amps.slice(j)
        a2 = (amplitude_scale * s.a) ** 2
        total = np.tensordot(basis.T, m[:, None, None, None] * a2, axes=(1, 0)) + amps.stress.slice(j)
        total[:3] -= s.rho
        worst = max(worst, float(np.abs(total).max()))
    return worst


def temporal_cancellation_check(pert: PerturbationBundle, j: int) -> float:
    """``P_H[(g^2-1) Y + d_t v_c]`` against ``-sigma^{-1} h P_H d_t Y``, relative.

    ``d_t v_c`` is assembled with ``h'`` from the closed-form antiderivative, so
    this tests the temporal cancellation rather than restating it.
    """
    g = pert.grid
    s = pert.slice(j)
    tb = pert.temporal
    t = float(g.times()[j])
    gt, ht = float(tb.g(t)), float(tb.h(t))
    lhs = g.leray(g.ifft((gt * gt - 1) * s.directional_hat)) + s.dv_c
    rhs = -ht / tb.sigma * g.ifft(g.leray_hat(s.directional_rate_hat))
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), np.abs(s.dv_c).max(), 1e-300)
    return float(np.abs(lhs - rhs).max() / scale)


# ---------------------------------------------------------------------------
# the new stress
# ---------------------------------------------------------------------------

TERMS_I = ("R_lin", "R_osc1", "R_osc2", "R_cor")
TERMS_II = ("R_lin", "R_osc1", "R_osc2", "R_osc3", "R_cor")
PRESSURE_PARTS = ("previous", "rho", "temporal", "oscillation", "remainder")


@dataclass
class StressBreakdown:
    case: str
    terms: tuple[str, ...]
    slice_norms: dict[str, list[float]]           # L^1_x per slice, per term
    pressure_norms: dict[str, list[float]]        # L^2_x per slice, per pressure addend
    two_path_defect: float
    temporal_cancellation: float
    parts: dict[str, np.ndarray] | None = None    # only with keep_terms
    parameters: dict = field(default_factory=dict)
    dt: float = 1.0
    previous_norm: float = math.inf

    def norm(self, name: str) -> float:
        """``||name||_{L^1_t L^1_x}``."""
        return time_norm(self.slice_norms[name], self.dt, 1)

    def table(self) -> list[dict]:
        """One JSON row per part; ``pass`` means the norm is below ``||R_q||_{L^1}``."""
        rows = []
        for name in self.terms + ("carry", "R_total"):
            value = self.norm(name)
            rows.append({"term": name, "norm_L1L1": value,
                         "bound_formula": BOUND_FORMULAS.get(name, ""),
                         "parameters": self.parameters,
                         "pass": bool(value < self.previous_norm) or (name == "carry" and value == 0.0)})
        return rows

    def to_json(self) -> str:
        return json.dumps(self.table(), indent=2, sort_keys=True, default=_json_default) + "\n"


BOUND_FORMULAS = {
    "R_lin": "||R d_t v_p|| + ||R D v|| + ||R div(B w + w B)||",
    "R_osc1": "lambda^{-1} r^{2/eta-2} (Case II: lambda^{-1} r^{2/eta-3} ell^{1/eta-1})",
    "R_osc2": "sigma^{-1}",
    "R_osc3": "mu^{-1} (1 + sigma tau) r^{2/eta-2} ell^{1/eta-1}",
    "R_cor": "lambda^{-1} r^{2/eta-2}",
    "carry": "(1 - s^2) ||R_q||",
    "R_total": "delta_{q+2}",
}


@dataclass
class StepParameters:
    lam: float
    r: float
    tau: float
    sigma: int
    ell: float | None = None
    mu: float | None = None

    @classmethod
    def from_numeric(cls, p) -> "StepParameters":
        return cls(p.lam, p.r, p.tau, int(p.sigma), getattr(p, "ell", None), getattr(p, "mu", None))


@dataclass
class StepResult:
    state: IterationState
    breakdown: StressBreakdown
    perturbation: PerturbationBundle
    directions: geo.DirectionSet


def assemble_stress(state: IterationState, pert: PerturbationBundle, store_dir: str | Path | None = None,
                    keep_terms: bool = False, lam_next: float | None = None,
                    decrease_factor: float = 0.5) -> tuple[StressBreakdown, IterationState]:
    """Build ``(A, B, R, P)`` at level ``q + 1`` and the stress breakdown."""
    g = state.grid
    if pert.grid != g:
        raise GridMismatch("perturbation and state live on different grids")
    if pert.case != state.config.case:
        raise StressError(f"state is Case {state.config.case}, perturbation is Case {pert.case}")
    case = pert.case
    terms = TERMS_I if case == "I" else TERMS_II
    cfg = state.config
    s2 = pert.amplitude_scale**2
    tb = pert.temporal
    basis = pert.amps.directions.packed_basis()
    m = pert.mean_tensor
    store = FieldStore(g, store_dir)
    A1, dA1, B1, R1, P1 = (store.allocate(n, c) for n, c in FIELDS.items())
    names = terms + ("carry", "R_total")
    norms = {k: [] for k in names}
    pnorms = {k: [] for k in PRESSURE_PARTS}
    kept = {k: np.zeros((g.n_time, 6) + g.shape) for k in names} if keep_terms else None
    defect_abs = defect_scale = 0.0
    cancel = 0.0
    for j in range(g.n_time):
        s = pert.slice(j)
        t = float(g.times()[j])
        gt, dgt, ht = float(tb.g(t)), float(tb.g(t, 1)), float(tb.h(t))
        a, da = pert._amplitudes(j)
        A, dA = np.asarray(state.A[j]), np.asarray(state.dA[j])
        B, R, P = np.asarray(state.B[j]), np.asarray(state.R[j]), np.asarray(state.P[j])
        v, w, w_p = s.v_total, s.w_total, s.w_p
        Dv = dissipation(g, v, cfg)
        cross = _div_tensor(g, 2 * outer_sym(B, w))
        parts = {}
        parts["R_lin"] = _inv_div_leray(g, g.fft(s.dv_p + Dv + cross))
        parts["R_osc2"] = (-ht / tb.sigma) * g.ifft(g.inverse_divergence_hat(g.leray_hat(s.directional_rate_hat)))
        a2 = a * a
        Q = (outer_self(w_p) - np.tensordot(basis.T, a2, axes=(1, 0))
             - (gt * gt - 1) * np.tensordot(basis.T, m[:, None, None, None] * a2, axes=(1, 0)))
        divQ = _div_tensor(g, Q)
        if case == "I":
            parts["R_osc1"] = _inv_div_leray(g, g.fft(divQ))
        else:
            sq = np.array([b.profile_square(j) for b in pert.blocks])
            d_a2g2 = 2 * a * da * gt * gt + a2 * 2 * gt * dgt
            src = np.einsum("ki,k...->i...", pert.k, d_a2g2 * sq)
            src_h = g.fft(src)
            src_h[..., 0, 0, 0] = 0
            parts["R_osc3"] = (-1.0 / pert.mu) * _inv_div_leray(g, src_h)
            parts["R_osc1"] = _inv_div_leray(g, g.fft(divQ + s.dv_t)) - parts["R_osc3"]
        parts["R_cor"] = _inv_div_leray(g, g.fft(_div_tensor(g, outer_self(w) - outer_self(w_p))))
        parts["carry"] = (1.0 - s2) * R
        total = sum(parts[k] for k in terms) + parts["carry"]
        parts["R_total"] = total

        # direct path: R P_H of the whole expanded equation
        div_carry = _div_tensor(g, parts["carry"])
        X_total = (_div_tensor(g, R) + s.dv_total + Dv + cross + _div_tensor(g, outer_self(w)))
        direct = parts["carry"] + _inv_div_leray(g, g.fft(X_total - div_carry))
        defect_abs = max(defect_abs, float(np.abs(total - direct).max()))
        defect_scale = max(defect_scale, float(np.abs(direct).max()))
        if np.any(s.dv_c):
            cancel = max(cancel, temporal_cancellation_check(pert, j))

        # pressure
        increment = -g.gradient_potential(X_total - div_carry)
        amp = pert.amps.slice(j)
        pp = {"previous": P,
              "rho": -s2 * _zero_mean(g, amp.rho) if np.any(amp.a) else np.zeros(g.shape),
              "temporal": -(gt * gt - 1) * g.ifft(g.inv_laplacian_hat(g.div_hat(s.directional_hat))),
              "oscillation": -g.gradient_potential(divQ)}
        Pn = _zero_mean(g, P + increment)
        pp["remainder"] = Pn - pp["previous"] - pp["rho"] - pp["temporal"] - pp["oscillation"]

        A1[j], dA1[j], B1[j], R1[j], P1[j, 0] = A + v, dA + s.dv_total, B + w, total, Pn
        for k in names:
            norms[k].append(lp_norm_array(parts[k], g, 1))
            if keep_terms:
                kept[k][j] = parts[k]
        for k in PRESSURE_PARTS:
            pnorms[k].append(lp_norm_array(pp[k], g, 2))
    store.flush()
    defect = defect_abs / defect_scale if defect_scale > 0 else defect_abs
    modes = {state.time_derivative_mode, pert.time_derivative_mode}
    mode = "analytic" if modes == {"analytic"} else "finite-difference"
    blocks0 = pert.blocks[0]
    params = {"case": case, "lam": blocks0.lam, "r": blocks0.r, "tau": tb.tau, "sigma": tb.sigma,
              "ell": blocks0.ell, "mu": pert.mu, "amplitude_scale": pert.amplitude_scale,
              "alpha": cfg.alpha, "dissipation": cfg.dissipation}
    breakdown = StressBreakdown(case, terms, norms, pnorms, defect, cancel, kept, params, dt=g.dt,
                                previous_norm=state.stress_norm())
    d2 = state.delta[1]
    nxt = IterationState(state.q + 1, g, store, lam_next if lam_next is not None else blocks0.lam,
                         (d2, d2 * decrease_factor), cfg, static=False, time_derivative_mode=mode,
                         meta={"previous_stress_L1": state.stress_norm()})
    return breakdown, nxt


def assemble_stress_case1(state: IterationState, pert: PerturbationBundle, **kw):
    if pert.case != "I":
        raise StressError("Case I assembly needs a Case I perturbation")
    return assemble_stress(state, pert, **kw)


def assemble_stress_case2(state: IterationState, pert: PerturbationBundle, **kw):
    if pert.case != "II":
        raise StressError("Case II assembly needs a Case II perturbation")
    return assemble_stress(state, pert, **kw)


def build_perturbation(state: IterationState, params: StepParameters,
                       directions: geo.DirectionSet | None = None, amplitude_scale: float = 1.0,
                       min_cells: float = 4.0, select_shifts: bool = True) -> tuple[PerturbationBundle, geo.DirectionSet]:
    g = state.grid
    case = state.config.case
    L = directions if directions is not None else geo.build_direction_set()
    kw = dict(ell=params.ell, mu=params.mu) if case == "II" else {}
    placed, blocks = bl.build_blocks(L, case, params.lam, params.r, g, min_cells=min_cells,
                                     select=select_shifts, **kw)
    amps = geo.amplitudes(state.stress_field(), placed)
    temporal = bl.temporal_blocks(params.tau, params.sigma, g.n_time)
    pert = PerturbationBundle(case, amps, blocks, temporal, mu=params.mu if case == "II" else None,
                              amplitude_scale=amplitude_scale)
    return pert, placed


def step(state: IterationState, params: StepParameters, directions: geo.DirectionSet | None = None,
         amplitude_scale: float = 1.0, min_cells: float = 4.0, store_dir: str | Path | None = None,
         keep_terms: bool = False, workers: int = 1, check_tol: float | None = 1e-8) -> StepResult:
    """One iteration: perturbation, new stress, new pressure."""
    with fft_workers(workers):
        pert, placed = build_perturbation(state, params, directions, amplitude_scale, min_cells)
        if check_tol is not None:
            pert.check(tol=check_tol)
        breakdown, nxt = assemble_stress(state, pert, store_dir=store_dir, keep_terms=keep_terms)
    return StepResult(nxt, breakdown, pert, placed)


def resolved_term_scaling(case: str, lam_indices, grid: TorusGrid, amplitude: np.ndarray,
                          direction=None, r: float = 1.0, ell: float | None = None,
                          mu: float | None = None, j: int = 0, min_cells: float = 1.0,
                          n_lambda: int = 3, profile_oversample: int = 1,
                          terms=("R_osc1", "R_cor")) -> list[dict]:
    """``L^1`` norms of the oscillation and corrector integrands for one resolved block.

    ``R_osc1``: ``R P_H[(k . grad a^2)(|W|^2 - m) k]``, the part of ``div(a^2 W (x) W)``
    where the derivative falls on the amplitude.  ``R_cor``:
    ``R P_H div(w_p (x) w_c + w_c (x) w_p + w_c (x) w_c)`` with ``w_c`` from the
    closed-form commutator, so grid defects of the block do not enter.

    With ``profile_oversample = m > 1`` the ``|W|^2`` factor of ``R_osc1`` is
    sampled on an ``m``-times finer grid and spectrally restricted, which keeps
    aliased profile harmonics out of the low modes that dominate ``R``.
    """
    if direction is None:
        direction = geo.build_direction_set()[0]
    a = np.asarray(amplitude, dtype=float)
    rows = []
    fine = TorusGrid(grid.n_space * profile_oversample, grid.n_time, grid.T)

    def block(on: TorusGrid):
        if case == "I":
            return bl.mikado_block(direction, r, lam, on, n_lambda, min_cells=min_cells)
        return bl.jet_block(direction, r, ell, mu, lam, on, n_lambda, min_cells=min_cells)

    for m_idx in lam_indices:
        lam = 2 * math.pi * m_idx
        b = block(grid)
        row = {"lam": lam, "r": r, "w_p_L2": lp_norm_array(a[None] * b.W(j), grid, 2)}
        if "R_osc1" in terms:
            if profile_oversample > 1:
                sq = _resample_back(grid, block(fine).profile_square(j), fine.n_space)
            else:
                sq = b.profile_square(j)
            k = b.k
            ka2 = np.einsum("i,i...->...", k, grid.grad(a * a))
            osc = _inv_div_leray(grid, grid.fft(k[:, None, None, None] * (ka2 * (sq - sq.mean()))[None]))
            row["R_osc1"] = lp_norm_array(osc, grid, 1)
        if "R_cor" in terms:
            w_p = a[None] * b.W(j)
            w_c = commutator_closed_form(a, b, j)
            cor = _inv_div_leray(grid, grid.fft(_div_tensor(grid, 2 * outer_sym(w_p, w_c) + outer_self(w_c))))
            row["R_cor"] = lp_norm_array(cor, grid, 1)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# inductive inequalities
# ---------------------------------------------------------------------------


@dataclass
class CheckReport:
    rows: list[dict]

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.rows)

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["term"] == name:
                return r
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def _time_support(arrs, n_time: int) -> np.ndarray:
    return np.array([any(np.any(np.asarray(a[j])) for a in arrs) for j in range(n_time)])


def _neighbourhood(mask: np.ndarray, radius: float, dt: float) -> np.ndarray:
    n = len(mask)
    idx = np.flatnonzero(mask)
    out = np.zeros(n, dtype=bool)
    if idx.size == 0:
        return out
    steps = int(math.floor(radius / dt + 1e-12))
    for i in idx:
        for s in range(-steps, steps + 1):
            out[(i + s) % n] = True
    return out


def inductive_check(prev: IterationState, nxt: IterationState, M: float = 20.0,
                    gamma: float | None = None, p: float | None = None) -> CheckReport:
    """Pass/fail for the inductive inequalities at one step.

    ``gamma``/``p`` select the ``L^gamma_t W^{1,p}_x`` norm (defaults: Case I
    ``L^1_t W^{1,inf}_x``, Case II ``L^inf_t W^{1,1}_x``).
    """
    g = prev.grid
    if nxt.grid != g:
        raise GridMismatch("states live on different grids")
    case = prev.config.case
    if gamma is None:
        gamma = 1.0 if case == "I" else math.inf
    if p is None:
        p = math.inf if case == "I" else 1.0
    d1, d2 = prev.delta
    n = g.n_time
    l2, l1t_l2x, w1p = [], [], []
    h3, h2 = [], []
    for j in range(n):
        w = np.asarray(nxt.B[j]) - np.asarray(prev.B[j])
        l2.append(lp_norm_array(w, g, 2))
        w1p.append(sobolev_norm_array(w, g, 1, p))
        h3.append(sobolev_norm_array(np.asarray(nxt.A[j]), g, 3, 2))
        h2.append(sobolev_norm_array(np.asarray(nxt.B[j]), g, 2, 2))
    r_prev, r_next = prev.stress_norm(), nxt.stress_norm()
    lam = nxt.lam
    rows = []

    def add(term, value, bound, formula, ok=None):
        ok = bool(value <= bound) if ok is None else bool(ok)
        rows.append({"term": term, "value": float(value), "bound": float(bound),
                     "bound_formula": formula, "pass": ok,
                     "parameters": {"q": prev.q, "M": M, "delta_q1": d1, "delta_q2": d2,
                                    "gamma": _fmt(gamma), "p": _fmt(p), "lam_next": lam}})

    add("iter-1", time_norm(l2, g.dt, 2), M * math.sqrt(d1), "M delta_{q+1}^{1/2}")
    add("iter-2", time_norm(l2, g.dt, 1), math.sqrt(d2), "delta_{q+2}^{1/2}")
    add("iter-3", time_norm(w1p, g.dt, gamma), math.sqrt(d2), "delta_{q+2}^{1/2}")
    add("induct-R", r_next, d2, "delta_{q+2}")
    add("stress-decrease", r_next, r_prev, "||R_q||_{L^1}", ok=r_next < r_prev)
    add("induct-A", max(h3), lam**5, "lambda_{q+1}^5")
    add("induct-B", max(h2), lam**5, "lambda_{q+1}^5")
    prev_sup = _time_support([prev.A, prev.B, prev.R], n)
    next_sup = _time_support([nxt.A, nxt.B, nxt.R], n)
    hood = _neighbourhood(prev_sup, math.sqrt(d2), g.dt)
    outside = int(np.count_nonzero(next_sup & ~hood))
    add("iter-supp", outside, 0, "supp_t(A,B,R)_{q+1} in N_{delta_{q+2}^{1/2}}(supp_t(A,B,R)_q)")
    pert_sup = np.array([np.any(np.asarray(nxt.B[j]) != np.asarray(prev.B[j])) for j in range(n)])
    stress_sup = _time_support([prev.R], n)
    add("perturbation-support", int(np.count_nonzero(pert_sup & ~stress_sup)), 0, "supp_t w in supp_t R_q")
    add("perturbation-at-t0", float(l2[0]), 0.0, "w(t=0) = 0")
    return CheckReport(rows)


def _fmt(x: float):
    return "inf" if math.isinf(x) else x


__all__ = [
    "StressError", "InitialDataError", "StepConfig", "FieldStore", "IterationState", "initial_triple",
    "residual_check", "ResidualReport", "pressure_consistency", "oscillation_identity_check",
    "temporal_cancellation_check", "StressBreakdown", "StepParameters", "StepResult", "assemble_stress",
    "assemble_stress_case1", "assemble_stress_case2", "build_perturbation", "step", "CheckReport",
    "inductive_check", "resolved_term_scaling",
]
