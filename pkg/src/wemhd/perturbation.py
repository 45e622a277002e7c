"""Perturbations of the vector potential and of the magnetic field.

For each time slice the bundle assembles

* ``v_p = curl(sum_k a_k g W^c_k)`` and ``w_p = sum_k a_k g W_k``;
* ``w_c = curl(v_p) - w_p``, the commutator part (its closed form
  ``g (grad a x curl W^c + curl(grad a x W^c)) [+ a g Wtilde]`` is kept as a
  diagnostic, since on an under-resolved grid the two differ);
* ``v_c = -sigma^{-1} h P_H(sum_k M_k grad a_k^2)`` with ``M_k`` the grid mean
  of ``W_k (x) W_k``, and ``w_cc = curl v_c``;
* Case II only: ``v_t = -mu^{-1} P_H P_{!=0}(g^2 sum_k a_k^2 |W_k|^2 k)`` and
  ``w_t = curl v_t``.

``curl v_c`` does not vanish in general (``curl(k (k . grad f)) = grad(k . grad f) x k``),
so ``w_cc`` is carried explicitly and ``w_total = curl v_total`` holds on the grid.
Time derivatives of every potential are assembled in closed form from the
amplitude derivatives and the block derivatives.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockBundle, TemporalBlocks
from .geometry import AmplitudeBundle
from .spectral import (GridMismatch, SpaceTimeField, TorusGrid, derivative_tensor,
                       lp_norm_array, pointwise_magnitude, time_norm)


class PerturbationError(RuntimeError):
    pass


def strip_nyquist(grid: TorusGrid, vh: np.ndarray) -> np.ndarray:
    """Zero the Fourier modes on the Nyquist planes (those with no derivative)."""
    kx, ky, kz = grid._k_int
    half = grid.n_space // 2
    mask = (np.abs(kx) == half) | (np.abs(ky) == half) | (kz == half)
    out = vh.copy()
    out[..., mask] = 0
    return out


@dataclass
class PerturbationSlice:
    t: float
    v_p: np.ndarray
    v_c: np.ndarray
    w_p: np.ndarray
    w_c: np.ndarray
    w_cc: np.ndarray
    dv_p: np.ndarray
    dv_c: np.ndarray
    v_t: np.ndarray | None = None
    w_t: np.ndarray | None = None
    dv_t: np.ndarray | None = None
    # Fourier coefficients of sum_k m_k k (k . grad a_k^2) and of its time derivative
    directional_hat: np.ndarray | None = None
    directional_rate_hat: np.ndarray | None = None

    @property
    def v_total(self) -> np.ndarray:
        out = self.v_p + self.v_c
        return out if self.v_t is None else out + self.v_t

    @property
    def w_total(self) -> np.ndarray:
        out = self.w_p + self.w_c + self.w_cc
        return out if self.w_t is None else out + self.w_t

    @property
    def dv_total(self) -> np.ndarray:
        out = self.dv_p + self.dv_c
        return out if self.dv_t is None else out + self.dv_t

    @property
    def w_corr(self) -> np.ndarray:
        """``w_total - w_p``."""
        out = self.w_c + self.w_cc
        return out if self.w_t is None else out + self.w_t


COMPONENTS = ("v_p", "v_c", "v_t", "w_p", "w_c", "w_cc", "w_t", "v_total", "w_total")


class PerturbationBundle:
    """Per-slice assembly of the perturbation; slices are computed on demand."""

    def __init__(self, case: str, amps: AmplitudeBundle, blocks: list[BlockBundle],
                 temporal: TemporalBlocks, mu: float | None = None, amplitude_scale: float = 1.0):
        grid = amps.grid
        if any(b.grid != grid for b in blocks):
            raise GridMismatch("blocks and amplitudes live on different grids")
        if len(blocks) != amps.n_directions:
            raise PerturbationError("one block per direction required")
        if case not in ("I", "II"):
            raise PerturbationError(f"unknown case {case!r}")
        if case == "II" and (mu is None or mu <= 0):
            raise PerturbationError("Case II needs mu > 0")
        if any(b.case != case for b in blocks):
            raise PerturbationError(f"blocks do not belong to Case {case}")
        self.case = case
        self.grid = grid
        self.amps = amps
        self.blocks = blocks
        self.temporal = temporal
        self.mu = mu
        self.amplitude_scale = amplitude_scale
        self.k = np.array([b.k for b in blocks])
        self.mean_tensor = self._quadrature_means()
        self._cache: dict[int, PerturbationSlice] = {}

    # -- constants ------------------------------------------------------------

    def _quadrature_means(self) -> np.ndarray:
        """``m_k``: grid mean of ``|W_k|^2`` (over space, and over time in Case II)."""
        if self.case == "I":
            return np.array([float(np.mean(b.profile_square())) for b in self.blocks])
        n = self.grid.n_time
        return np.array([float(np.mean([np.mean(b.profile_square(j)) for j in range(n)]))
                         for b in self.blocks])

    @property
    def time_derivative_mode(self) -> str:
        return self.amps.time_derivative_mode

    # -- helpers --------------------------------------------------------------------

    def _amplitudes(self, j: int):
        s = self.amps.slice(j, derivative=True)
        return s.a * self.amplitude_scale, s.da * self.amplitude_scale

    def _directional_sum(self, scalars: np.ndarray) -> np.ndarray:
        """``sum_k m_k k (k . grad f_k)`` assembled in Fourier space."""
        g = self.grid
        ikx, iky, ikz = g.derivative_symbols
        n = g.n_space
        out = np.zeros((3, n, n, n // 2 + 1), dtype=complex)
        for k, m, f in zip(self.k, self.mean_tensor, scalars):
            if not np.any(f):
                continue
            fh = g.fft(f)
            dk = (k[0] * ikx + k[1] * iky + k[2] * ikz) * fh
            out += m * k[:, None, None, None] * dk[None]
        return out

    def _along_k(self, scalars) -> np.ndarray:
        return np.einsum("ki,k...->i...", self.k, scalars)

    # -- assembly -----------------------------------------------------------------------

    def slice(self, j: int) -> PerturbationSlice:
        hit = self._cache.get(j)
        if hit is None:
            hit = self._assemble(j)
            self._cache = {j: hit}
        return hit

    def _assemble(self, j: int) -> PerturbationSlice:
        g = self.grid
        t = float(g.times()[j])
        tb = self.temporal
        gt, dgt = float(tb.g(t)), float(tb.g(t, 1))
        ht, dht = float(tb.h(t)), float(tb.h_rate(t))
        a, da = self._amplitudes(j)
        blocks = self.blocks
        scale = blocks[0].potential_scale
        if self.case == "I":
            Phi = np.array([b.Phi for b in blocks])
            phi = np.array([b.phi for b in blocks])
            pot = scale * Phi
            profile = phi
            dpot = np.zeros_like(pot)
            dprofile = np.zeros_like(profile)
        else:
            psi = np.array([b.psi(j) for b in blocks])
            dpsi = np.array([b.dpsi_dt(j) for b in blocks])
            Phi = np.array([b.Phi for b in blocks])
            phi = np.array([b.phi for b in blocks])
            pot = scale * psi * Phi
            profile = psi * phi
            dpot = scale * dpsi * Phi
            dprofile = dpsi * phi

        X = self._along_k(a * pot) * gt
        dX = self._along_k((da * gt + a * dgt) * pot + a * gt * dpot)
        v_p = g.curl(X)
        dv_p = g.curl(dX)
        w_p = self._along_k(a * profile) * gt
        w_c = g.curl(v_p) - w_p

        a2 = a * a
        Y = self._directional_sum(a2)
        dY = self._directional_sum(2 * a * da)
        v_c = (-ht / tb.sigma) * g.ifft(g.leray_hat(Y))
        dv_c = -(dht * g.ifft(g.leray_hat(Y)) + ht * g.ifft(g.leray_hat(dY))) / tb.sigma
        w_cc = g.curl(v_c)
        out = PerturbationSlice(t, v_p, v_c, w_p, w_c, w_cc, dv_p, dv_c,
                                directional_hat=Y, directional_rate_hat=dY)
        if self.case == "II":
            sq = profile * profile
            Z = self._along_k(a2 * sq)
            dZ = self._along_k(2 * a * da * sq + a2 * 2 * profile * dprofile)
            g2, dg2 = gt * gt, 2 * gt * dgt
            out.v_t = -self.temporal_corrector(Z * g2)
            out.dv_t = -self.temporal_corrector(Z * dg2 + dZ * g2)
            out.w_t = g.curl(out.v_t)
        return out

    def temporal_corrector(self, Z: np.ndarray) -> np.ndarray:
        """``mu^{-1} P_H P_{!=0}`` of ``Z`` with the Nyquist planes removed."""
        g = self.grid
        zh = strip_nyquist(g, g.fft(Z))
        zh[..., 0, 0, 0] = 0
        return g.ifft(g.leray_hat(zh)) / self.mu

    # -- space-time views -------------------------------------------------------------------

    def field(self, name: str) -> SpaceTimeField:
        if name not in COMPONENTS:
            raise PerturbationError(f"unknown component {name!r}")
        if name in ("v_t", "w_t") and self.case == "I":
            return SpaceTimeField.zeros(self.grid, (3,))
        deriv = {"v_p": "dv_p", "v_c": "dv_c", "v_t": "dv_t", "v_total": "dv_total"}.get(name)
        value = lambda j: getattr(self.slice(j), name)  # noqa: E731
        dt = (lambda j: getattr(self.slice(j), deriv)) if deriv else None  # noqa: E731
        mode = self.time_derivative_mode if deriv else None
        return SpaceTimeField(self.grid, (3,), value, dt, mode)

    # -- diagnostics ----------------------------------------------------------------------------

    def closed_form_commutator(self, j: int) -> np.ndarray:
        """``w_c`` from its product-rule expansion, block derivatives in closed form."""
        g = self.grid
        a, _ = self._amplitudes(j)
        gt = float(self.temporal.g(g.times()[j]))
        out = np.zeros((3,) + g.shape)
        for ai, b in zip(a, self.blocks):
            if np.any(ai):
                out += commutator_closed_form(ai, b, j)
        return gt * out

    def commutator_defect(self, j: int) -> float:
        """Grid ``w_c`` against the closed form, relative to ``max |w_total|``."""
        s = self.slice(j)
        diff = np.abs(self.closed_form_commutator(j) - s.w_c).max()
        return float(diff / max(np.abs(s.w_total).max(), 1e-300))

    def invariants(self, j: int) -> dict:
        """Relative residuals of the bundle identities at slice ``j``."""
        g = self.grid
        s = self.slice(j)
        lam = self.blocks[0].lam
        wscale = max(np.abs(s.w_total).max(), 1e-300)
        vscale = max(np.abs(s.v_total).max(), 1e-300)
        vc_scale = max(np.abs(s.v_c).max(), 1e-300)
        out = {
            "div_v_total": float(np.abs(g.div(s.v_total)).max() / (vscale * lam)),
            "div_w_total": float(np.abs(g.div(s.w_total)).max() / (wscale * lam)),
            "w_total_minus_curl_v_total": float(np.abs(s.w_total - g.curl(s.v_total)).max() / wscale),
            "w_p_plus_w_c_minus_curl_v_p": float(np.abs(s.w_p + s.w_c - g.curl(s.v_p)).max() / wscale),
            "curl_v_c": float(np.abs(s.w_cc).max() / (vc_scale * lam)) if np.any(s.v_c) else 0.0,
            "mean_v_total": float(np.abs(s.v_total.mean(axis=(1, 2, 3))).max() / vscale),
        }
        return out

    def check(self, slices=None, tol: float = 1e-8) -> dict:
        """Raise :class:`PerturbationError` naming the first identity above ``tol``.

        ``curl_v_c`` is reported but not enforced; it is not an identity.
        """
        slices = range(self.grid.n_time) if slices is None else slices
        worst: dict[str, float] = {}
        for j in slices:
            for name, value in self.invariants(j).items():
                worst[name] = max(worst.get(name, 0.0), value)
                if name != "curl_v_c" and value > tol:
                    raise PerturbationError(f"identity {name} fails at slice {j}: {value:.3e} > {tol:g}")
        return worst

    def time_support(self) -> dict:
        """Slices where each component is nonzero, and the amplitude support."""
        n = self.grid.n_time
        amp = np.array([np.any(self.amps.slice(j).a) for j in range(n)])
        comps = {}
        for name in ("v_p", "v_c", "w_p", "w_c", "w_cc") + (("v_t", "w_t") if self.case == "II" else ()):
            comps[name] = np.array([np.any(getattr(self.slice(j), name)) for j in range(n)])
        contained = all(np.all(~m | amp) for m in comps.values())
        return {"amplitudes": amp, "components": comps, "contained": contained}

    def vt_identity_residual(self, j: int) -> dict:
        """Case II check of the temporal-corrector identity at slice ``j``.

        ``d_t v_t + sum_k P_{!=0}(a^2 g^2 div(W_k (x) W_k))`` against
        ``mu^{-1} grad Laplace^{-1} div sum_k P_{!=0} d_t(a^2 g^2 |W_k|^2 k)
        - mu^{-1} sum_k P_{!=0}(d_t(a^2 g^2) |W_k|^2 k)``.  ``div(W (x) W)`` is
        taken in closed form (``mu^{-1} d_t |W|^2 k``), so the residual measures
        the corrector assembly; ``spectral_defect`` compares the closed form with
        the spectral divergence on the grid.
        """
        if self.case != "II":
            raise PerturbationError("the temporal-corrector identity is a Case II statement")
        g = self.grid
        s = self.slice(j)
        a, da = self._amplitudes(j)
        t = float(g.times()[j])
        gt, dgt = float(self.temporal.g(t)), float(self.temporal.g(t, 1))
        profile = np.array([b.psi(j) * b.phi for b in self.blocks])
        dprofile = np.array([b.dpsi_dt(j) * b.phi for b in self.blocks])
        sq, dsq = profile**2, 2 * profile * dprofile
        a2g2, d_a2g2 = a * a * gt * gt, 2 * a * da * gt * gt + a * a * 2 * gt * dgt

        def pnz(v):
            vh = strip_nyquist(g, g.fft(v))
            vh[..., 0, 0, 0] = 0
            return vh

        divWW = self._along_k(a2g2 * dsq) / self.mu
        lhs = s.dv_t + g.ifft(pnz(divWW))
        total_h = pnz(self._along_k(d_a2g2 * sq + a2g2 * dsq))
        grad_part = g.ifft(g.grad_hat(g.inv_laplacian_hat(g.div_hat(total_h)))) / self.mu
        rhs = grad_part - g.ifft(pnz(self._along_k(d_a2g2 * sq))) / self.mu
        scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-300)
        spectral = np.zeros((3,) + g.shape)
        for ai, b in zip(a, self.blocks):
            spectral += (ai * ai * gt * gt)[None] * g.tensor_div(
                np.stack([b.W(j)[p] * b.W(j)[q] for p, q in ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))]))
        return {"residual": float(np.abs(lhs - rhs).max() / scale),
                "spectral_defect": float(np.abs(spectral - divWW).max() / max(np.abs(divWW).max(), 1e-300))}


def commutator_closed_form(a: np.ndarray, block: BlockBundle, j: int = 0) -> np.ndarray:
    """``curl curl(a W^c) - a W`` for one block, without differentiating the block on the grid.

    Expands to ``grad a x curl W^c + curl(grad a x W^c) [+ a Wtilde]``; the
    derivatives of ``a`` are spectral, those of the block come from the closed
    form of ``grad Phi`` and ``psi'``.
    """
    g = block.grid
    d = g.derivative_symbols
    k = block.k
    kk = k[:, None, None, None]
    ah = g.fft(a)
    grad_a = g.ifft(g.grad_hat(ah))
    lap_a = g.ifft(sum(di * di for di in d) * ah)
    k_grad_grad_a = g.ifft(g.grad_hat(sum(ki * di for ki, di in zip(k, d)) * ah))
    scale = block.potential_scale
    grad_Phi = block.grad_potential_profile()
    Phi = block.Phi
    if block.static:
        psi, dpsi = 1.0, 0.0
    else:
        psi, dpsi = block.psi(j), block.psi(j, 1) * block.lam * block.r * block.n_lambda
    curl_Wc = scale * psi * np.cross(grad_Phi, kk, axis=0)
    grad_psi_Phi = psi * grad_Phi + (Phi * dpsi) * kk
    out = np.cross(grad_a, curl_Wc, axis=0)
    out += grad_a * (scale * Phi * dpsi)
    out += scale * psi * Phi * (k_grad_grad_a - kk * lap_a)
    out -= scale * kk * np.einsum("i...,i...->...", grad_a, grad_psi_Phi)
    if not block.static:
        out += a * block.Wtilde(j)
    return out


def assemble_case1(amps: AmplitudeBundle, blocks: list[BlockBundle], temporal: TemporalBlocks,
                   amplitude_scale: float = 1.0) -> PerturbationBundle:
    return PerturbationBundle("I", amps, blocks, temporal, amplitude_scale=amplitude_scale)


def assemble_case2(amps: AmplitudeBundle, blocks: list[BlockBundle], temporal: TemporalBlocks,
                   mu: float, amplitude_scale: float = 1.0) -> PerturbationBundle:
    return PerturbationBundle("II", amps, blocks, temporal, mu=mu, amplitude_scale=amplitude_scale)


# ---------------------------------------------------------------------------
# norm tables
# ---------------------------------------------------------------------------


@dataclass
class NormReport:
    rows: list[dict] = field(default_factory=list)

    def value(self, component: str, N: int, gamma: float, eta: float) -> float:
        for r in self.rows:
            if (r["component"], r["N"], r["gamma"], r["eta"]) == (component, N, gamma, eta):
                return r["value"]
        raise KeyError((component, N, gamma, eta))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "N", "gamma", "eta", "value"])
        for r in self.rows:
            w.writerow([r["component"], r["N"], _fmt_exp(r["gamma"]), _fmt_exp(r["eta"]),
                        f"{r['value']:.12e}"])
        return buf.getvalue()


def _fmt_exp(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:g}"


def measure_bundle(bundle: PerturbationBundle, gammas=(1.0, 2.0, math.inf), etas=(1.0, 2.0),
                   orders=(0, 1), components=None) -> NormReport:
    """``||grad^N c||_{L^gamma_t L^eta_x}`` for each component ``c``."""
    g = bundle.grid
    if components is None:
        components = ["v_p", "v_c", "w_p", "w_c", "w_cc"] + (["v_t", "w_t"] if bundle.case == "II" else [])
    per_slice = {(c, N, eta): [] for c in components for N in orders for eta in etas}
    for j in range(g.n_time):
        s = bundle.slice(j)
        for c in components:
            arr = getattr(s, c)
            for N in orders:
                mag = pointwise_magnitude(derivative_tensor(arr, g, N) if N else arr, g)
                for eta in etas:
                    per_slice[(c, N, eta)].append(lp_norm_array(mag, g, eta))
    rep = NormReport()
    for (c, N, eta), values in per_slice.items():
        for gamma in gammas:
            rep.rows.append({"component": c, "N": N, "gamma": gamma, "eta": eta,
                             "value": time_norm(values, g.dt, gamma)})
    return rep
