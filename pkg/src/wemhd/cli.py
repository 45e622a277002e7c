"""Command-line driver: ``plan``, ``init``, ``step``, ``verify`` and ``scaling-report``.

Exit codes: 0 success, 1 usage or invalid input, 2 infeasible exponent
system (a certificate is written), 3 contract violation or resolution failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import blocks as bl
from . import geometry as geo
from . import planner as pl
from . import stress as st
from .perturbation import PerturbationError
from .spectral import (GridMismatch, SpaceTimeField, TorusGrid, fft_workers,
                       lp_norm_array, matrix_to_sym, read_dump)

log = logging.getLogger("wemhd")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_CONTRACT = 0, 1, 2, 3
TWO_PI = 2 * math.pi
PRESETS = ("zero", "abc", "two-mode")

# admissible alpha per case: (low, high, high end included)
ALPHA_RANGE = {"I": (Fraction(1), Fraction(2), True), "II": (Fraction(1), Fraction(3), False)}

# identities the step must satisfy to round-off; measured values sit near 1e-14
EXACT_TOL = 1e-10
INIT_RESIDUAL_TOL = 1e-8
ENFORCED_CHECK_ROWS = ("iter-supp", "perturbation-support", "perturbation-at-t0")


class UsageError(Exception):
    """Bad flags, config entries or input files (exit 1)."""


class ContractViolation(Exception):
    """A module identity or contract failed (exit 3)."""

    def __init__(self, module: str, identity: str, detail: str):
        super().__init__(f"{module}: {identity}: {detail}")
        self.module = module
        self.identity = identity


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    case: str = "I"
    alpha: str = "1"
    dissipation_on: bool = True
    n_space: int = 32
    n_time: int = 32
    oversample: int = 1
    lam_index: int = 16
    eps: str | None = None
    bbeta: str | None = None
    eps0: str | None = None
    seed: str = "abc"
    out: str = "wemhd-out"
    workers: int = 1
    min_cells: float = 4.0
    r: float | None = None
    ell: float | None = None
    mu: float | None = None
    amplitude_scale: float = 1.0

    def validate(self, admissible_alpha: bool = True) -> "RunConfig":
        try:
            self.case = pl.normalize_case(self.case)
            alpha = pl.parse_rational(self.alpha)
            self.alpha = pl.format_rational(alpha)
            for name in ("eps", "bbeta", "eps0"):
                value = getattr(self, name)
                if value is not None:
                    if pl.parse_rational(value) <= 0:
                        raise UsageError(f"{name} must be positive")
                    setattr(self, name, pl.format_rational(pl.parse_rational(value)))
        except pl.PlannerError as exc:
            raise UsageError(str(exc)) from exc
        if admissible_alpha:
            lo, hi, closed = ALPHA_RANGE[self.case]
            if not (lo <= alpha and (alpha <= hi if closed else alpha < hi)):
                bracket = "]" if closed else ")"
                raise UsageError(f"alpha={self.alpha} is outside [{lo}, {hi}{bracket} for case {self.case}")
        if self.lam_index < 1:
            raise UsageError("lambda must be 2*pi times a positive integer")
        if self.workers < 1:
            raise UsageError("workers must be positive")
        if self.min_cells <= 0 or (self.r is not None and not 0 < self.r <= 1):
            raise UsageError("min-cells must be positive and r in (0, 1]")
        if (self.ell is not None and not 0 < self.ell <= 1) or (self.mu is not None and not self.mu > 0):
            raise UsageError("ell must be in (0, 1] and mu positive")
        if not self.amplitude_scale >= 0:
            raise UsageError("amplitude-scale must be nonnegative")
        self.grid()
        return self

    @property
    def alpha_value(self) -> Fraction:
        return pl.parse_rational(self.alpha)

    def slacks(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in ("eps", "bbeta", "eps0") if getattr(self, k) is not None}

    def grid(self) -> TorusGrid:
        try:
            return TorusGrid(self.n_space, self.n_time, oversample=self.oversample)
        except ValueError as exc:
            raise UsageError(f"grid: {exc}") from exc


# config file layout: section -> {key: (RunConfig field, parser)}
def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def parse_lambda(text: str) -> int:
    """``16``, ``2pi*16`` or ``2*pi*16`` all mean ``lambda = 2*pi*16``."""
    t = str(text).replace(" ", "").lower()
    for prefix in ("2*pi*", "2pi*", "2pi"):
        if t.startswith(prefix):
            t = t[len(prefix):]
            break
    try:
        value = int(t)
    except ValueError as exc:
        raise UsageError(f"lambda must be 2*pi times an integer, got {text!r}") from exc
    if value < 1:
        raise UsageError("lambda index must be positive")
    return value


def parse_grid(text: str) -> tuple[int, int, int | None]:
    """``N``, ``NxT`` or ``NxTxO`` (space points, time samples, dealiasing oversample)."""
    try:
        parts = [int(p) for p in str(text).lower().split("x")]
    except ValueError as exc:
        raise UsageError(f"grid must look like 32x16, got {text!r}") from exc
    if not 1 <= len(parts) <= 3:
        raise UsageError(f"grid must look like 32x16, got {text!r}")
    n = parts[0]
    nt = parts[1] if len(parts) > 1 else n
    return n, nt, parts[2] if len(parts) > 2 else None


CONFIG_KEYS = {
    "run": {"case": ("case", str), "alpha": ("alpha", str), "dissipation": ("dissipation_on", _parse_bool)},
    "grid": {"n_space": ("n_space", int), "n_time": ("n_time", int), "oversample": ("oversample", int)},
    "frequency": {"lambda": ("lam_index", parse_lambda)},
    "slack": {"eps": ("eps", str), "bbeta": ("bbeta", str), "eps0": ("eps0", str)},
    "seed": {"h": ("seed", str)},
    "output": {"dir": ("out", str)},
    "numerics": {"workers": ("workers", int), "min_cells": ("min_cells", float), "r": ("r", float),
                 "ell": ("ell", float), "mu": ("mu", float), "amplitude_scale": ("amplitude_scale", float)},
}


def read_config_file(path: str | Path) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                raise UsageError(f"unknown key {key!r} in [{section}]")
            name, conv = CONFIG_KEYS[section][key]
            try:
                values[name] = conv(raw)
            except ValueError as exc:
                raise UsageError(f"[{section}] {key}: {exc}") from exc
    return values


def build_config(args: argparse.Namespace, admissible_alpha: bool = True) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flag_map = {"case": "case", "alpha": "alpha", "eps": "eps", "bbeta": "bbeta", "eps0": "eps0",
                "out": "out", "workers": "workers", "min_cells": "min_cells", "r": "r", "ell": "ell", "mu": "mu",
                "amplitude_scale": "amplitude_scale", "preset": "seed", "h_file": "seed"}
    for flag, name in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = str(value) if name == "seed" else value
    if getattr(args, "no_dissipation", False):
        values["dissipation_on"] = False
    if getattr(args, "grid", None):
        n, nt, over = parse_grid(args.grid)
        values.update(n_space=n, n_time=nt)
        if over is not None:
            values["oversample"] = over
    if getattr(args, "lam", None) is not None:
        values["lam_index"] = parse_lambda(args.lam)
    known = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in values.items() if k in known}).validate(admissible_alpha)


# ---------------------------------------------------------------------------
# seed fields
# ---------------------------------------------------------------------------


def _coords(grid: TorusGrid):
    return [np.broadcast_to(c, grid.shape) for c in grid.coords()]


def abc_field(grid: TorusGrid) -> np.ndarray:
    """Unit-frequency Beltrami field: ``curl H = 2 pi H``."""
    x, y, z = _coords(grid)
    return np.array([np.sin(TWO_PI * z) + np.cos(TWO_PI * y),
                     np.sin(TWO_PI * x) + np.cos(TWO_PI * z),
                     np.sin(TWO_PI * y) + np.cos(TWO_PI * x)])


def shear_field(grid: TorusGrid) -> np.ndarray:
    _, y, _ = _coords(grid)
    return np.array([np.sin(2 * TWO_PI * y), np.zeros(grid.shape), np.zeros(grid.shape)])


def seed_field(name: str, grid: TorusGrid) -> SpaceTimeField:
    """Preset ``H`` by name, or a field dump path (``[t, 3, x, y, z]``)."""
    if name == "zero":
        return SpaceTimeField.zeros(grid, (3,))
    if name == "abc":
        return SpaceTimeField.constant(grid, abc_field(grid))
    if name == "two-mode":
        # smooth periodic blend of the abc field and a shear at twice the frequency
        w = TWO_PI / grid.T
        t = grid.times()
        return SpaceTimeField.separable(grid, [(np.cos(w * t), -w * np.sin(w * t), abc_field(grid)),
                                               (np.sin(w * t), w * np.cos(w * t), shear_field(grid))])
    path = Path(name)
    if not path.exists():
        raise UsageError(f"H must be one of {', '.join(PRESETS)} or a field dump; {name!r} not found")
    try:
        n, nt, nc, data = read_dump(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read field dump {path}: {exc}") from exc
    if nc != 3:
        raise UsageError(f"{path} holds {nc} components; H needs 3")
    if (n, nt) != (grid.n_space, grid.n_time):
        raise UsageError(f"{path} is on a {n}x{nt} grid, config asks for {grid.n_space}x{grid.n_time}")
    return SpaceTimeField.from_array(grid, data)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _json_default(x):
    if isinstance(x, Fraction):
        return pl.format_rational(x)
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def manifest(command: str, cfg: RunConfig, started: float, **sections) -> dict:
    """Reproducibility record; only ``timing`` varies between identical runs."""
    return {
        "command": command,
        "config": asdict(cfg),
        "profiles": bl.DEFAULT_PROFILES.describe(),
        "tolerances": {"exact_identities": EXACT_TOL, "initial_residual": INIT_RESIDUAL_TOL,
                       "residual_contract": dict(st.RESIDUAL_CONTRACT),
                       "scaling_exponent_rel": 0.10},
        "versions": {"wemhd": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "timing": {"timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                   "runtime_s": round(time.perf_counter() - started, 3)},
        **sections,
    }


def state_dir(out: Path, q: int) -> Path:
    return out / f"state-q{q}"


def latest_state(out: Path) -> Path:
    found = sorted(out.glob("state-q*/state.json"),
                   key=lambda p: int(p.parent.name.split("q")[-1]) if p.parent.name.split("q")[-1].isdigit() else -1)
    if not found:
        raise UsageError(f"no saved state under {out}; run init first or pass --state")
    return found[-1].parent


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def cmd_plan(cfg: RunConfig) -> tuple[int, dict]:
    out = Path(cfg.out)
    try:
        result = pl.threshold(cfg.case, cfg.alpha_value, dissipation_on=cfg.dissipation_on,
                              slacks=cfg.slacks())
    except pl.InfeasibleSystem as exc:
        cert = {"case": cfg.case, "alpha": cfg.alpha, "dissipation_on": cfg.dissipation_on,
                "feasible": False, "message": str(exc), "binding_constraints": list(exc.binding)}
        _write(out / "plan.json", dumps(cert))
        return EXIT_INFEASIBLE, cert
    except pl.PlannerError as exc:
        raise UsageError(str(exc)) from exc
    doc = result.to_json()
    doc["dissipation_on"] = cfg.dissipation_on
    try:
        num = pl.numeric_parameters(result, cfg.lam_index, cfg.n_space, cfg.n_time,
                                    min_cells=cfg.min_cells, r_override=cfg.r)
        doc["numeric"] = {"lam_index": cfg.lam_index, **num.as_dict(),
                          "requested": num.requested, "rounding": num.rounding}
    except pl.PlannerError as exc:
        doc["numeric"] = {"lam_index": cfg.lam_index, "error": str(exc)}
    _write(out / "plan.json", dumps(doc))
    return EXIT_OK, doc


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------


def cmd_init(cfg: RunConfig) -> tuple[int, dict]:
    started = time.perf_counter()
    out = Path(cfg.out)
    grid = cfg.grid()
    H = seed_field(cfg.seed, grid)
    target = state_dir(out, 0)
    try:
        with fft_workers(cfg.workers):
            state = st.initial_triple(H, float(cfg.alpha_value), cfg.dissipation_on, cfg.case,
                                      store_dir=target)
            state.meta["seed"] = cfg.seed
            state.save(target)
            stored = st.residual_check(state)
            fd = st.residual_check(state, "finite-difference")
            invariants = state.invariants()
    except st.InitialDataError as exc:
        raise UsageError(f"initial data: {exc}") from exc
    results = {"state": str(target), "stress_norm_L1L1": state.stress_norm(),
               "delta": list(state.delta),
               "residual": {"value": stored.value, "tolerance": INIT_RESIDUAL_TOL, "mode": stored.mode,
                            "passed": stored.value < INIT_RESIDUAL_TOL},
               "residual_finite_difference": {"value": fd.value, "tolerance": fd.tolerance,
                                              "passed": fd.passed},
               "invariants": invariants}
    _write(out / "init-manifest.json", dumps(manifest("init", cfg, started, results=results)))
    if not stored.value < INIT_RESIDUAL_TOL:
        raise ContractViolation("stress", "initial residual",
                                f"{stored.value:.3e} >= {INIT_RESIDUAL_TOL:.0e}")
    return EXIT_OK, results


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------


def norms_table(breakdown: st.StressBreakdown) -> str:
    """Per-slice ``L^1_x`` stress norms and ``L^2_x`` pressure norms; fixed formatting."""
    names = list(breakdown.terms) + ["carry", "R_total"]
    pressure = list(st.PRESSURE_PARTS)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slice", "t"] + names + [f"P_{p}" for p in pressure])
    n = len(breakdown.slice_norms[names[0]])
    for j in range(n):
        w.writerow([j, f"{j * breakdown.dt:.17g}"]
                   + [f"{breakdown.slice_norms[k][j]:.17g}" for k in names]
                   + [f"{breakdown.pressure_norms[p][j]:.17g}" for p in pressure])
    w.writerow(["L1_t", ""] + [f"{breakdown.norm(k):.17g}" for k in names] + [""] * len(pressure))
    return buf.getvalue()


def enforce_step_contracts(prev: st.IterationState, nxt: st.IterationState,
                           breakdown: st.StressBreakdown, check: st.CheckReport) -> dict:
    """Measure every step identity; raise on the first failure."""
    residual = st.residual_check(nxt)
    measured = {
        ("stress", "two-path bookkeeping"): (breakdown.two_path_defect, EXACT_TOL),
        ("perturbation", "temporal cancellation"): (breakdown.temporal_cancellation, EXACT_TOL),
        ("stress", "pressure consistency"): (st.pressure_consistency(nxt), EXACT_TOL),
        ("stress", f"residual ({residual.mode})"): (residual.value, residual.tolerance),
    }
    for name, value in nxt.invariants().items():
        measured[("stress", f"invariant {name}")] = (value, EXACT_TOL)
    for row in ENFORCED_CHECK_ROWS:
        r = check.row(row)
        measured[("stress", f"check {row}")] = (r["value"], r["bound"])
    report = {f"{m}: {i}": {"value": v, "tolerance": t, "passed": bool(v <= t if t == 0 else v < t)}
              for (m, i), (v, t) in measured.items()}
    for (module, identity), (value, tol) in measured.items():
        ok = value <= tol if tol == 0 else value < tol
        if not ok:
            raise ContractViolation(module, identity, f"{value:.3e} exceeds {tol:.1e}")
    return report


def cmd_step(cfg: RunConfig, state_path: str | None = None, case_given: bool = False) -> tuple[int, dict]:
    started = time.perf_counter()
    out = Path(cfg.out)
    source = Path(state_path) if state_path else latest_state(out)
    try:
        state = st.IterationState.load(source)
    except (st.StressError, GridMismatch, OSError, ValueError) as exc:
        raise UsageError(f"cannot load state from {source}: {exc}") from exc
    if case_given and state.config.case != cfg.case:
        raise UsageError(f"state in {source} was built for case {state.config.case}")
    # the state fixes case, alpha, dissipation and grid
    cfg.case, cfg.dissipation_on = state.config.case, state.config.dissipation
    cfg.alpha = pl.format_rational(Fraction(state.config.alpha).limit_denominator(10**6))
    cfg.n_space, cfg.n_time, cfg.oversample = state.grid.n_space, state.grid.n_time, state.grid.oversample
    cfg.validate()

    try:
        plan = pl.threshold(cfg.case, cfg.alpha_value, dissipation_on=cfg.dissipation_on, slacks=cfg.slacks())
    except pl.InfeasibleSystem as exc:
        cert = {"case": cfg.case, "alpha": cfg.alpha, "feasible": False, "message": str(exc),
                "binding_constraints": list(exc.binding)}
        _write(out / f"step-q{state.q + 1}" / "plan.json", dumps(cert))
        return EXIT_INFEASIBLE, cert
    try:
        num = pl.numeric_parameters(plan, cfg.lam_index, cfg.n_space, cfg.n_time,
                                    min_cells=cfg.min_cells, r_override=cfg.r)
    except pl.PlannerError as exc:
        raise ContractViolation("planner", "resolution", str(exc)) from exc
    params = st.StepParameters.from_numeric(num)
    if cfg.case == "II":
        # jet overrides for desk grids; the witness values are kept in the manifest
        params.ell = cfg.ell if cfg.ell is not None else params.ell
        params.mu = cfg.mu if cfg.mu is not None else params.mu

    target = state_dir(out, state.q + 1)
    reports = out / f"step-q{state.q + 1}"
    try:
        result = st.step(state, params, amplitude_scale=cfg.amplitude_scale, min_cells=cfg.min_cells,
                         store_dir=target, workers=cfg.workers)
    except bl.ResolutionError as exc:
        raise ContractViolation("blocks", "resolution", str(exc)) from exc
    except bl.BlockError as exc:
        raise ContractViolation("blocks", "placement", str(exc)) from exc
    except geo.GeometryError as exc:
        raise ContractViolation("geometry", "decomposition", str(exc)) from exc
    except PerturbationError as exc:
        raise ContractViolation("perturbation", "identity", str(exc)) from exc
    nxt = result.state
    nxt.meta.update(seed=state.meta.get("seed"), parent=str(source))
    nxt.save(target)

    with fft_workers(cfg.workers):
        check = st.inductive_check(state, nxt)
        parameters = {"lam_index": cfg.lam_index, **num.as_dict(), "ell": params.ell, "mu": params.mu,
                      "requested": num.requested,
                      "rounding": num.rounding, "amplitude_scale": cfg.amplitude_scale,
                      "witness": plan.to_json()["witness"], "directions_file": "directions.txt"}
        _write(reports / "directions.txt", result.directions.to_text())
        _write(reports / "breakdown.json", result.breakdown.to_json())
        _write(reports / "norms.csv", norms_table(result.breakdown))
        _write(reports / "check.json", check.to_json())
        norms = {"R_previous": state.stress_norm(), "R_next": nxt.stress_norm()}
        try:
            contracts = enforce_step_contracts(state, nxt, result.breakdown, check)
            failure = None
        except ContractViolation as exc:
            contracts, failure = {"failed": str(exc)}, exc
        results = {"state": str(target), "source": str(source), "norms": norms,
                   "stress_decreased": norms["R_next"] < norms["R_previous"],
                   "contracts": contracts}
        _write(reports / "manifest.json", dumps(manifest("step", cfg, started, parameters=parameters,
                                                        results=results)))
    if failure is not None:
        raise failure
    return EXIT_OK, results


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _random_field(grid: TorusGrid, ncomp: int | None, rng: np.random.Generator, kmax: int = 6) -> np.ndarray:
    """Random real mean-zero field with Fourier support in ``|k_i| <= kmax``."""
    shape = grid.shape if ncomp is None else (ncomp,) + grid.shape
    spec = shape[:-1] + (grid.n_space // 2 + 1,)
    kx, ky, kz = grid._k_int
    mask = (np.abs(kx) <= kmax) & (np.abs(ky) <= kmax) & (kz <= kmax)
    out = grid.ifft((rng.normal(size=spec) + 1j * rng.normal(size=spec)) * mask)
    return grid.remove_mean(out / np.abs(out).max())


def _check(name: str, value: float, tol: float, detail: str = "") -> dict:
    row = {"check": name, "value": float(value), "tolerance": tol, "passed": bool(value < tol)}
    if detail:
        row["detail"] = detail
    return row


def suite_spectral(grid: TorusGrid, samples: int = 20, seed: int = 7) -> list[dict]:
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(("div_inverse_divergence", "inverse_divergence_trace_free",
                           "inverse_divergence_symmetric", "curl_grad", "div_curl",
                           "leray_idempotent", "leray_curl_commutation"), 0.0)

    def rel(a, b):
        return lp_norm_array(a, grid, 2) / max(lp_norm_array(b, grid, 2), 1e-300)

    for _ in range(samples):
        v = _random_field(grid, 3, rng)
        f = _random_field(grid, None, rng)
        R = grid.inverse_divergence(v)
        m = np.array([[R[0], R[3], R[4]], [R[3], R[1], R[5]], [R[4], R[5], R[2]]])
        worst["div_inverse_divergence"] = max(worst["div_inverse_divergence"], rel(grid.tensor_div(R) - v, v))
        worst["inverse_divergence_trace_free"] = max(worst["inverse_divergence_trace_free"],
                                                     rel(R[0] + R[1] + R[2], R))
        worst["inverse_divergence_symmetric"] = max(worst["inverse_divergence_symmetric"],
                                                    rel(m - m.transpose(1, 0, 2, 3, 4), R))  # structural
        gf = grid.grad(f)
        worst["curl_grad"] = max(worst["curl_grad"], rel(grid.curl(gf), gf))
        cv = grid.curl(v)
        worst["div_curl"] = max(worst["div_curl"], rel(grid.div(cv), cv))
        p = grid.leray(v)
        worst["leray_idempotent"] = max(worst["leray_idempotent"], rel(grid.leray(p) - p, p))
        worst["leray_curl_commutation"] = max(worst["leray_curl_commutation"],
                                              rel(grid.curl(p) - grid.leray(cv), cv))
    return [_check(k, v, 1e-10, f"{samples} fields on {grid.n_space}^3") for k, v in worst.items()]


def _failed(name: str, detail: str) -> dict:
    return {"check": name, "value": None, "tolerance": None, "passed": False, "detail": detail}


def _exact(name: str, got, expected) -> dict:
    show = lambda x: None if x is None else pl.format_rational(x)  # noqa: E731
    return {"check": name, "value": show(got), "expected": show(expected), "passed": got == expected}


def _ball_samples(rng: np.random.Generator, m: int, radius: float) -> np.ndarray:
    """``Id + Q diag(s) Q^T`` with ``|s_i| < radius``: symmetric matrices within ``radius`` of Id."""
    q, _ = np.linalg.qr(rng.normal(size=(m, 3, 3)))
    s = rng.uniform(-radius, radius, size=(m, 3))
    return np.eye(3) + np.einsum("mij,mj,mkj->mik", q, s, q)


def suite_geometry(directions_path: str | None = None, seed: int = 11) -> list[dict]:
    try:
        L = geo.DirectionSet.load(directions_path) if directions_path else geo.build_direction_set()
        L.validate()
    except (geo.GeometryError, OSError, ValueError) as exc:
        return [_failed("direction_set", str(exc))]
    rows = [{"check": "direction_set", "value": len(L), "tolerance": None, "passed": True,
             "detail": directions_path or "built-in"}]
    rng = np.random.default_rng(seed)
    try:
        cert = geo.certify_ball(L, samples=2000)
        rows.append({"check": "ball_certificate", "value": cert.min_weight, "tolerance": 0.0,
                     "passed": bool(cert.ok), "detail": f"radius {cert.radius}"})
        mats = _ball_samples(rng, 100, 0.5)
        c = geo.decomposition_weights(L, mats.transpose(1, 2, 0))
        err = np.abs(geo.reconstruct(L, c) - matrix_to_sym(mats.transpose(1, 2, 0))).max()
        rows.append(_check("reconstruction", err, 1e-12, "100 random R in B_1/2(Id)"))
        grid = TorusGrid(16, 8)
        worst = 0.0
        for scale in (0.3, 1.0, 3.0, 7.0, 20.0):
            stress = scale * _random_field(grid, 6, rng, kmax=3)
            worst = max(worst, geo.amplitudes(SpaceTimeField.constant(grid, stress), L).reconstruction_error(0))
        rows.append(_check("amplitude_reconstruction", worst, 1e-10, "5 random stress fields on 16^3"))
    except geo.GeometryError as exc:
        rows.append(_failed("decomposition", str(exc)))
    return rows


def suite_blocks(case_ii_directions: int = 2) -> list[dict]:
    report = bl.verify_scaling("all")
    rows = [{"check": f"{r.lemma}: {r.quantity} vs {r.parameter}", "value": r.fitted_exponent,
             "expected": r.predicted_exponent, "tolerance": 0.10, "passed": bool(r.rel_error <= 0.10),
             "rel_error": r.rel_error} for r in report.rows]
    L = geo.build_direction_set()
    worst = {"curl_curl": 0.0, "div_W": 0.0, "div_WW": 0.0}
    for d in L:
        res = bl.verify_block_identities(d, "I", r=0.25, lam=TWO_PI * 8)
        for k in worst:
            worst[k] = max(worst[k], res[k])
    tol = {"curl_curl": 1e-8, "div_W": 1e-10, "div_WW": 1e-10}
    rows += [_check(f"mikado {k}", v, tol[k], f"{len(L)} directions") for k, v in worst.items()]
    jet = {"curl_curl": 0.0, "div_W_plus_Wtilde": 0.0}
    for d in list(L)[:case_ii_directions]:
        res = bl.verify_block_identities(d, "II", r=0.25, lam=TWO_PI * 8, ell=0.5)
        for k in jet:
            jet[k] = max(jet[k], res[k])
    rows += [_check(f"jet {k}", v, 1e-8, f"{case_ii_directions} directions") for k, v in jet.items()]
    cancel = 0.0
    for tau, sigma in ((1.0, 1), (2.0, 2), (4.0, 3)):
        tb = bl.temporal_blocks(tau, sigma)
        cancel = max(cancel, tb.cancel_residual(np.linspace(0.0, 1.0, 257)))
    rows.append(_check("temporal cancellation", cancel, 1e-8, "tau in {1,2,4}"))
    return rows


def suite_planner() -> list[dict]:
    F = Fraction
    rows = [_exact("case I alpha=2 gamma_sup", pl.threshold("I", 2).value, F(4, 3))]
    for a in (F(1), F(3, 2), F(7, 4)):
        rows.append(_exact(f"case II alpha={a} p_sup", pl.threshold("II", a).value, F(6, 5)))
    for a in (F(7, 4), F(2), F(5, 2), F(23, 8)):
        rows.append(_exact(f"case II alpha={a} p_sup", pl.threshold("II", a).value, 3 / (2 * a - 1)))
    onset = pl.is_feasible_at_zero_slack("I", 2) and not pl.is_feasible_at_zero_slack("I", F(2) + F(1, 10**6))
    rows.append({"check": "case I onset at alpha=2", "value": onset, "passed": onset})
    try:
        pl.threshold("I", F(201, 100))
        binding = []
    except pl.InfeasibleSystem as exc:
        binding = list(exc.binding)
    ok = {"I.1", "I.2"} <= set(binding)
    rows.append({"check": "case I past onset binding", "value": binding, "passed": ok})
    rows.append(_exact("non-resistive case I", pl.threshold("I", 2, dissipation_on=False).value, F(4, 3)))
    for a in (F(1), F(2), F(5, 2)):
        rows.append(_exact(f"non-resistive case II alpha={a}",
                           pl.threshold("II", a, dissipation_on=False).value, F(6, 5)))
    rows.append(_exact("heuristic gamma bound D=3 alpha=2", pl.heuristic_bounds(2, 3).gamma_bound, F(4, 3)))
    dominated = all(pl.heuristic_bounds(a, 0).p_bound >= pl.threshold("II", a).value
                    for a in (F(1) + F(k, 20) for k in range(20)))
    rows.append({"check": "heuristic >= rigorous (20 alphas)", "value": dominated, "passed": dominated})
    return rows


SUITES = ("spectral", "geometry", "blocks", "planner")


def cmd_verify(cfg: RunConfig, suites=SUITES, directions: str | None = None,
               samples: int = 20) -> tuple[int, dict]:
    started = time.perf_counter()
    runners = {"spectral": lambda: suite_spectral(cfg.grid(), samples),
               "geometry": lambda: suite_geometry(directions),
               "blocks": suite_blocks,
               "planner": suite_planner}
    report = {}
    with fft_workers(cfg.workers):
        for name in suites:
            t0 = time.perf_counter()
            rows = runners[name]()
            elapsed = time.perf_counter() - t0
            report[name] = {"passed": all(r["passed"] for r in rows), "runtime_s": round(elapsed, 3),
                            "checks": rows}
            log.info("verify %s: %s in %.2fs", name, "pass" if report[name]["passed"] else "FAIL", elapsed)
    doc = {"passed": all(s["passed"] for s in report.values()), "suites": report,
           "runtime_s": round(time.perf_counter() - started, 3)}
    _write(Path(cfg.out) / "verify.json", dumps(doc))
    return (EXIT_OK if doc["passed"] else EXIT_CONTRACT), doc


def cmd_scaling_report(cfg: RunConfig, family: str = "all") -> tuple[int, str]:
    try:
        report = bl.verify_scaling(family)
    except bl.BlockError as exc:
        raise UsageError(str(exc)) from exc
    text = report.to_csv()
    _write(Path(cfg.out) / "scaling.csv", text)
    return (EXIT_OK if report.passed(0.10) else EXIT_CONTRACT), text


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with sections")
    common.add_argument("--case", help="I (Mikado) or II (intermittent jets)")
    common.add_argument("--alpha", help="dissipation order as a rational, e.g. 3/2")
    common.add_argument("--no-dissipation", action="store_true", help="drop the (-Delta)^alpha term")
    common.add_argument("--grid", help="NxT or NxTxO: space points, time samples, oversample")
    common.add_argument("--lambda", dest="lam", help="frequency as an integer multiple of 2*pi")
    common.add_argument("--eps", help="witness slack eps (rational)")
    common.add_argument("--bbeta", help="witness slack b*beta (rational)")
    common.add_argument("--eps0", help="witness slack eps0 (rational)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="FFT worker threads; results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wemhd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"wemhd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("plan", parents=[common], help="exact exponent thresholds and witness")
    init = sub.add_parser("init", parents=[common], help="initial triple from a seed field")
    seed = init.add_mutually_exclusive_group()
    seed.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    seed.add_argument("--h-file", help="field dump [t, 3, x, y, z] for H")
    step = sub.add_parser("step", parents=[common], help="one iteration from a saved state")
    step.add_argument("--state", help="state directory (default: latest under --out)")
    step.add_argument("--min-cells", type=float, help="grid cells the tube diameter must span")
    step.add_argument("--r", type=float, help="override the tube concentration r")
    step.add_argument("--ell", type=float, help="override the jet concentration ell (case II)")
    step.add_argument("--mu", type=float, help="override the jet speed mu (case II)")
    step.add_argument("--amplitude-scale", type=float, help="scale the perturbation (0 leaves the state unchanged)")
    verify = sub.add_parser("verify", parents=[common], help="run the invariant suites")
    verify.add_argument("--suite", action="append", choices=SUITES, help="repeatable; default all")
    verify.add_argument("--directions", help="direction set file for the geometry suite")
    verify.add_argument("--samples", type=int, default=20, help="random fields for the spectral suite")
    scaling = sub.add_parser("scaling-report", parents=[common], help="block norm exponent fits as CSV")
    scaling.add_argument("--family", default="all", choices=("all", "mikado", "jet", "temporal"))
    return parser


def _emit(payload) -> None:
    sys.stdout.write(payload if isinstance(payload, str) else dumps(payload))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args, admissible_alpha=args.command not in ("plan", "verify", "scaling-report"))
        if args.command == "plan":
            code, payload = cmd_plan(cfg)
        elif args.command == "init":
            code, payload = cmd_init(cfg)
        elif args.command == "step":
            code, payload = cmd_step(cfg, args.state, case_given=args.case is not None)
        elif args.command == "verify":
            code, payload = cmd_verify(cfg, tuple(args.suite or SUITES), args.directions, args.samples)
        else:
            code, payload = cmd_scaling_report(cfg, args.family)
    except UsageError as exc:
        print(f"wemhd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"wemhd {args.command}: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    _emit(payload)
    return code


if __name__ == "__main__":
    sys.exit(main())
