"""Exact-rational exponent systems and the thresholds they imply.

Every parameter of the construction is a power of the frequency ``lambda``:
``r = lambda**n1`` and so on.  Each estimate the step needs becomes a strict
linear inequality in the exponents.  This module encodes those inequalities with
:class:`fractions.Fraction` coefficients, checks concrete assignments exactly, and
computes the supremum of the admissible integrability exponent as the slack
variables (``eps``, ``bbeta``, ``beta``, ``inv_b``, ``eps0``) shrink to zero.

The supremum is computed along two independent routes that must agree:

* the closed-form route plugs in the hand-derived parameter choices and takes the
  zero-slack limit term by term;
* the LP route solves the zero-slack closure of the whole system as a
  linear-fractional program (Charnes-Cooper transform) with an exact rational
  simplex solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

from . import _rational_lp as lp

EXPONENTS = ("n1", "n2", "n3", "n4")
SLACKS = ("eps", "bbeta", "beta", "inv_b", "eps0")
VARIABLES = EXPONENTS + SLACKS
OBJECTIVE_SYMBOLS = ("inv_p", "inv_gamma")

GAMMA_SUP = "gamma_sup"
P_SUP = "p_sup"


class PlannerError(ValueError):
    """Raised for inadmissible planner input."""


class InfeasibleSystem(PlannerError):
    """The zero-slack closure has no feasible point."""

    def __init__(self, message: str, binding: list[str]):
        super().__init__(message)
        self.binding = binding


class RouteMismatch(RuntimeError):
    """The closed-form and LP routes disagree, which means a transcription bug."""


def _frac(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        raise TypeError("floats are not accepted by the exact planner")
    return Fraction(x)


def parse_rational(text: str | int | Fraction) -> Fraction:
    """Parse ``"7/4"``, ``"2"`` or ``"-1/3"`` into a Fraction."""
    if isinstance(text, (int, Fraction)):
        return Fraction(text)
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise PlannerError(f"not a rational number: {text!r}") from exc


def format_rational(x: Fraction) -> str:
    x = Fraction(x)
    return f"{x.numerator}/{x.denominator}"


# --------------------------------------------------------------------------
# Tiny exact polynomial type.  Constraints are at most bilinear: the objective
# symbols 1/p and 1/gamma multiply exponents.
# --------------------------------------------------------------------------


class Poly:
    """Sparse polynomial with Fraction coefficients keyed by sorted monomials."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[tuple[str, ...], Fraction] | None = None):
        self.terms = {k: _frac(v) for k, v in (terms or {}).items() if v != 0}

    @classmethod
    def var(cls, name: str) -> "Poly":
        return cls({(name,): Fraction(1)})

    @classmethod
    def const(cls, value) -> "Poly":
        return cls({(): _frac(value)})

    @staticmethod
    def _lift(other) -> "Poly":
        return other if isinstance(other, Poly) else Poly.const(other)

    def __add__(self, other) -> "Poly":
        other = self._lift(other)
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, Fraction(0)) + v
        return Poly(out)

    __radd__ = __add__

    def __neg__(self) -> "Poly":
        return Poly({k: -v for k, v in self.terms.items()})

    def __sub__(self, other) -> "Poly":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Poly":
        return self._lift(other) - self

    def __mul__(self, other) -> "Poly":
        other = self._lift(other)
        out: dict[tuple[str, ...], Fraction] = {}
        for k1, v1 in self.terms.items():
            for k2, v2 in other.terms.items():
                key = tuple(sorted(k1 + k2))
                out[key] = out.get(key, Fraction(0)) + v1 * v2
        return Poly(out)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, Fraction)):
            other = Poly.const(other)
        return isinstance(other, Poly) and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def symbols(self) -> set[str]:
        return {s for key in self.terms for s in key}

    def substitute(self, values: Mapping[str, Fraction]) -> "Poly":
        out = Poly()
        for key, coef in self.terms.items():
            term = Poly.const(coef)
            for s in key:
                term = term * (Poly.const(values[s]) if s in values else Poly.var(s))
            out = out + term
        return out

    def evaluate(self, values: Mapping[str, Fraction]) -> Fraction:
        reduced = self.substitute(values)
        missing = reduced.symbols()
        if missing:
            raise PlannerError(f"assignment misses {sorted(missing)}")
        return reduced.terms.get((), Fraction(0))

    def coefficient(self, name: str) -> "Poly":
        """Part of the polynomial multiplying ``name`` (assumed degree <= 1 in it)."""
        out = {}
        for key, coef in self.terms.items():
            if name in key:
                rest = list(key)
                rest.remove(name)
                if name in rest:
                    raise PlannerError(f"{name} appears nonlinearly")
                out[tuple(rest)] = coef
        return Poly(out)

    def without(self, name: str) -> "Poly":
        return Poly({k: v for k, v in self.terms.items() if name not in k})

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for key in sorted(self.terms, key=lambda k: (len(k) == 0, k)):
            coef = self.terms[key]
            name = "*".join(key)
            if not key:
                parts.append(str(coef))
            elif coef == 1:
                parts.append(name)
            elif coef == -1:
                parts.append(f"-{name}")
            else:
                parts.append(f"{coef}*{name}")
        return " + ".join(parts).replace("+ -", "- ")

    __repr__ = __str__


n1, n2, n3, n4 = (Poly.var(s) for s in EXPONENTS)
eps, bbeta, beta, inv_b, eps0 = (Poly.var(s) for s in SLACKS)
inv_p, inv_gamma = (Poly.var(s) for s in OBJECTIVE_SYMBOLS)
half = Fraction(1, 2)


# --------------------------------------------------------------------------
# Systems
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Inequality:
    """Strict inequality ``lhs < rhs`` stored as ``expr = lhs - rhs < 0``."""

    label: str
    lhs: Poly
    rhs: Poly
    role: str = "core"  # core | dissipation | objective | sign | ansatz

    @property
    def expr(self) -> Poly:
        return self.lhs - self.rhs

    def __str__(self) -> str:
        op = "=" if self.role == "ansatz" else "<"
        return f"{self.lhs} {op} {self.rhs}"


@dataclass(frozen=True)
class ExponentSystem:
    case: str
    alpha: Fraction
    dissipation_on: bool
    eta: Fraction
    inequalities: tuple[Inequality, ...]
    literal_reduction: bool = False

    def lines(self, roles: Iterable[str] | None = None) -> list[Inequality]:
        if roles is None:
            return list(self.inequalities)
        roles = set(roles)
        return [c for c in self.inequalities if c.role in roles]

    def labels(self) -> list[str]:
        return [c.label for c in self.inequalities]

    def get(self, label: str) -> Inequality:
        for c in self.inequalities:
            if c.label == label:
                return c
        raise KeyError(label)


def _lt(label, lhs, rhs, role="core") -> Inequality:
    return Inequality(label, Poly._lift(lhs), Poly._lift(rhs), role)


def _case1_lines(alpha: Fraction, eta: Fraction | None) -> list[Inequality]:
    a = alpha
    if eta is None:
        c1 = Fraction(1)
        lines = [
            _lt("I.1", c1 * n1 + half * n2 + 2 * eps - 2, -2 * bbeta),
            _lt("I.2", n1 - half * n2 + 2 * a - 2, -2 * bbeta, "dissipation"),
            _lt("I.3", 5 * inv_b + n1 - half * n2, -2 * bbeta),
            _lt("I.4", -n1 - 1, -2 * bbeta),
            _lt("I.5", -2 * eps, -2 * bbeta),
            _lt("I.6", -half * n2, -bbeta),
            _lt("I.7", (2 * inv_p - 1) * n1 + (half - inv_gamma) * n2 + 1, -bbeta, "objective"),
        ]
        return lines
    e = Fraction(2) / eta - 1
    return [
        _lt("I.1", e * n1 + half * n2 + 2 * eps - 2, -2 * bbeta),
        _lt("I.2", e * n1 - half * n2 + 2 * a - 2, -2 * bbeta, "dissipation"),
        _lt("I.3", 5 * inv_b + e * n1 - half * n2, -2 * bbeta),
        _lt("I.4", -n1 - 1, -2 * bbeta),
        _lt("I.4b", (Fraction(2) / eta - 3) * n1 - 1, -2 * bbeta),
        _lt("I.5", -2 * eps, -2 * bbeta),
        _lt("I.6", -half * n2, -bbeta),
        _lt("I.7", (2 * inv_p - 1) * n1 + (half - inv_gamma) * n2 + 1, -bbeta, "objective"),
    ]


def _case2_lines(alpha: Fraction, eta: Fraction, literal: bool) -> list[Inequality]:
    a = alpha
    ie = 1 / eta
    rhs = -2 * bbeta
    lines = [
        _lt("II.1", (2 * ie - 1) * n1 + (ie - half) * n2 + half * n4 + 2 * eps - 2, rhs),
        _lt("II.2", 2 * ie * n1 + (ie - Fraction(3, 2)) * n2 + n3 - half * n4 - 1, rhs),
        _lt("II.3", (2 * ie - 1) * n1 + (ie - half) * n2 - half * n4 + 2 * a - 2, rhs, "dissipation"),
        _lt("II.4", (2 * ie - 2) * n1 + (ie - 1) * n2 - n3 + 2 * a - 1, rhs, "dissipation"),
        _lt("II.5", (2 * ie - 1) * n1 + (ie - half) * n2 - half * n4 + 5 * inv_b, rhs),
        _lt("II.6", (2 * ie - 2) * n1 + (ie - 1) * n2 - n3 + 1 + 5 * inv_b, rhs),
        _lt("II.7", (2 * ie - 3) * n1 + (ie - 1) * n2 - 1, rhs),
        _lt("II.8", (2 * ie - 2) * n1 + (ie - 1) * n2 - n3 + n4 + 2 * eps, rhs),
        _lt("II.9", (2 * ie - 1) * n1 + (ie - 2) * n2 - beta, rhs),
        _lt("II.10", (2 * ie - 3) * n1 + (ie - Fraction(3, 2)) * n2 - n3 + half * n4 + 1 - beta, rhs),
        _lt("II.11", -2 * eps, rhs),
    ]
    if literal:
        # the eta = 1 list as printed, whose seventh line carries the opposite sign on n1
        lines[6] = _lt("II.7", n1 - 1, rhs)
    lines += [
        _lt("II.12", n1 - n2, -beta),
        _lt("II.13", -n1 - half * n2 - n3 + half * n4 + 1, -beta),
        _lt("II.14", -half * n4, -beta),
        _lt("II.15", n1 - n2 - half * n4, -beta),
        _lt("II.16", -n1 - half * n2 - n3 + 1, -beta),
        _lt("II.17", (2 * inv_p - 1) * n1 + (inv_p - half) * n2 + (half - inv_gamma) * n4 + 1,
            -bbeta, "objective"),
        _lt("II.18", (2 * inv_p - 2) * n1 + (inv_p - 1) * n2 - n3 + (1 - inv_gamma) * n4 + 2,
            -bbeta, "objective"),
    ]
    return lines


def build_system(case: str, alpha, dissipation_on: bool = True, eta=None,
                 literal_reduction: bool = False) -> ExponentSystem:
    """Transcribe the exponent system for ``case`` ("I" or "II").

    ``eta`` selects the pre-reduction system with a general spatial exponent
    (default: the reduced system at eta = 1).  ``literal_reduction`` keeps the
    printed sign of the seventh Case II line instead of the eta = 1 reduction.
    """
    case = normalize_case(case)
    alpha = parse_rational(alpha)
    if not Fraction(1) <= alpha < 4:
        raise PlannerError(f"alpha must lie in [1, 4), got {alpha}")
    if eta is not None:
        eta = parse_rational(eta)
        if eta < 1:
            raise PlannerError("eta must be >= 1")

    if case == "I":
        lines = _case1_lines(alpha, eta)
        lines += [
            _lt("I.s1", n1, 0, "sign"),
            _lt("I.s2", -n2, 0, "sign"),
            # Mikado regime: r = lambda^(-3 eps), no spatial concentration
            Inequality("I.a1", n1, -3 * eps, "ansatz"),
        ]
    else:
        lines = _case2_lines(alpha, eta if eta is not None else Fraction(1), literal_reduction)
        lines += [
            _lt("II.s1", n1 - n2, 0, "sign"),
            _lt("II.s2", n2, 0, "sign"),
            _lt("II.s3", -n3, 0, "sign"),
            _lt("II.s4", -n4, 0, "sign"),
            _lt("II.s5", beta - bbeta, 0, "sign"),
        ]
    used = set().union(*(c.expr.symbols() for c in lines))
    lines += [_lt(f"{case}.slack.{s}", -Poly.var(s), 0, "sign") for s in SLACKS if s in used]
    if not dissipation_on:
        lines = [c for c in lines if c.role != "dissipation"]
    return ExponentSystem(case, alpha, dissipation_on, eta or Fraction(1), tuple(lines),
                          literal_reduction)


def normalize_case(case: str) -> str:
    c = str(case).strip().upper()
    if c in ("1", "I"):
        return "I"
    if c in ("2", "II"):
        return "II"
    raise PlannerError(f"unknown case {case!r}")


# --------------------------------------------------------------------------
# Point checks
# --------------------------------------------------------------------------


@dataclass
class PointCheck:
    feasible: bool
    violated: list[str]
    margins: dict[str, Fraction]

    def __bool__(self) -> bool:
        return self.feasible


def check_point(system: ExponentSystem, assignment: Mapping[str, object]) -> PointCheck:
    """Evaluate every line exactly.

    ``assignment`` maps variable names to rationals.  Objective lines are checked
    only when both ``inv_p`` and ``inv_gamma`` are supplied (use 0 for infinity).
    """
    values = {k: parse_rational(v) for k, v in assignment.items()}
    has_objective = all(s in values for s in OBJECTIVE_SYMBOLS)
    margins: dict[str, Fraction] = {}
    violated: list[str] = []
    for c in system.inequalities:
        if c.role == "objective" and not has_objective:
            continue
        needed = c.expr.symbols() - set(values)
        if needed:
            raise PlannerError(f"{c.label} needs values for {sorted(needed)}")
        value = c.expr.evaluate(values)
        margins[c.label] = -value
        ok = value == 0 if c.role == "ansatz" else value < 0
        if not ok:
            violated.append(c.label)
    return PointCheck(not violated, violated, margins)


# --------------------------------------------------------------------------
# Thresholds
# --------------------------------------------------------------------------


@dataclass
class ThresholdResult:
    case: str
    alpha: Fraction
    objective: str
    value: Fraction | None  # None means +infinity
    witness: dict[str, Fraction]
    binding_constraints: list[str]
    feasible: bool = True
    lp_value: Fraction | None = None
    details: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "case": self.case,
            "alpha": format_rational(self.alpha),
            "objective": self.objective,
            "feasible": self.feasible,
            "sup_value": None if self.value is None else format_rational(self.value),
            "witness": {k: format_rational(v) for k, v in sorted(self.witness.items())},
            "binding_constraints": list(self.binding_constraints),
        }


def _objective_setup(case: str, objective: str) -> tuple[str, str]:
    """Return (free objective symbol, symbol pinned to 0) for the objective."""
    if objective == GAMMA_SUP:
        return "inv_gamma", "inv_p"
    if objective == P_SUP:
        return "inv_p", "inv_gamma"
    raise PlannerError(f"unknown objective {objective!r}")


def default_objective(case: str) -> str:
    return GAMMA_SUP if normalize_case(case) == "I" else P_SUP


def _split_objective(system: ExponentSystem, free: str, pinned: str):
    """Write every objective line as ``free * (-denominator) + numerator < 0``.

    Returns the common denominator polynomial and the list of (label, numerator).
    """
    denominator = None
    numerators = []
    for c in system.lines(["objective"]):
        expr = c.expr.substitute({pinned: Fraction(0)})
        d = -expr.coefficient(free)
        rest = expr.without(free)
        if denominator is None:
            denominator = d
        elif d != denominator:
            raise PlannerError("objective lines do not share a denominator")
        numerators.append((c.label, rest))
    return denominator, numerators


def _closed_form_choice(system: ExponentSystem) -> dict[str, Poly]:
    """Hand-derived exponents as affine functions of the slacks."""
    a = system.alpha
    if system.case == "I":
        return {"n1": -3 * eps, "n2": 4 + 2 * eps - 4 * bbeta - eps0}
    choice = {"n1": -1 + 2 * eps, "n2": -1 + 4 * eps}
    if not system.dissipation_on or a < Fraction(7, 4):
        choice.update(n3=Fraction(5, 2) + 2 * eps, n4=10 * eps)
    else:
        choice.update(n3=2 * a - 1 + 2 * eps, n4=4 * a - 7 + 10 * eps)
    return choice


def _witness_slacks(case: str) -> dict[str, Fraction]:
    e = Fraction(1, 10**4)
    return {"eps": e, "bbeta": e / 10, "beta": e / 1000, "inv_b": Fraction(1, 100),
            "eps0": e / 10}


ZERO_SLACK = {s: Fraction(0) for s in SLACKS}


def _closed_form_route(system: ExponentSystem, free: str, pinned: str):
    choice = _closed_form_choice(system)
    limit = {k: v.evaluate(ZERO_SLACK) for k, v in choice.items()}
    point = dict(limit, **ZERO_SLACK)
    violated = []
    tight = []
    for c in system.lines(["core", "dissipation", "sign", "ansatz"]):
        val = c.expr.evaluate(point)
        if val > 0 or (c.role == "ansatz" and val != 0):
            violated.append(c.label)
        elif val == 0 and c.role != "sign" and c.expr.symbols() - set(SLACKS):
            tight.append(c.label)
    if violated:
        return None, violated, choice
    denominator, numerators = _split_objective(system, free, pinned)
    d = denominator.evaluate(point)
    if d <= 0:
        return None, ["objective denominator vanishes"], choice
    ratios = {label: num.evaluate(point) / d for label, num in numerators}
    best = max(ratios.values())
    tight += [label for label, v in ratios.items() if v == best]
    return best, tight, choice


def _closure_lines(system: ExponentSystem):
    return [c for c in system.lines(["core", "dissipation", "sign", "ansatz"])]


def _rows(polys_ub: list[Poly], polys_eq: list[Poly], names: list[str]):
    """Split linear polynomials ``p(x) <= 0`` / ``= 0`` into (A, b) with A x <= b."""
    def split(p: Poly):
        if any(len(k) > 1 for k in p.terms):
            raise PlannerError(f"nonlinear term in {p}")
        return ([p.terms.get((v,), Fraction(0)) for v in names], -p.terms.get((), Fraction(0)))
    ub = [split(p) for p in polys_ub]
    eq = [split(p) for p in polys_eq]
    return ([a for a, _ in ub], [b for _, b in ub], [a for a, _ in eq], [b for _, b in eq])


def _lp_route(system: ExponentSystem, free: str, pinned: str):
    """Minimize the objective bound over the zero-slack closure (Charnes-Cooper).

    With ``D(x) > 0`` the common denominator of the objective lines, substitute
    ``z = 1/D(x)`` and ``y = z x``; the closure ``a.x + c <= 0`` becomes
    ``a.y + c z <= 0`` and the bound ``max_j N_j(x)/D(x)`` becomes a linear
    epigraph variable ``t``.
    """
    names = [s for s in EXPONENTS if any(s in c.expr.symbols() for c in system.inequalities)]
    z, t = Poly.var("_z"), Poly.var("_t")

    def homogenize(poly: Poly) -> Poly:
        p = poly.substitute(ZERO_SLACK)
        const = p.terms.get((), Fraction(0))
        return Poly({k: v for k, v in p.terms.items() if k}) + const * z

    ub, eq = [-z], []
    for c in _closure_lines(system):
        h = homogenize(c.expr)
        if h.terms:
            (eq if c.role == "ansatz" else ub).append(h)
    denominator, numerators = _split_objective(system, free, pinned)
    eq.append(homogenize(denominator) - 1)
    ub += [homogenize(num) - t for _, num in numerators]
    cols = names + ["_z", "_t"]
    A_ub, b_ub, A_eq, b_eq = _rows(ub, eq, cols)
    cost = [Fraction(0)] * len(names) + [Fraction(0), Fraction(1)]
    res = lp.solve(cost, A_ub, b_ub, A_eq, b_eq)
    if res.status == lp.INFEASIBLE:
        return None
    if res.status == lp.UNBOUNDED:
        return Fraction(-1)
    return res.value


def _is_feasible(lines: list[Inequality]) -> bool:
    names = sorted({s for c in lines for s in c.expr.symbols()} - set(SLACKS))
    ub, eq = [], []
    for c in lines:
        e = c.expr.substitute(ZERO_SLACK)
        (eq if c.role == "ansatz" else ub).append(e)
    A_ub, b_ub, A_eq, b_eq = _rows(ub, eq, names)
    res = lp.solve([Fraction(0)] * len(names), A_ub, b_ub, A_eq, b_eq)
    return res.status != lp.INFEASIBLE


def infeasibility_certificate(system: ExponentSystem) -> list[str]:
    """Irreducible infeasible subset of the zero-slack closure (deletion filter)."""
    lines = _closure_lines(system)
    if _is_feasible(lines):
        return []
    keep = list(lines)
    for c in list(lines):
        trial = [x for x in keep if x is not c]
        if not _is_feasible(trial):
            keep = trial
    return [c.label for c in keep]


def threshold(case: str, alpha, objective: str | None = None, dissipation_on: bool = True,
              literal_reduction: bool = False, slacks: Mapping[str, object] | None = None) -> ThresholdResult:
    """Exact supremum of the objective exponent in the zero-slack limit.

    ``slacks`` overrides entries of the witness slack point (``eps``, ``bbeta``,
    ``beta``, ``inv_b``, ``eps0``); the witness must still be strictly feasible.
    """
    system = build_system(case, alpha, dissipation_on, literal_reduction=literal_reduction)
    objective = objective or default_objective(system.case)
    if objective != default_objective(system.case):
        raise PlannerError(f"case {system.case} supports only {default_objective(system.case)}")
    free, pinned = _objective_setup(system.case, objective)

    closed, tight, choice = _closed_form_route(system, free, pinned)
    lp = _lp_route(system, free, pinned)

    if lp is None:
        binding = infeasibility_certificate(system)
        if closed is not None:
            raise RouteMismatch("closed-form route feasible but LP closure infeasible")
        raise InfeasibleSystem(
            f"case {system.case} at alpha={system.alpha} is infeasible in the zero-slack limit",
            binding)
    if closed is None:
        raise RouteMismatch(f"LP closure feasible (bound {lp}) but closed-form choice violates {tight}")
    if closed != lp:
        raise RouteMismatch(f"closed-form bound {closed} differs from LP bound {lp}")

    value = None if closed <= 0 else 1 / closed
    witness = _witness(system, choice, free, pinned, slacks)
    return ThresholdResult(system.case, system.alpha, objective, value, witness, tight,
                           lp_value=lp, details={"bound_inverse": closed})


def _witness(system, choice, free, pinned, overrides=None) -> dict[str, Fraction]:
    slacks = _witness_slacks(system.case)
    for key, value in (overrides or {}).items():
        if key not in SLACKS:
            raise PlannerError(f"unknown slack {key!r}")
        slacks[key] = parse_rational(value)
    point = {k: v.evaluate(slacks) for k, v in choice.items()}
    point.update(slacks)
    denominator, numerators = _split_objective(system, free, pinned)
    d = denominator.evaluate(point)
    bound = max(num.evaluate(point) / d for _, num in numerators)
    # round the objective slightly inside the admissible range
    inv = Fraction(math.floor(bound * 10**6) + 2, 10**6)
    point[free] = inv
    point[pinned] = Fraction(0)
    check = check_point(system, point)
    if not check:
        raise InfeasibleSystem(
            f"case {system.case} at alpha={system.alpha}: the zero-slack closure is feasible "
            "but no strictly feasible point exists at positive slack", check.violated)
    return point


def is_feasible_at_zero_slack(case: str, alpha, dissipation_on: bool = True) -> bool:
    system = build_system(case, alpha, dissipation_on)
    return _is_feasible(_closure_lines(system))


# --------------------------------------------------------------------------
# Scaling heuristics
# --------------------------------------------------------------------------


@dataclass
class HeuristicBounds:
    alpha: Fraction
    dimension: Fraction
    n_min: Fraction
    n_max: Fraction
    empty: bool
    boundary: bool
    gamma_bound: Fraction | None
    p_bound: Fraction | None


def heuristic_bounds(alpha, dimension) -> HeuristicBounds:
    """Closed-form bounds from the dimensional-analysis heuristic.

    ``dimension`` is the spatial intermittency dimension D in [0, 3].
    """
    a = parse_rational(alpha)
    d = parse_rational(dimension)
    if a < 1 or not 0 <= d <= 3:
        raise PlannerError("need alpha >= 1 and D in [0, 3]")
    n_min = 4 * a - 7 + d
    n_max = 7 - d
    empty = n_min > n_max
    boundary = n_min == n_max
    gamma_bound = p_bound = None
    if not empty:
        if n_max > 0:
            gamma_bound = 2 / (1 + (5 - d) / n_max)
        n_low = max(n_min, Fraction(0))
        p_bound = Fraction(0) if d == 3 else 2 / (1 + (n_low + 2) / (3 - d))
    return HeuristicBounds(a, d, n_min, n_max, empty, boundary, gamma_bound, p_bound)


# --------------------------------------------------------------------------
# Numeric parameters for a desk-scale run
# --------------------------------------------------------------------------


@dataclass
class NumericParameters:
    lam: float
    r: float
    tau: float
    sigma: int
    ell: float | None
    mu: float | None
    requested: dict[str, float]
    rounding: dict[str, float]

    def as_dict(self) -> dict[str, float | None]:
        return {"lambda": self.lam, "r": self.r, "tau": self.tau, "sigma": self.sigma,
                "ell": self.ell, "mu": self.mu}


def numeric_parameters(result: ThresholdResult, lam_index: int, n_space: int, n_time: int,
                       n_lambda: int = 3, min_cells: float = 4.0,
                       max_temporal_product: int | None = None,
                       r_override: float | None = None) -> NumericParameters:
    """Turn witness exponents into concrete parameters at ``lambda = 2*pi*lam_index``.

    ``r`` is rounded so that ``lam_index * r`` is a positive integer (the tube
    lattice is then periodic on the unit torus), ``sigma`` to a positive
    integer.  ``tau`` and ``mu`` are clamped to what the time grid resolves.
    All adjustments are reported as log10 ratios in ``rounding``.

    Raises :class:`PlannerError` when the tube cross-section cannot cover
    ``min_cells`` grid cells.
    """
    if lam_index < 1:
        raise PlannerError("lambda must be 2*pi times a positive integer")
    lam = 2 * math.pi * lam_index
    w = result.witness
    power = lambda key: lam ** float(w[key])  # noqa: E731
    requested = {"r": power("n1"), "sigma": lam ** float(2 * w["eps"])}
    if result.case == "I":
        requested["tau"] = power("n2")
    else:
        requested.update(ell=power("n2"), mu=power("n3"), tau=power("n4"))

    diameter_cells = 2.0 / (lam * n_lambda) * n_space
    if diameter_cells < min_cells:
        raise PlannerError(
            f"tube diameter spans {diameter_cells:.2f} cells at n_space={n_space}, "
            f"lambda=2*pi*{lam_index}; need {min_cells}")

    r_target = requested["r"] if r_override is None else r_override
    r_int = max(1, round(lam_index * r_target))
    r = min(r_int, lam_index) / lam_index
    sigma = max(1, round(requested["sigma"]))
    limit = max_temporal_product or max(1, n_time // 16)
    tau = float(min(max(1.0, requested["tau"]), limit / sigma))
    if tau < 1:
        sigma, tau = limit, 1.0
    ell = mu = None
    if result.case == "II":
        ell = float(min(max(requested["ell"], r * r * 1.0001), 0.99))
        mu = float(min(requested["mu"], n_time / 4.0))
    rounding = {"r": math.log10(r / requested["r"]),
                "sigma": math.log10(sigma / requested["sigma"]),
                "tau": math.log10(tau / requested["tau"])}
    if ell is not None:
        rounding["ell"] = math.log10(ell / requested["ell"])
        rounding["mu"] = math.log10(mu / requested["mu"])
    return NumericParameters(lam, r, tau, sigma, ell, mu, requested, rounding)
