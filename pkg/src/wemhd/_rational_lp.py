"""Dense two-phase simplex over :class:`fractions.Fraction`.

Small problems only (a few dozen rows and columns).  Bland's rule is used for
both the entering and the leaving variable, so degenerate problems terminate.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


@dataclass
class LPResult:
    status: str
    value: Fraction | None = None
    x: list[Fraction] | None = None


def _pivot(T: list[list[Fraction]], row: int, col: int) -> None:
    piv = T[row][col]
    T[row] = [v / piv for v in T[row]]
    pr = T[row]
    for i, r in enumerate(T):
        if i != row and r[col] != 0:
            f = r[col]
            T[i] = [a - f * b for a, b in zip(r, pr)]


def _run(T, basis, cost, allowed) -> str:
    """Minimize ``cost . x`` over the tableau; ``allowed`` masks usable columns."""
    ncols = len(T[0]) - 1
    while True:
        entering = None
        for j in range(ncols):
            if not allowed[j] or j in basis:
                continue
            d = cost[j] - sum(cost[basis[i]] * T[i][j] for i in range(len(T)))
            if d < 0:
                entering = j
                break
        if entering is None:
            return OPTIMAL
        best = None
        for i, r in enumerate(T):
            a = r[entering]
            if a > 0:
                ratio = r[-1] / a
                key = (ratio, basis[i])
                if best is None or key < best[0]:
                    best = (key, i)
        if best is None:
            return UNBOUNDED
        row = best[1]
        _pivot(T, row, entering)
        basis[row] = entering


def solve(c: Sequence, A_ub: Sequence[Sequence] = (), b_ub: Sequence = (),
          A_eq: Sequence[Sequence] = (), b_eq: Sequence = ()) -> LPResult:
    """Minimize ``c . x`` subject to ``A_ub x <= b_ub`` and ``A_eq x = b_eq``, x free."""
    n = len(c)
    c = [Fraction(v) for v in c]
    m_ub, m_eq = len(A_ub), len(A_eq)
    m = m_ub + m_eq
    # columns: x+ (n), x- (n), slacks (m_ub), artificials (m)
    nx = 2 * n + m_ub
    ncols = nx + m
    T: list[list[Fraction]] = []
    for i in range(m):
        if i < m_ub:
            a, b = A_ub[i], b_ub[i]
        else:
            a, b = A_eq[i - m_ub], b_eq[i - m_ub]
        row = [Fraction(0)] * (ncols + 1)
        for j in range(n):
            v = Fraction(a[j])
            row[j] = v
            row[n + j] = -v
        if i < m_ub:
            row[2 * n + i] = Fraction(1)
        row[-1] = Fraction(b)
        if row[-1] < 0:
            row = [-v for v in row]
        row[nx + i] = Fraction(1)
        T.append(row)
    basis = [nx + i for i in range(m)]

    phase1 = [Fraction(0)] * nx + [Fraction(1)] * m
    _run(T, basis, phase1, [True] * ncols)
    if sum(T[i][-1] for i in range(m) if basis[i] >= nx) > 0:
        return LPResult(INFEASIBLE)

    # drive remaining (zero-valued) artificials out of the basis
    i = 0
    while i < len(T):
        if basis[i] >= nx:
            col = next((j for j in range(nx) if T[i][j] != 0 and j not in basis), None)
            if col is None:
                del T[i]
                del basis[i]
                continue
            _pivot(T, i, col)
            basis[i] = col
        i += 1

    cost = c + [-v for v in c] + [Fraction(0)] * m_ub + [Fraction(0)] * m
    allowed = [True] * nx + [False] * m
    status = _run(T, basis, cost, allowed)
    if status == UNBOUNDED:
        return LPResult(UNBOUNDED)
    xs = [Fraction(0)] * ncols
    for i, j in enumerate(basis):
        xs[j] = T[i][-1]
    x = [xs[j] - xs[n + j] for j in range(n)]
    value = sum(ci * xi for ci, xi in zip(c, x))
    return LPResult(OPTIMAL, value, x)
