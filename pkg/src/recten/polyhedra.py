"""Linear constraint systems over tagged integer variables.

Variables are arbitrary hashable tags; coefficients stay integral throughout
(Fourier-Motzkin combines rows by cross-multiplication, never division), so
elimination is exact over the rationals and a sound over-approximation of the
integer sets we care about: emptiness checks and upper bounds derived here are
conservative, which is the safe direction for dependence analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

Var = Any


def _vkey(v: Var) -> str:
    return repr(v)


@dataclass(frozen=True)
class LinExpr:
    """Integer-coefficient linear expression: sum(coef * var) + const."""

    terms: tuple[tuple[Var, int], ...] = ()
    const: int = 0

    @staticmethod
    def make(coeffs: Mapping[Var, int], const: int = 0) -> "LinExpr":
        items = tuple(sorted(((v, c) for v, c in coeffs.items() if c != 0), key=lambda t: _vkey(t[0])))
        return LinExpr(items, const)

    @staticmethod
    def of(var: Var, coef: int = 1) -> "LinExpr":
        return LinExpr.make({var: coef})

    @staticmethod
    def constant(c: int) -> "LinExpr":
        return LinExpr((), c)

    def coeffs(self) -> dict[Var, int]:
        return dict(self.terms)

    def coef(self, var: Var) -> int:
        for v, c in self.terms:
            if v == var:
                return c
        return 0

    def vars(self) -> set[Var]:
        return {v for v, _ in self.terms}

    def add(self, other: "LinExpr") -> "LinExpr":
        coeffs = self.coeffs()
        for v, c in other.terms:
            coeffs[v] = coeffs.get(v, 0) + c
        return LinExpr.make(coeffs, self.const + other.const)

    def sub(self, other: "LinExpr") -> "LinExpr":
        return self.add(other.scale(-1))

    def scale(self, k: int) -> "LinExpr":
        if k == 0:
            return LinExpr.constant(0)
        return LinExpr(tuple((v, c * k) for v, c in self.terms), self.const * k)

    def drop(self, var: Var) -> "LinExpr":
        return LinExpr(tuple((v, c) for v, c in self.terms if v != var), self.const)

    def evaluate(self, env: Mapping[Var, int]) -> int:
        return self.const + sum(c * env[v] for v, c in self.terms)

    def is_const(self) -> bool:
        return not self.terms

    def __repr__(self) -> str:
        parts = [f"{c}*{v}" for v, c in self.terms]
        parts.append(str(self.const))
        return " + ".join(parts)


@dataclass(frozen=True)
class Constraint:
    """expr >= 0 (is_eq False) or expr == 0 (is_eq True)."""

    expr: LinExpr
    is_eq: bool = False

    def __repr__(self) -> str:
        return f"{self.expr!r} {'==' if self.is_eq else '>='} 0"


def _subst_eq(target: Constraint, var: Var, eq_expr: LinExpr, eq_coef: int) -> Constraint:
    """Eliminate var from target given eq_coef*var + eq_expr == 0 (eq_coef = +-1)."""
    c = target.expr.coef(var)
    if c == 0:
        return target
    # var == -eq_expr / eq_coef; with |eq_coef| == 1 this is exact.
    repl = eq_expr.scale(-1 * eq_coef)  # eq_coef in {1,-1}: var == repl
    new = target.expr.drop(var).add(repl.scale(c))
    return Constraint(new, target.is_eq)


def eliminate(constraints: Iterable[Constraint], var: Var) -> list[Constraint] | None:
    """Remove var by substitution or Fourier-Motzkin. Returns None when a
    constant contradiction surfaces during the combine step."""
    cs = list(constraints)
    eqs = [c for c in cs if c.is_eq and c.expr.coef(var) != 0]
    unit = next((c for c in eqs if abs(c.expr.coef(var)) == 1), None)
    out: list[Constraint] = []
    if unit is not None:
        k = unit.expr.coef(var)
        rest = unit.expr.drop(var)
        for c in cs:
            if c is unit:
                continue
            out.append(_subst_eq(c, var, rest, k))
        return _check(out)
    if eqs:
        # Non-unit equality: scale every other row to cancel var (rational-exact).
        eq = eqs[0]
        a = eq.expr.coef(var)
        for c in cs:
            if c is eq:
                continue
            b = c.expr.coef(var)
            if b == 0:
                out.append(c)
            else:
                combined = c.expr.scale(abs(a)).sub(eq.expr.scale(b * (abs(a) // a)))
                out.append(Constraint(combined, c.is_eq))
        return _check(out)

    lowers: list[LinExpr] = []  # c>0: var >= -rest/c, stored as full expr
    uppers: list[LinExpr] = []  # c<0
    for c in cs:
        k = c.expr.coef(var)
        if k == 0:
            out.append(c)
        elif k > 0:
            lowers.append(c.expr)
        else:
            uppers.append(c.expr)
    for lo in lowers:
        cl = lo.coef(var)
        for up in uppers:
            cu = -up.coef(var)
            combined = up.drop(var).scale(cl).add(lo.drop(var).scale(cu))
            out.append(Constraint(combined, False))
    return _check(out)


def _check(cs: list[Constraint]) -> list[Constraint] | None:
    kept = []
    for c in cs:
        if c.expr.is_const():
            if c.is_eq and c.expr.const != 0:
                return None
            if not c.is_eq and c.expr.const < 0:
                return None
        else:
            kept.append(c)
    return kept


def feasible(constraints: Iterable[Constraint]) -> bool:
    cs: list[Constraint] | None = list(constraints)
    while cs:
        vs = set()
        for c in cs:
            vs |= c.expr.vars()
        if not vs:
            return _check(cs) is not None
        var = sorted(vs, key=_vkey)[0]
        cs = eliminate(cs, var)
        if cs is None:
            return False
    return True


_OBJ = ("__objective__",)


@dataclass(frozen=True)
class Bound:
    """Result of maximizing an objective over one conjunction."""

    kind: str  # "bounded" | "param" | "unbounded" | "empty"
    value: int | None = None


def max_objective(constraints: Iterable[Constraint], objective: LinExpr,
                  param_vars: frozenset[Var] | set[Var]) -> Bound:
    """Max of objective over the (rational relaxation of the) constraint set.

    param_vars survive elimination; a bound that still mentions them is
    reported as kind "param" (no constant ceiling exists for all parameter
    values)."""
    cs = list(constraints)
    if not feasible(cs):
        return Bound("empty")
    cs.append(Constraint(objective.sub(LinExpr.of(_OBJ)), True))
    keep = set(param_vars) | {_OBJ}
    work: list[Constraint] | None = cs
    while True:
        assert work is not None
        vs = set()
        for c in work:
            vs |= c.expr.vars()
        elim = sorted((v for v in vs if v not in keep), key=_vkey)
        if not elim:
            break
        work = eliminate(work, elim[0])
        if work is None:
            return Bound("empty")

    best: int | None = None
    saw_param_upper = False
    for c in work:
        k = c.expr.coef(_OBJ)
        if k == 0:
            continue
        candidates = []
        if c.is_eq:
            candidates.append(c.expr if k < 0 else c.expr.scale(-1))
        elif k < 0:
            candidates.append(c.expr)
        for expr in candidates:
            kk = -expr.coef(_OBJ)
            rest = expr.drop(_OBJ)
            if rest.vars():
                saw_param_upper = True
                continue
            val = rest.const // kk  # floor: valid integer ceiling
            best = val if best is None else min(best, val)
    if best is not None:
        return Bound("bounded", best)
    return Bound("param" if saw_param_upper else "unbounded")
