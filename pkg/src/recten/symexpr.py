"""Symbolic integer/boolean expressions used for indexes, bounds and guards.

Expressions are immutable and hash-consed: structurally equal trees are the
same object, so equality is pointer equality and sets/dicts of subtrees are
cheap. The hash-cons table is the only synchronized structure in the package.

Slices are half-open ([lo:hi) covers lo..hi-1). floordiv and mod are
Euclidean: for a positive divisor the remainder is always non-negative, which
is what makes rewrite rules like (i*5 + 3) % 5 -> 3 sound.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

from .polyhedra import Constraint, LinExpr


class SymExprError(Exception):
    pass


class ParseError(SymExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EvaluationError(SymExprError):
    pass


class InversionError(SymExprError):
    pass


LOOP = "loop"
BOUND = "bound"

_intern_lock = threading.Lock()
_symbols: dict[tuple[str, str], "Symbol"] = {}
_exprs: dict[tuple, "SymExpr"] = {}


class Symbol:
    """A named integer symbol: either a loop index or an upper bound."""

    __slots__ = ("name", "kind")

    def __new__(cls, name: str, kind: str = LOOP):
        if kind not in (LOOP, BOUND):
            raise SymExprError(f"bad symbol kind {kind!r}")
        key = (name, kind)
        with _intern_lock:
            got = _symbols.get(key)
            if got is None:
                got = object.__new__(cls)
                got.name = name
                got.kind = kind
                _symbols[key] = got
        return got

    def __repr__(self) -> str:
        return self.name

    def sort_key(self) -> tuple[str, str]:
        return (self.kind, self.name)

    # Arithmetic sugar producing SymExprs; equality/hash stay identity-based.
    def __add__(self, other):
        return sym(self) + other

    def __radd__(self, other):
        return wrap(other) + sym(self)

    def __sub__(self, other):
        return sym(self) - other

    def __rsub__(self, other):
        return wrap(other) - sym(self)

    def __mul__(self, other):
        return sym(self) * other

    def __rmul__(self, other):
        return wrap(other) * sym(self)

    def __mod__(self, other):
        return sym(self) % other

    def __floordiv__(self, other):
        return sym(self) // other

    def __neg__(self):
        return neg(sym(self))


SCALAR_KINDS = frozenset({
    "int", "bool", "sym", "add", "sub", "mul", "floordiv", "mod", "neg",
    "eq", "le", "lt", "ge", "gt", "and", "or", "not", "min", "max",
})
KINDS = SCALAR_KINDS | {"slice", "tuple"}

_CMP = ("eq", "le", "lt", "ge", "gt")
_BOOL_OPS = ("and", "or", "not")


class SymExpr:
    __slots__ = ("kind", "args", "value", "_hash")

    def __new__(cls, kind: str, args: tuple = (), value=None):
        key = (kind, args, value)
        with _intern_lock:
            got = _exprs.get(key)
            if got is None:
                got = object.__new__(cls)
                got.kind = kind
                got.args = args
                got.value = value
                got._hash = hash(key)
                _exprs[key] = got
        return got

    def __hash__(self) -> int:
        return self._hash

    # Interning makes identity equality correct; default object __eq__ works.

    def __repr__(self) -> str:
        return to_text(self)

    # Operator sugar for building indexes in Python programs and tests.
    def __add__(self, other):
        return add(self, wrap(other))

    def __radd__(self, other):
        return add(wrap(other), self)

    def __sub__(self, other):
        return sub(self, wrap(other))

    def __rsub__(self, other):
        return sub(wrap(other), self)

    def __mul__(self, other):
        return mul(self, wrap(other))

    def __rmul__(self, other):
        return mul(wrap(other), self)

    def __floordiv__(self, other):
        return floordiv(self, wrap(other))

    def __mod__(self, other):
        return mod(self, wrap(other))

    def __neg__(self):
        return neg(self)


def cint(v: int) -> SymExpr:
    return SymExpr("int", (), int(v))


def cbool(v: bool) -> SymExpr:
    return SymExpr("bool", (), bool(v))


TRUE = cbool(True)
FALSE = cbool(False)
ZERO = cint(0)
ONE = cint(1)


def sym(s: Symbol) -> SymExpr:
    return SymExpr("sym", (), s)


def wrap(v) -> SymExpr:
    if isinstance(v, SymExpr):
        return v
    if isinstance(v, Symbol):
        return sym(v)
    if isinstance(v, bool):
        return cbool(v)
    if isinstance(v, int):
        return cint(v)
    raise SymExprError(f"cannot wrap {v!r} as a SymExpr")


def _binop(kind: str):
    def build(a, b) -> SymExpr:
        return SymExpr(kind, (wrap(a), wrap(b)))
    return build


add = _binop("add")
sub = _binop("sub")
mul = _binop("mul")
floordiv = _binop("floordiv")
mod = _binop("mod")
eq = _binop("eq")
le = _binop("le")
lt = _binop("lt")
ge = _binop("ge")
gt = _binop("gt")


def neg(a) -> SymExpr:
    e = wrap(a)
    if e.kind == "int":
        return cint(-e.value)
    return SymExpr("neg", (e,))


def and_(*args) -> SymExpr:
    parts = [wrap(a) for a in args]
    if not parts:
        return TRUE
    out = parts[0]
    for p in parts[1:]:
        out = SymExpr("and", (out, p))
    return out


def or_(*args) -> SymExpr:
    parts = [wrap(a) for a in args]
    if not parts:
        return FALSE
    out = parts[0]
    for p in parts[1:]:
        out = SymExpr("or", (out, p))
    return out


def not_(a) -> SymExpr:
    return SymExpr("not", (wrap(a),))


def min_(*args) -> SymExpr:
    parts = tuple(wrap(a) for a in args)
    if len(parts) < 2:
        raise SymExprError("min needs at least two arguments")
    return SymExpr("min", parts)


def max_(*args) -> SymExpr:
    parts = tuple(wrap(a) for a in args)
    if len(parts) < 2:
        raise SymExprError("max needs at least two arguments")
    return SymExpr("max", parts)


def slc(lo, hi) -> SymExpr:
    return SymExpr("slice", (wrap(lo), wrap(hi)))


def tup(*args) -> SymExpr:
    return SymExpr("tuple", tuple(wrap(a) for a in args))


def components(e: SymExpr) -> tuple[SymExpr, ...]:
    """View any index expression as a tuple of components."""
    return e.args if e.kind == "tuple" else (e,)


# ---------------------------------------------------------------------------
# Parsing


_TWO_CHAR = ("==", "<=", ">=", "//")
_ONE_CHAR = "+-*%():,<>"
_KEYWORDS = ("and", "or", "not", "min", "max", "true", "false")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    toks: list[tuple[str, str, int]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if text[i:i + 2] in _TWO_CHAR:
            toks.append(("op", text[i:i + 2], i))
            i += 2
            continue
        if ch in _ONE_CHAR:
            toks.append(("op", ch, i))
            i += 1
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            toks.append(("int", text[i:j], i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            toks.append(("kw" if word in _KEYWORDS else "ident", word, i))
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    toks.append(("eof", "", n))
    return toks


def default_resolver(name: str) -> Symbol:
    """Names starting with an upper-case letter are bounds, others loop syms."""
    return Symbol(name, BOUND if name[:1].isupper() else LOOP)


class _Parser:
    def __init__(self, text: str, resolve: Callable[[str], Symbol]):
        self.toks = _tokenize(text)
        self.pos = 0
        self.resolve = resolve

    def peek(self):
        return self.toks[self.pos]

    def next(self):
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, val: str):
        t = self.next()
        if t[1] != val:
            raise ParseError(f"expected {val!r}, found {t[1]!r}", t[2])
        return t

    def at_op(self, *vals: str) -> bool:
        k, v, _ = self.peek()
        return k in ("op", "kw") and v in vals

    def parse_top(self) -> SymExpr:
        comps = [self.parse_component()]
        while self.at_op(","):
            self.next()
            comps.append(self.parse_component())
        t = self.next()
        if t[0] != "eof":
            raise ParseError(f"trailing input {t[1]!r}", t[2])
        return comps[0] if len(comps) == 1 else SymExpr("tuple", tuple(comps))

    def parse_component(self) -> SymExpr:
        lo = self.parse_or()
        if self.at_op(":"):
            self.next()
            hi = self.parse_or()
            return slc(lo, hi)
        return lo

    def parse_or(self) -> SymExpr:
        e = self.parse_and()
        while self.at_op("or"):
            self.next()
            e = SymExpr("or", (e, self.parse_and()))
        return e

    def parse_and(self) -> SymExpr:
        e = self.parse_not()
        while self.at_op("and"):
            self.next()
            e = SymExpr("and", (e, self.parse_not()))
        return e

    def parse_not(self) -> SymExpr:
        if self.at_op("not"):
            self.next()
            return not_(self.parse_not())
        return self.parse_cmp()

    def parse_cmp(self) -> SymExpr:
        e = self.parse_addsub()
        ops = {"==": "eq", "<=": "le", "<": "lt", ">=": "ge", ">": "gt"}
        if self.peek()[0] == "op" and self.peek()[1] in ops:
            op = self.next()[1]
            return SymExpr(ops[op], (e, self.parse_addsub()))
        return e

    def parse_addsub(self) -> SymExpr:
        e = self.parse_muldiv()
        while self.at_op("+", "-"):
            op = self.next()[1]
            rhs = self.parse_muldiv()
            e = SymExpr("add" if op == "+" else "sub", (e, rhs))
        return e

    def parse_muldiv(self) -> SymExpr:
        e = self.parse_unary()
        ops = {"*": "mul", "//": "floordiv", "%": "mod"}
        while self.at_op(*ops):
            op = self.next()[1]
            e = SymExpr(ops[op], (e, self.parse_unary()))
        return e

    def parse_unary(self) -> SymExpr:
        if self.at_op("-"):
            self.next()
            return neg(self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> SymExpr:
        k, v, off = self.next()
        if k == "int":
            return cint(int(v))
        if k == "kw" and v in ("true", "false"):
            return cbool(v == "true")
        if k == "kw" and v in ("min", "max"):
            self.expect("(")
            args = [self.parse_or()]
            while self.at_op(","):
                self.next()
                args.append(self.parse_or())
            self.expect(")")
            if len(args) < 2:
                raise ParseError(f"{v} needs at least two arguments", off)
            return SymExpr(v, tuple(args))
        if k == "ident":
            return sym(self.resolve(v))
        if k == "op" and v == "(":
            e = self.parse_or()
            self.expect(")")
            return e
        raise ParseError(f"unexpected token {v!r}" if v else "unexpected end of input", off)


def parse(text: str, resolve: Callable[[str], Symbol] | None = None) -> SymExpr:
    """Parse an index expression; unknown names become lazily created symbols."""
    return _Parser(text, resolve or default_resolver).parse_top()


# ---------------------------------------------------------------------------
# Printing

_PREC = {
    "or": 1, "and": 2, "not": 3,
    "eq": 4, "le": 4, "lt": 4, "ge": 4, "gt": 4,
    "add": 5, "sub": 5,
    "mul": 6, "floordiv": 6, "mod": 6,
    "neg": 7,
}
_OPTXT = {
    "or": " or ", "and": " and ",
    "eq": " == ", "le": " <= ", "lt": " < ", "ge": " >= ", "gt": " > ",
    "add": " + ", "sub": " - ",
    "mul": " * ", "floordiv": " // ", "mod": " % ",
}


def to_text(e: SymExpr, prec: int = 0) -> str:
    k = e.kind
    if k == "int":
        return str(e.value)
    if k == "bool":
        return "true" if e.value else "false"
    if k == "sym":
        return e.value.name
    if k == "tuple":
        return ", ".join(to_text(a) for a in e.args)
    if k == "slice":
        return f"{to_text(e.args[0], 1)}:{to_text(e.args[1], 1)}"
    if k in ("min", "max"):
        return f"{k}(" + ", ".join(to_text(a) for a in e.args) + ")"
    if k == "not":
        body = f"not {to_text(e.args[0], _PREC['not'])}"
        return f"({body})" if prec > _PREC["not"] else body
    if k == "neg":
        body = f"-{to_text(e.args[0], _PREC['neg'])}"
        return f"({body})" if prec > _PREC["neg"] else body
    p = _PREC[k]
    # Left-assoc chains keep the left child at the same level, the right
    # child one tighter (so a - (b + c) prints its parens).
    lhs = to_text(e.args[0], p)
    rhs = to_text(e.args[1], p + 1)
    body = f"{lhs}{_OPTXT[k]}{rhs}"
    return f"({body})" if prec > p else body


# ---------------------------------------------------------------------------
# Evaluation


def euclid_div(a: int, b: int) -> int:
    if b == 0:
        raise EvaluationError("division by zero")
    q = a // b
    if a % b != 0 and b < 0:
        q += 1
    return q


def euclid_mod(a: int, b: int) -> int:
    if b == 0:
        raise EvaluationError("modulo by zero")
    r = a % b
    if r < 0:
        r += abs(b)
    return r


def _as_int(v, what: str) -> int:
    if type(v) is bool or not isinstance(v, int):
        raise EvaluationError(f"{what} expects an integer, got {v!r}")
    return v


def _as_bool(v, what: str) -> bool:
    if type(v) is not bool:
        raise EvaluationError(f"{what} expects a boolean, got {v!r}")
    return v


def evaluate(e: SymExpr, env: Mapping[Symbol, int]):
    """Evaluate to int, bool, range (for slices) or tuple of those."""
    k = e.kind
    if k == "int" or k == "bool":
        return e.value
    if k == "sym":
        try:
            return env[e.value]
        except KeyError:
            raise EvaluationError(f"unbound symbol {e.value.name}") from None
    if k == "tuple":
        return tuple(evaluate(a, env) for a in e.args)
    if k == "slice":
        lo = _as_int(evaluate(e.args[0], env), "slice lower")
        hi = _as_int(evaluate(e.args[1], env), "slice upper")
        return range(lo, hi)
    if k == "not":
        return not _as_bool(evaluate(e.args[0], env), "not")
    if k == "neg":
        return -_as_int(evaluate(e.args[0], env), "neg")
    if k == "and":
        return _as_bool(evaluate(e.args[0], env), "and") and _as_bool(evaluate(e.args[1], env), "and")
    if k == "or":
        return _as_bool(evaluate(e.args[0], env), "or") or _as_bool(evaluate(e.args[1], env), "or")
    if k in ("min", "max"):
        vals = [_as_int(evaluate(a, env), k) for a in e.args]
        return min(vals) if k == "min" else max(vals)
    a = _as_int(evaluate(e.args[0], env), k)
    b = _as_int(evaluate(e.args[1], env), k)
    if k == "add":
        return a + b
    if k == "sub":
        return a - b
    if k == "mul":
        return a * b
    if k == "floordiv":
        return euclid_div(a, b)
    if k == "mod":
        return euclid_mod(a, b)
    if k == "eq":
        return a == b
    if k == "le":
        return a <= b
    if k == "lt":
        return a < b
    if k == "ge":
        return a >= b
    if k == "gt":
        return a > b
    raise EvaluationError(f"cannot evaluate kind {k!r}")


def free_symbols(e: SymExpr) -> frozenset[Symbol]:
    if e.kind == "sym":
        return frozenset((e.value,))
    out: frozenset[Symbol] = frozenset()
    for a in e.args:
        out |= free_symbols(a)
    return out


def substitute(e: SymExpr, mapping: Mapping[Symbol, SymExpr]) -> SymExpr:
    if e.kind == "sym":
        return mapping.get(e.value, e)
    if not e.args:
        return e
    args = tuple(substitute(a, mapping) for a in e.args)
    if args == e.args:
        return e
    return SymExpr(e.kind, args, e.value)


# ---------------------------------------------------------------------------
# Affine analysis and simplification


def as_affine(e: SymExpr) -> tuple[dict[Symbol, int], int] | None:
    """Decompose into sum(coef*symbol) + const, or None if not affine."""
    k = e.kind
    if k == "int":
        return {}, e.value
    if k == "sym":
        return {e.value: 1}, 0
    if k == "neg":
        r = as_affine(e.args[0])
        if r is None:
            return None
        return {s: -c for s, c in r[0].items()}, -r[1]
    if k in ("add", "sub"):
        a = as_affine(e.args[0])
        b = as_affine(e.args[1])
        if a is None or b is None:
            return None
        sign = 1 if k == "add" else -1
        coeffs = dict(a[0])
        for s, c in b[0].items():
            coeffs[s] = coeffs.get(s, 0) + sign * c
        return {s: c for s, c in coeffs.items() if c != 0}, a[1] + sign * b[1]
    if k == "mul":
        a = as_affine(e.args[0])
        b = as_affine(e.args[1])
        if a is None or b is None:
            return None
        if not a[0]:
            return {s: a[1] * c for s, c in b[0].items() if a[1] * c != 0}, a[1] * b[1]
        if not b[0]:
            return {s: b[1] * c for s, c in a[0].items() if b[1] * c != 0}, a[1] * b[1]
        return None
    return None


def affine_expr(coeffs: Mapping[Symbol, int], const: int) -> SymExpr:
    """Rebuild a canonical expression from an affine decomposition."""
    terms = sorted(((s, c) for s, c in coeffs.items() if c != 0), key=lambda t: t[0].sort_key())
    pos = [(s, c) for s, c in terms if c > 0]
    neg_terms = [(s, c) for s, c in terms if c < 0]

    def one(s: Symbol, c: int) -> SymExpr:
        return sym(s) if c == 1 else mul(cint(c), sym(s))

    expr: SymExpr | None = None
    for s, c in pos:
        t = one(s, c)
        expr = t if expr is None else add(expr, t)
    if expr is None:
        expr = cint(const)
        base_const_used = True
    else:
        base_const_used = False
    for s, c in neg_terms:
        expr = sub(expr, one(s, -c))
    if not base_const_used:
        if const > 0:
            expr = add(expr, cint(const))
        elif const < 0:
            expr = sub(expr, cint(-const))
    return expr


def _affine_diff_const(a: SymExpr, b: SymExpr) -> int | None:
    ra, rb = as_affine(a), as_affine(b)
    if ra is None or rb is None:
        return None
    coeffs = dict(ra[0])
    for s, c in rb[0].items():
        coeffs[s] = coeffs.get(s, 0) - c
    if any(c != 0 for c in coeffs.values()):
        return None
    return ra[1] - rb[1]


def simplify(e: SymExpr) -> SymExpr:
    k = e.kind
    if not e.args:
        return e
    args = tuple(simplify(a) for a in e.args)
    if k in ("tuple", "slice"):
        return SymExpr(k, args)

    if k in ("add", "sub", "mul", "neg"):
        aff = as_affine(SymExpr(k, args))
        if aff is not None:
            return affine_expr(*aff)
        if k == "neg" and args[0].kind == "neg":
            return args[0].args[0]
        if k == "mul":
            a, b = args
            if a == ZERO or b == ZERO:
                return ZERO
            if a == ONE:
                return b
            if b == ONE:
                return a
        return SymExpr(k, args)

    if k == "floordiv":
        a, b = args
        if a.kind == "int" and b.kind == "int":
            return cint(euclid_div(a.value, b.value))
        if b == ONE:
            return a
        return SymExpr(k, args)

    if k == "mod":
        a, b = args
        if b.kind == "int" and b.value > 0:
            m = b.value
            if m == 1:
                return ZERO
            aff = as_affine(a)
            if aff is not None:
                coeffs, const = aff
                kept = {s: c for s, c in coeffs.items() if euclid_mod(c, m) != 0}
                const = euclid_mod(const, m)
                if kept != coeffs or const != aff[1]:
                    if not kept:
                        return cint(const)
                    return SymExpr("mod", (affine_expr(kept, const), b))
        if a.kind == "int" and b.kind == "int":
            return cint(euclid_mod(a.value, b.value))
        return SymExpr(k, args)

    if k in _CMP:
        d = _affine_diff_const(args[0], args[1])
        if d is not None:
            return cbool({
                "eq": d == 0, "le": d <= 0, "lt": d < 0, "ge": d >= 0, "gt": d > 0,
            }[k])
        return SymExpr(k, args)

    if k == "and":
        a, b = args
        if a == FALSE or b == FALSE:
            return FALSE
        if a == TRUE:
            return b
        if b == TRUE:
            return a
        if a == b:
            return a
        return SymExpr(k, args)
    if k == "or":
        a, b = args
        if a == TRUE or b == TRUE:
            return TRUE
        if a == FALSE:
            return b
        if b == FALSE:
            return a
        if a == b:
            return a
        return SymExpr(k, args)
    if k == "not":
        a = args[0]
        if a.kind == "bool":
            return cbool(not a.value)
        if a.kind == "not":
            return a.args[0]
        flips = {"lt": "ge", "ge": "lt", "le": "gt", "gt": "le"}
        if a.kind in flips:
            return SymExpr(flips[a.kind], a.args)
        return SymExpr(k, args)

    if k in ("min", "max"):
        flat: list[SymExpr] = []
        for a in args:
            flat.extend(a.args if a.kind == k else (a,))
        kept: list[SymExpr] = []
        for a in flat:
            dominated = False
            for i, b in enumerate(kept):
                d = _affine_diff_const(a, b)  # a - b
                if d is None:
                    continue
                if (k == "min" and d >= 0) or (k == "max" and d <= 0):
                    dominated = True
                    break
                kept[i] = a
                dominated = True
                break
            if not dominated:
                kept.append(a)
        if len(kept) == 1:
            return kept[0]
        return SymExpr(k, tuple(kept))

    return SymExpr(k, args)


def classify_affine(e: SymExpr, dims: Sequence[Symbol] | None = None) -> str:
    """linear / affine / slice-affine / non-affine, over the tuple view of e."""
    comps = components(e)

    def endpoint_ok(x: SymExpr) -> bool:
        if as_affine(x) is not None:
            return True
        if x.kind in ("min", "max"):
            return all(as_affine(a) is not None for a in x.args)
        return False

    if any(c.kind == "slice" for c in comps):
        for c in comps:
            if c.kind == "slice":
                if not (endpoint_ok(c.args[0]) and endpoint_ok(c.args[1])):
                    return "non-affine"
            elif as_affine(c) is None:
                return "non-affine"
        return "slice-affine"

    if all(as_affine(c) is not None for c in comps):
        loop_ok = True
        seen: set[Symbol] = set()
        for j, c in enumerate(comps):
            if c.kind != "sym" or c.value.kind != LOOP or c.value in seen:
                loop_ok = False
                break
            if dims is not None and (j >= len(dims) or c.value != dims[j]):
                loop_ok = False
                break
            seen.add(c.value)
        return "linear" if loop_ok else "affine"
    return "non-affine"


# ---------------------------------------------------------------------------
# Dependence inversion


class InvertedDependence:
    """phi_inv as a tuple of per-sink-dim expressions over the source dims,
    plus an optional membership condition (also over the source dims)."""

    __slots__ = ("exprs", "condition")

    def __init__(self, exprs: tuple[SymExpr, ...], condition: SymExpr | None):
        self.exprs = exprs
        self.condition = condition

    def __repr__(self) -> str:
        body = ", ".join(to_text(x) for x in self.exprs)
        if self.condition is not None:
            return f"[{body}] if {to_text(self.condition)}"
        return f"[{body}]"


def _terms(e: SymExpr, kind: str) -> list[SymExpr]:
    return list(e.args) if e.kind == kind else [e]


def _split_affine(e: SymExpr, sink_dims: Sequence[Symbol]) -> tuple[Symbol | None, int, SymExpr]:
    """Write e as coef*s + rest with s a sink dim; coef must be 0 or +-1."""
    aff = as_affine(e)
    if aff is None:
        raise InversionError(f"component {to_text(e)} is not affine")
    coeffs, const = aff
    present = [s for s in coeffs if s in sink_dims]
    if not present:
        return None, 0, e
    if len(present) > 1:
        raise InversionError(f"component {to_text(e)} mixes sink dims {present}")
    s = present[0]
    coef = coeffs[s]
    if coef not in (1, -1):
        raise InversionError(f"component {to_text(e)} has non-unit coefficient on {s.name}")
    rest = {k: v for k, v in coeffs.items() if k is not s}
    return s, coef, affine_expr(rest, const)


def invert_dependence(phi: SymExpr, sink_dims: Sequence[Symbol],
                      source_dims: Sequence[Symbol],
                      bounds: Mapping[Symbol, SymExpr]) -> InvertedDependence:
    """Invert a dependence: phi maps a sink point to the source points it
    reads; the result maps a source point to the sink points reading it.

    Each returned component is a scalar (exact preimage) or a half-open slice;
    the condition restricts which source points are read at all."""
    comps = components(phi)
    if len(comps) != len(source_dims):
        raise InversionError(
            f"phi has {len(comps)} components for {len(source_dims)} source dims")
    eqs: dict[Symbol, list[SymExpr]] = {}
    lbs: dict[Symbol, list[SymExpr]] = {}
    ubs: dict[Symbol, list[SymExpr]] = {}
    conds: list[SymExpr] = []

    for j, comp in enumerate(comps):
        u = sym(source_dims[j])
        if comp.kind == "slice":
            lo, hi = comp.args
            if lo.kind == "min" or hi.kind == "max":
                raise InversionError(f"slice {to_text(comp)} endpoints not convex for inversion")
            for term in _terms(lo, "max"):
                s, coef, rest = _split_affine(term, sink_dims)
                if s is None:
                    if _affine_diff_const(term, ZERO) != 0:
                        conds.append(ge(u, term))
                elif coef == 1:
                    ubs.setdefault(s, []).append(simplify(add(sub(u, rest), ONE)))
                else:
                    lbs.setdefault(s, []).append(simplify(sub(rest, u)))
            for term in _terms(hi, "min"):
                s, coef, rest = _split_affine(term, sink_dims)
                if s is None:
                    if term != bounds.get(source_dims[j]):
                        conds.append(lt(u, term))
                elif coef == 1:
                    lbs.setdefault(s, []).append(simplify(add(sub(u, rest), ONE)))
                else:
                    ubs.setdefault(s, []).append(simplify(sub(rest, u)))
        else:
            s, coef, rest = _split_affine(comp, sink_dims)
            if s is None:
                conds.append(eq(u, comp))
            else:
                expr = sub(u, rest) if coef == 1 else sub(rest, u)
                eqs.setdefault(s, []).append(simplify(expr))

    out: list[SymExpr] = []
    for s in sink_dims:
        if s in eqs:
            first = eqs[s][0]
            for other in eqs[s][1:]:
                conds.append(eq(first, other))
            for lb in lbs.get(s, ()):
                conds.append(ge(first, lb))
            for ub in ubs.get(s, ()):
                conds.append(lt(first, ub))
            out.append(first)
            continue
        lo_terms = lbs.get(s, [])
        hi_terms = ubs.get(s, [])
        lo = simplify(max_(ZERO, *lo_terms)) if lo_terms else ZERO
        if hi_terms:
            hi = hi_terms[0] if len(hi_terms) == 1 else simplify(min_(*hi_terms))
        else:
            hi = wrap(bounds[s])
        out.append(slc(lo, hi))

    cond: SymExpr | None = None
    if conds:
        cond = simplify(and_(*conds))
        if cond == TRUE:
            cond = None
    return InvertedDependence(tuple(out), cond)


def enumerate_points(index: SymExpr, env: Mapping[Symbol, int]) -> list[tuple[int, ...]]:
    """All concrete points an index expression touches under env: scalars
    contribute one coordinate, slices a half-open range; the result is their
    cartesian product in component order."""
    axes: list[Iterable[int]] = []
    for comp in components(index):
        v = evaluate(comp, env)
        if isinstance(v, range):
            axes.append(v)
        elif type(v) is bool:
            raise EvaluationError("boolean component in index")
        else:
            axes.append((v,))
    out: list[tuple[int, ...]] = [()]
    for axis in axes:
        out = [p + (x,) for p in out for x in axis]
    return out


# ---------------------------------------------------------------------------
# Presburger translation

SNK = "snk"
SRC = "src"
PARAM = "param"
AUX = "aux"


class _Linearizer:
    """Turns integer SymExprs into LinExprs over tagged vars, splitting into
    pieces at min/max and introducing aux vars for mod/floordiv."""

    def __init__(self, tag_of: Callable[[Symbol], tuple]):
        self.tag_of = tag_of
        self.naux = 0

    def fresh(self) -> tuple:
        self.naux += 1
        return (AUX, self.naux)

    def int_pieces(self, e: SymExpr) -> list[tuple[LinExpr, list[Constraint]]]:
        k = e.kind
        if k == "int":
            return [(LinExpr.constant(e.value), [])]
        if k == "sym":
            return [(LinExpr.of(self.tag_of(e.value)), [])]
        if k == "neg":
            return [(x.scale(-1), cs) for x, cs in self.int_pieces(e.args[0])]
        if k in ("add", "sub"):
            out = []
            for xa, ca in self.int_pieces(e.args[0]):
                for xb, cb in self.int_pieces(e.args[1]):
                    xx = xa.add(xb) if k == "add" else xa.sub(xb)
                    out.append((xx, ca + cb))
            return out
        if k == "mul":
            out = []
            for xa, ca in self.int_pieces(e.args[0]):
                for xb, cb in self.int_pieces(e.args[1]):
                    if xa.is_const():
                        out.append((xb.scale(xa.const), ca + cb))
                    elif xb.is_const():
                        out.append((xa.scale(xb.const), ca + cb))
                    else:
                        raise SymExprError(f"non-linear product {to_text(e)}")
            return out
        if k in ("min", "max"):
            # value v with per-piece selection: piece i asserts v == arg_i and
            # arg_i dominates the others.
            arg_pieces = [self.int_pieces(a) for a in e.args]
            out = []
            for i in range(len(e.args)):
                for chosen, c0 in arg_pieces[i]:
                    for combo, extra in _combine([p for j, p in enumerate(arg_pieces) if j != i]):
                        cs = list(c0) + extra
                        for other in combo:
                            diff = other.sub(chosen) if k == "min" else chosen.sub(other)
                            cs.append(Constraint(diff, False))
                        out.append((chosen, cs))
            return out
        if k in ("mod", "floordiv"):
            m_pieces = self.int_pieces(e.args[1])
            out = []
            for xa, ca in self.int_pieces(e.args[0]):
                for xm, cm in m_pieces:
                    if not xm.is_const() or xm.const <= 0:
                        raise SymExprError(f"{k} needs a positive constant divisor: {to_text(e)}")
                    m = xm.const
                    q = self.fresh()
                    r = self.fresh()
                    cs = ca + cm + [
                        Constraint(xa.sub(LinExpr.of(q, m)).sub(LinExpr.of(r)), True),
                        Constraint(LinExpr.of(r), False),
                        Constraint(LinExpr.constant(m - 1).sub(LinExpr.of(r)), False),
                    ]
                    out.append((LinExpr.of(r if k == "mod" else q), cs))
            return out
        raise SymExprError(f"cannot linearize kind {k!r}")

    def bool_pieces(self, e: SymExpr, negate: bool = False) -> list[list[Constraint]]:
        k = e.kind
        if k == "bool":
            v = e.value != negate
            return [[]] if v else []
        if k == "not":
            return self.bool_pieces(e.args[0], not negate)
        if k == "and" and not negate or k == "or" and negate:
            out = []
            for ca in self.bool_pieces(e.args[0], negate):
                for cb in self.bool_pieces(e.args[1], negate):
                    out.append(ca + cb)
            return out
        if k in ("and", "or"):
            return self.bool_pieces(e.args[0], negate) + self.bool_pieces(e.args[1], negate)
        if k in _CMP:
            op = k
            if negate:
                op = {"eq": "ne", "le": "gt", "lt": "ge", "ge": "lt", "gt": "le"}[k]
            out = []
            for xa, ca in self.int_pieces(e.args[0]):
                for xb, cb in self.int_pieces(e.args[1]):
                    base = ca + cb
                    d = xa.sub(xb)
                    if op == "eq":
                        out.append(base + [Constraint(d, True)])
                    elif op == "ne":
                        out.append(base + [Constraint(d.sub(LinExpr.constant(1)), False)])
                        out.append(base + [Constraint(d.scale(-1).sub(LinExpr.constant(1)), False)])
                    elif op == "le":
                        out.append(base + [Constraint(d.scale(-1), False)])
                    elif op == "lt":
                        out.append(base + [Constraint(d.scale(-1).sub(LinExpr.constant(1)), False)])
                    elif op == "ge":
                        out.append(base + [Constraint(d, False)])
                    else:  # gt
                        out.append(base + [Constraint(d.sub(LinExpr.constant(1)), False)])
            return out
        raise SymExprError(f"cannot linearize condition kind {k!r}")


def _combine(piece_lists):
    """Cartesian product of [(expr, constraints)] lists."""
    out = [([], [])]
    for pieces in piece_lists:
        nxt = []
        for exprs, cs in out:
            for x, c in pieces:
                nxt.append((exprs + [x], cs + c))
        out = nxt
    return [(tuple(xs), cs) for xs, cs in out]


def to_presburger(phi: SymExpr, snk_dims: Sequence[Symbol], src_dims: Sequence[Symbol],
                  snk_bounds: Mapping[Symbol, SymExpr], src_bounds: Mapping[Symbol, SymExpr],
                  psi: SymExpr | None = None) -> list[list[Constraint]]:
    """Dependence relation pieces: each piece is a conjunction of constraints
    over tagged vars (snk, s) / (src, u) / (param, b) / (aux, n). The union of
    pieces covers exactly the pairs (sink point, source point) where the sink
    reads the source (conditions may add further pieces)."""

    def tag_sink(s: Symbol) -> tuple:
        return (SNK, s) if s.kind == LOOP else (PARAM, s)

    def tag_source(s: Symbol) -> tuple:
        return (SRC, s) if s.kind == LOOP else (PARAM, s)

    lin_snk = _Linearizer(tag_sink)

    base: list[Constraint] = []
    for dims, bounds, tagger in ((snk_dims, snk_bounds, tag_sink), (src_dims, src_bounds, tag_source)):
        for d in dims:
            v = LinExpr.of(tagger(d))
            base.append(Constraint(v, False))
            bexpr = wrap(bounds[d])
            if bexpr.kind == "int":
                ub = LinExpr.constant(bexpr.value)
            elif bexpr.kind == "sym":
                ub = LinExpr.of((PARAM, bexpr.value))
            else:
                raise SymExprError(f"domain bound {to_text(bexpr)} must be const or symbol")
            base.append(Constraint(ub.sub(v).sub(LinExpr.constant(1)), False))

    pieces: list[list[Constraint]] = [list(base)]
    comps = components(phi)
    if len(comps) != len(src_dims):
        raise SymExprError(f"phi arity {len(comps)} != source rank {len(src_dims)}")

    for j, comp in enumerate(comps):
        u = LinExpr.of(tag_source(src_dims[j]))
        new_pieces: list[list[Constraint]] = []
        if comp.kind == "slice":
            lo, hi = comp.args
            for piece in pieces:
                for xl, cl in lin_snk.int_pieces(lo):
                    for xh, ch in lin_snk.int_pieces(hi):
                        new_pieces.append(piece + cl + ch + [
                            Constraint(u.sub(xl), False),
                            Constraint(xh.sub(u).sub(LinExpr.constant(1)), False),
                        ])
        else:
            for piece in pieces:
                for xc, cc in lin_snk.int_pieces(comp):
                    new_pieces.append(piece + cc + [Constraint(u.sub(xc), True)])
        pieces = new_pieces

    if psi is not None:
        cond_pieces = lin_snk.bool_pieces(simplify(psi))
        pieces = [p + cp for p in pieces for cp in cond_pieces]
    return pieces
