"""Expression language: parsing, evaluation, simplification, inversion."""

from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recten import symexpr as se
from recten.symexpr import (
    BOUND, LOOP, InversionError, ParseError, Symbol, cbool, cint,
    classify_affine, evaluate, invert_dependence, parse, simplify, slc, sym,
    substitute, to_text, tup,
)

t = Symbol("t", LOOP)
b = Symbol("b", LOOP)
i = Symbol("i", LOOP)
T = Symbol("T", BOUND)
B = Symbol("B", BOUND)
I = Symbol("I", BOUND)
n = Symbol("n", BOUND)


def test_interning_gives_identity():
    assert parse("t + 1") is parse("t+1")
    assert sym(t) is sym(Symbol("t"))
    assert cint(3) is cint(3)
    assert parse("t + 1") is not parse("1 + t")


@pytest.mark.parametrize("text,env,expected", [
    ("t + 3", {t: 4}, 7),
    ("2 * t - 1", {t: 5}, 9),
    ("t // 2", {t: 7}, 3),
    ("t % 4", {t: 11}, 3),
    ("-t % 4", {t: 3}, 1),          # euclidean: remainder non-negative
    ("-7 // 2", {}, -4),            # euclidean: floor for positive divisor
    ("min(t + 5, T)", {t: 8, T: 10}, 10),
    ("max(0, t - 3)", {t: 1}, 0),
    ("t == 0 or t == 3", {t: 3}, True),
    ("not (t < 2)", {t: 1}, False),
    ("(i + 1) % 5 == 0", {i: 9}, True),
    ("(i + 1) % 5 == 0", {i: 7}, False),
])
def test_evaluate_examples(text, env, expected):
    assert evaluate(parse(text), env) == expected


def test_evaluate_slice_is_half_open():
    assert list(evaluate(parse("t:T"), {t: 2, T: 5})) == [2, 3, 4]
    assert list(evaluate(parse("t:t"), {t: 2})) == []
    assert evaluate(parse("b, i, t:T"), {b: 1, i: 0, t: 2, T: 4}) == (1, 0, range(2, 4))


def test_evaluate_errors():
    with pytest.raises(se.EvaluationError):
        evaluate(parse("t + 1"), {})
    with pytest.raises(se.EvaluationError):
        evaluate(parse("t // 0"), {t: 1})
    with pytest.raises(se.EvaluationError):
        evaluate(se.add(cbool(True), cint(1)), {})


def test_parse_reports_byte_offset():
    with pytest.raises(ParseError) as info:
        parse("t + $")
    assert info.value.offset == 4
    with pytest.raises(ParseError) as info:
        parse("min(t)")
    assert info.value.offset == 0


def test_parse_precedence():
    assert parse("t + 2 * i") is parse("t + (2 * i)")
    assert parse("t - 1 - 1") is parse("(t - 1) - 1")
    assert parse("not t < 2 and b == 0") is parse("(not (t < 2)) and (b == 0)")


@pytest.mark.parametrize("text", [
    "t + 3", "t - 3", "b, i, t:T", "0:T", "t:min(t + 5, T)",
    "max(0, t - 4):t + 1", "(i + 1) % 5 == 0", "2 * t + 1",
    "t % 4", "t // 2 + 1", "not (t == 0)", "t == 0 or t >= 3 and b < 1",
    "-t + 1", "min(t + 5, T, B)", "t - (b + 1)",
])
def test_print_parse_round_trip(text):
    e = parse(text)
    assert parse(to_text(e)) is e


def test_simplify_examples():
    assert simplify(parse("t + 0")) is parse("t")
    assert simplify(parse("t + 1 + 1")) is parse("t + 2")
    assert simplify(parse("(t + 5) - 5")) is parse("t")
    assert simplify(parse("0 * t + 3")) is parse("3")
    assert simplify(parse("(i * 5 + 3) % 5")) is parse("3")
    assert simplify(parse("(i * 5 + t + 3) % 5")) is parse("(t + 3) % 5")
    assert simplify(parse("min(t + 2, t + 5)")) is parse("t + 2")
    assert simplify(parse("max(t, t)")) is parse("t")
    assert simplify(parse("t + 1 <= t + 1")) is se.TRUE
    assert simplify(parse("t < t")) is se.FALSE
    assert simplify(parse("t == 0 and true")) is parse("t == 0")
    assert simplify(parse("not (t < 2)")) is parse("t >= 2")
    assert simplify(parse("T - t + t")) is parse("T")


_pool = [t, b, i]


def _int_exprs(depth: int):
    if depth == 0:
        return st.one_of(
            st.integers(-6, 6).map(cint),
            st.sampled_from(_pool).map(sym),
        )
    sub_expr = _int_exprs(depth - 1)
    return st.one_of(
        sub_expr,
        st.tuples(sub_expr, sub_expr).map(lambda ab: se.add(*ab)),
        st.tuples(sub_expr, sub_expr).map(lambda ab: se.sub(*ab)),
        st.tuples(st.integers(-3, 3), sub_expr).map(lambda ka: se.mul(cint(ka[0]), ka[1])),
        sub_expr.map(se.neg),
        st.tuples(sub_expr, st.integers(1, 5)).map(lambda am: se.mod(am[0], cint(am[1]))),
        st.tuples(sub_expr, st.integers(1, 5)).map(lambda am: se.floordiv(am[0], cint(am[1]))),
        st.tuples(sub_expr, sub_expr).map(lambda ab: se.min_(*ab)),
        st.tuples(sub_expr, sub_expr).map(lambda ab: se.max_(*ab)),
    )


@settings(max_examples=300, deadline=None)
@given(e=_int_exprs(3), vals=st.tuples(*[st.integers(0, 9)] * 3))
def test_simplify_preserves_evaluation(e, vals):
    env = dict(zip(_pool, vals))
    assert evaluate(simplify(e), env) == evaluate(e, env)


@settings(max_examples=200, deadline=None)
@given(e=_int_exprs(3))
def test_simplify_idempotent(e):
    s = simplify(e)
    assert simplify(s) is s


@settings(max_examples=200, deadline=None)
@given(e=_int_exprs(3))
def test_print_parse_fixed_point_random(e):
    assert parse(to_text(e)) is e


@settings(max_examples=200, deadline=None)
@given(e=_int_exprs(2), vals=st.tuples(*[st.integers(0, 9)] * 3))
def test_substitute_matches_evaluate(e, vals):
    env = dict(zip(_pool, vals))
    closed = substitute(e, {s: cint(v) for s, v in env.items()})
    assert not se.free_symbols(closed)
    assert evaluate(closed, {}) == evaluate(e, env)


def test_classify_affine():
    dims = (b, i, t)
    assert classify_affine(parse("b, i, t"), dims) == "linear"
    assert classify_affine(parse("b, i, t - 1"), dims) == "affine"
    assert classify_affine(parse("i, b, t"), dims) == "affine"  # permuted
    assert classify_affine(parse("b, i, t:T"), dims) == "slice-affine"
    assert classify_affine(parse("t:min(t + 5, T)"), (t,)) == "slice-affine"
    assert classify_affine(parse("t * t"), (t,)) == "non-affine"
    assert classify_affine(parse("0:t * t"), (t,)) == "non-affine"
    assert classify_affine(parse("3"), ()) == "affine"


BOUNDS = {t: sym(T), b: sym(B), i: sym(I)}


def _inv(phi_text: str, sink, source):
    return invert_dependence(parse(phi_text), sink, source, BOUNDS)


def test_inversion_table():
    r = _inv("t + 3", (t,), (t,))
    assert to_text(r.exprs[0]) == "t - 3" and r.condition is None

    r = _inv("t:T", (t,), (t,))
    assert to_text(r.exprs[0]) == "0:t + 1" and r.condition is None

    r = _inv("0:T", (t,), (t,))
    assert to_text(r.exprs[0]) == "0:T" and r.condition is None

    nb = dict(BOUNDS)
    r = invert_dependence(se.slc(sym(t), se.min_(sym(t) + 4, sym(T))), (t,), (t,), nb)
    assert to_text(r.exprs[0]) == "max(0, t - 3):t + 1"
    assert r.condition is None

    r = _inv("2", (t,), (t,))
    assert to_text(r.exprs[0]) == "0:T"
    assert to_text(r.condition) == "t == 2"


def test_inversion_multi_dim():
    r = _inv("b, i, t - 1", (b, i, t), (b, i, t))
    assert tuple(to_text(x) for x in r.exprs) == ("b", "i", "t + 1")
    r = _inv("b, i, t:T", (b, i, t), (b, i, t))
    assert tuple(to_text(x) for x in r.exprs) == ("b", "i", "0:t + 1")
    # constant + slice over absent sink dim: full ranges with condition
    r = _inv("0:B, i, 0", (i,), (b, i, t))
    assert tuple(to_text(x) for x in r.exprs) == ("i",)
    assert to_text(r.condition) == "t == 0"


def test_inversion_rejects_non_affine():
    with pytest.raises(InversionError):
        _inv("t * t", (t,), (t,))
    with pytest.raises(InversionError):
        _inv("2 * t", (t,), (t,))


def _membership_round_trip(phi, dims, bound_val, nsym=None, nval=None):
    """Brute-force oracle: p' reads p under phi iff p' is in phi_inv(p)."""
    env_bounds = {T: bound_val, B: bound_val, I: bound_val}
    if nval is not None:
        env_bounds[nsym] = nval
    inv = invert_dependence(phi, dims, dims, BOUNDS)
    box = list(itertools.product(range(bound_val), repeat=len(dims)))
    forward: dict[tuple, set] = {}
    for p in box:
        env = dict(zip(dims, p)) | env_bounds
        forward[p] = set(se.enumerate_points(phi, env))
    for q in box:
        env = dict(zip(dims, q)) | env_bounds
        cond_ok = inv.condition is None or evaluate(inv.condition, env)
        back = set(se.enumerate_points(tup(*inv.exprs), env)) if cond_ok else set()
        expect = {p for p in box if q in forward[p]}
        assert back & set(box) == expect, (to_text(phi), q)


@pytest.mark.parametrize("phi_text", [
    "t + 3", "t - 2", "t", "0", "t:T", "0:T", "0:t + 1",
    "max(0, t - 3):t + 1",
])
def test_inversion_round_trip_1d(phi_text):
    _membership_round_trip(parse(phi_text), (t,), 8)


def test_inversion_round_trip_windowed():
    phi = se.slc(sym(t), se.min_(sym(t) + 3, sym(T)))
    _membership_round_trip(phi, (t,), 9)


@pytest.mark.parametrize("phi_text", [
    "b, t", "b, t - 1", "b, t:T", "0:B, t", "b, 0",
    "b, max(0, t - 2):t + 1",
])
def test_inversion_round_trip_2d(phi_text):
    _membership_round_trip(parse(phi_text), (b, t), 5)


def test_presburger_matches_enumeration():
    from recten.polyhedra import feasible, Constraint, LinExpr

    phi = parse("b, max(0, t - 2):t + 1")
    dims = (b, t)
    pieces = se.to_presburger(phi, dims, dims, BOUNDS, BOUNDS)
    bval = 4
    param_cs = [
        Constraint(LinExpr.make({(se.PARAM, B): 1}, -bval), True),
        Constraint(LinExpr.make({(se.PARAM, T): 1}, -bval), True),
    ]
    for p in itertools.product(range(bval), repeat=2):
        env = dict(zip(dims, p)) | {T: bval, B: bval}
        reads = set(se.enumerate_points(phi, env))
        for q in itertools.product(range(bval), repeat=2):
            point_cs = param_cs + [
                Constraint(LinExpr.make({(se.SNK, dims[k]): 1}, -p[k]), True) for k in range(2)
            ] + [
                Constraint(LinExpr.make({(se.SRC, dims[k]): 1}, -q[k]), True) for k in range(2)
            ]
            holds = any(feasible(piece + point_cs) for piece in pieces)
            assert holds == (q in reads), (p, q)
