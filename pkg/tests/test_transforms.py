"""Rewrites must not change what a program computes.

Every test builds the same program twice, transforms one copy, and
compares outputs. Recurrence folding is bit-exact here because the
sequential kernels apply the same additions in the same order as the
unfolded chain; the looser 1e-12 bound is for paths that reassociate.
"""

import math

import numpy as np
import pytest

import recten.symexpr as se
from recten import transforms as tr
from recten.frontend import Context
from recten.pdg import build, validate
from recten.runtime import reference_execute


def run(ctx, seed=0):
    g = build(ctx)
    rep = validate(g)
    assert rep.ok, rep
    return reference_execute(g, seed=seed)


def transformed(make, xform, seed=0):
    """Outputs of the plain build and of xform(build)."""
    base = run(make(), seed)
    g = build(make())
    xform(g)
    rep = validate(g)
    assert rep.ok, rep
    return base, reference_execute(g, seed=seed), g


def assert_same(a, b, exact=False):
    assert a.keys() == b.keys()
    for k in a:
        if exact:
            assert np.array_equal(a[k], b[k]), k
        else:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-12, atol=1e-12)


def kinds(g):
    return sorted(n.kind for n in g.nodes.values())


# ---------------------------------------------------------------------------
# recurrence lifting


def gated(gamma=0.9, T=7):
    ctx = Context()
    t, Tb = ctx.declare_dim("t", "T")
    ctx.bind(Tb, T)
    x = ctx.rng("x", (4,), domain=(t,))
    y = ctx.recurrent("y", (4,), domain=(t,))
    y.define([(se.eq(se.sym(t), se.cint(0)), x),
              (None, y["t-1"] * gamma + x["t"])])
    ctx.mark_output(y, "y")
    return ctx


def test_scan_lift_exact():
    base, got, g = transformed(gated, tr.lift_incremental_patterns, seed=5)
    assert "merge" not in kinds(g)
    assert "scan" in kinds(g)
    assert_same(base, got, exact=True)


def test_scan_lift_keeps_gamma():
    g = build(gated(gamma=0.75))
    tr.lift_incremental_patterns(g)
    (scan,) = [n for n in g.nodes.values() if n.kind == "scan"]
    assert scan.params["gamma"] == 0.75
    assert scan.params["reverse"] is False


def test_plain_sum_recurrence_lifts_with_unit_gamma():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 6)
        x = ctx.rng("x", (), domain=(t,))
        y = ctx.recurrent("y", (), domain=(t,))
        y.define([(se.eq(se.sym(t), se.cint(0)), x),
                  (None, y["t-1"] + x["t"])])
        ctx.mark_output(y, "y")
        return ctx

    base, got, g = transformed(make, tr.lift_incremental_patterns)
    (scan,) = [n for n in g.nodes.values() if n.kind == "scan"]
    assert scan.params["gamma"] == 1.0
    assert_same(base, got, exact=True)


def test_reverse_scan_lift():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 6)
        x = ctx.rng("x", (), domain=(t,))
        G = ctx.recurrent("G", (), domain=(t,))
        last = se.eq(se.sym(t), se.sub(se.sym(T), se.cint(1)))
        G.define([(last, x), (None, x["t"] + G["t+1"] * 0.95)])
        ctx.mark_output(G, "G")
        return ctx

    base, got, g = transformed(make, tr.lift_incremental_patterns, seed=9)
    (scan,) = [n for n in g.nodes.values() if n.kind == "scan"]
    assert scan.params["reverse"] is True
    assert_same(base, got, exact=True)


def test_final_only_chain_becomes_total():
    """A running total read only at t = T-1 collapses to one reduction
    and the per-step chain disappears."""

    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 8)
        x = ctx.rng("x", (), domain=(t,))
        acc = ctx.recurrent("acc", (), domain=(t,))
        acc.define([(se.eq(se.sym(t), se.cint(0)), x),
                    (None, acc["t-1"] + x["t"])])
        ctx.mark_output(acc["T-1"], "total")
        return ctx

    base, got, g = transformed(make, tr.lift_incremental_patterns)
    assert "scan" not in kinds(g) and "merge" not in kinds(g)
    (total,) = [n for n in g.nodes.values() if n.kind == "sum"]
    assert total.domain == ()
    assert_same(base, got, exact=True)


def test_final_only_discounted():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 5)
        x = ctx.rng("x", (), domain=(t,))
        acc = ctx.recurrent("acc", (), domain=(t,))
        acc.define([(se.eq(se.sym(t), se.cint(0)), x),
                    (None, acc["t-1"] * 0.5 + x["t"])])
        ctx.mark_output(acc["T-1"], "total")
        return ctx

    base, got, g = transformed(make, tr.lift_incremental_patterns, seed=2)
    (ds,) = [n for n in g.nodes.values() if n.kind == "discounted_sum"]
    assert ds.params["gamma"] == 0.5 and ds.params["reverse"] is True
    assert_same(base, got, exact=True)


def test_discounted_sum_weights_literal():
    """dsum semantics pinned by hand: sum_u gamma^u x[u] over a known input."""
    ctx = Context()
    t, T = ctx.declare_dim("t", "T")
    ctx.bind(T, 1)
    x = ctx.constant(np.array([1.0, 1.0, 1.0]))
    s = ctx.discounted_sum(x, 0.5, dim=0)
    ctx.mark_output(s, "s")
    out = run(ctx)
    assert out["s"] == pytest.approx(1 + 0.5 + 0.25)


def test_window_chain_lifts():
    """x[t] + x[t-1] + x[t-2] under a staged merge becomes one windowed
    reduction over a [t-2, t] band."""

    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 9)
        x = ctx.rng("x", (), domain=(t,))
        z = ctx.recurrent("z", (), domain=(t,))
        z.define([
            (se.eq(se.sym(t), se.cint(0)), x),
            (se.eq(se.sym(t), se.cint(1)), x["t"] + x["t-1"]),
            (None, x["t"] + x["t-1"] + x["t-2"]),
        ])
        ctx.mark_output(z, "z")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=7)
    assert "window_reduce" in kinds(g)
    assert_same(base, got)


def test_suffix_slice_total_becomes_window():
    """dsum over x[t:T] folds to a windowed reduction when t folds."""

    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 6)
        r = ctx.rng("r", (), domain=(t,))
        G = ctx.discounted_sum(r["t:T"], 0.9, dim=0)
        ctx.mark_output(G, "G")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=3)
    assert "window_reduce" in kinds(g)
    assert all(n.domain == () for n in g.nodes.values() if n.kind != "rng")
    assert_same(base, got, exact=True)


# ---------------------------------------------------------------------------
# vectorization


def test_scan_vectorizes_to_discounted_cumsum():
    base, got, g = transformed(gated, tr.vectorize_all, seed=1)
    assert "merge" not in kinds(g) and "scan" not in kinds(g)
    (cs,) = [n for n in g.nodes.values() if n.kind == "discounted_cumsum"]
    assert cs.domain == () and cs.out_shapes[0] == (7, 4)
    assert_same(base, got, exact=True)


def test_vectorize_unit_gamma_gives_cumsum():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 6)
        x = ctx.rng("x", (2,), domain=(t,))
        y = ctx.recurrent("y", (2,), domain=(t,))
        y.define([(se.eq(se.sym(t), se.cint(0)), x),
                  (None, y["t-1"] + x["t"])])
        ctx.mark_output(y, "y")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all)
    assert "cumsum" in kinds(g)
    assert_same(base, got, exact=True)


def test_vectorize_elementwise_pipeline():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 11)
        x = ctx.rng("x", (3,), domain=(t,))
        y = ctx.op("tanh", [x * 2.0])
        z = ctx.sum(y, 0)
        ctx.mark_output(z, "z")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=8)
    # everything except the per-point draw runs once over the whole range
    assert all(n.domain == () for n in g.nodes.values() if n.kind != "rng")
    assert_same(base, got, exact=True)


def test_vectorize_folds_both_dims():
    def make():
        ctx = Context()
        i, I = ctx.declare_dim("i", "I")
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(I, 4)
        ctx.bind(T, 5)
        r = ctx.rng("r", (), domain=(i, t))
        v = ctx.discounted_sum(r["i, 0:T"], 0.9, dim=0)
        w = v * 2.0
        ctx.mark_output(w, "w")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=6)
    assert all(n.domain == () for n in g.nodes.values() if n.kind != "rng")
    assert_same(base, got, exact=True)


def test_vectorize_keeps_shifted_reads():
    """A one-step delay line: the folded consumer gathers row t-1."""

    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 6)
        x = ctx.rng("x", (), domain=(t,))
        prev = ctx.recurrent("prev", (), domain=(t,))
        prev.define([(se.eq(se.sym(t), se.cint(0)), ctx.constant(0.0)),
                     (None, x["t-1"])])
        z = x + prev
        ctx.mark_output(z, "z")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=4)
    assert_same(base, got)


def test_vectorize_mixed_fold_inserts_gather():
    """merge stays per-point but its folded input is row-selected, not
    recomputed."""

    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 5)
        x = ctx.rng("x", (), domain=(t,))
        y = ctx.op("tanh", [x])  # folds
        m = ctx.recurrent("m", (), domain=(t,))
        m.define([(se.eq(se.sym(t), se.cint(0)), y),
                  (None, m["t-1"] * 0.5 + y["t"] * y["t"])])
        ctx.mark_output(m, "m")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=12)
    assert_same(base, got, exact=True)


def test_vectorize_rng_draws_unchanged():
    """Folding never changes which random numbers a program consumes."""
    base, got, _ = transformed(gated, tr.vectorize_all, seed=99)
    assert_same(base, got, exact=True)


def test_vectorize_skips_dynamic_bounds():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, "dyn")
        x = ctx.rng("x", (), domain=(t,))
        stop = ctx.cmp("gt", x, ctx.constant(1.5))
        ctx.set_symbol(T, t, stop)
        y = x * 2.0
        ctx.mark_output(y, "y")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=21)
    # the range of t is data-dependent, so nothing folds over it
    assert any(n.domain for n in g.nodes.values())
    assert_same(base, got, exact=True)


def test_vectorize_matmul_stack():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 4)
        a = ctx.rng("a", (3, 3), domain=(t,))
        b = ctx.rng("b", (3, 2), domain=(t,))
        c = ctx.matmul(a, b)
        ctx.mark_output(c, "c")
        return ctx

    base, got, g = transformed(make, tr.vectorize_all, seed=13)
    (mm,) = [n for n in g.nodes.values() if n.kind == "matmul"]
    assert mm.out_shapes[0] == (4, 3, 2)
    assert_same(base, got, exact=True)


# ---------------------------------------------------------------------------
# incrementalization


def widesum(T=3, payload=(40, 8)):
    ctx = Context()
    t, Tb = ctx.declare_dim("t", "T")
    ctx.bind(Tb, T)
    x = ctx.rng("x", payload, domain=(t,))
    h = ctx.op("tanh", [x])
    z = h * 2.0
    s = ctx.sum(z, 0)
    out = ctx.sum(s, 0) * 0.1
    ctx.mark_output(out, "out")
    return ctx


def target_sum(g):
    (n,) = [n for n in g.sorted_nodes()
            if n.kind == "sum" and n.params["dims"] == (0,)
            and g.nodes[g.in_edges(n.id)[0].src].kind == "mul"]
    return n


def test_incrementalize_block_structure():
    g = build(widesum())
    tr.incrementalize(g, target_sum(g), bs=10)
    rep = validate(g)
    assert rep.ok, rep
    di = g.dim_order[-1]
    assert g.bindings[g.dim_bound[di]] == 4
    blocked = [n for n in g.nodes.values() if di in n.domain]
    assert {n.kind for n in blocked} >= {"slice_axis", "tanh", "mul", "sum"}
    # every blocked payload shrank to one block of rows
    assert all(n.out_shapes[0][0] == 10 for n in blocked
               if n.kind in ("slice_axis", "tanh", "mul"))


def test_incrementalize_even_split():
    base = run(widesum(), seed=7)
    g = build(widesum())
    tr.incrementalize(g, target_sum(g), bs=10)
    assert validate(g).ok
    # partial sums reassociate the addition, so equality is tolerance-based
    assert_same(base, reference_execute(g, seed=7))


def test_incrementalize_ragged_tail():
    base = run(widesum(), seed=7)
    g = build(widesum())
    tr.incrementalize(g, target_sum(g), bs=7)  # ceil(40/7) = 6 blocks
    assert validate(g).ok
    got = reference_execute(g, seed=7)
    assert_same(base, got)


def test_incrementalize_refuses_unsafe_padding():
    """exp maps the zero padding of a ragged tail to ones, which would
    leak into the total; only an even split is allowed."""
    ctx = Context()
    t, T = ctx.declare_dim("t", "T")
    ctx.bind(T, 2)
    x = ctx.rng("x", (40, 8), domain=(t,))
    z = ctx.op("exp", [x])
    s = ctx.sum(z, 0)
    ctx.mark_output(s, "s")
    g = build(ctx)
    (tgt,) = [n for n in g.nodes.values() if n.kind == "sum"]
    with pytest.raises(tr.TransformError, match="padding"):
        tr.incrementalize(g, tgt, bs=7)


def test_incrementalize_refuses_broadcast_bias_padding():
    """x * 2 + 1 writes 1.0 into the padding rows, so a ragged split of
    its reduction must be rejected even though add alone is harmless."""
    ctx = Context()
    t, T = ctx.declare_dim("t", "T")
    ctx.bind(T, 2)
    x = ctx.rng("x", (40, 8), domain=(t,))
    z = x * 2.0 + 1.0
    s = ctx.sum(z, 0)
    ctx.mark_output(s, "s")
    g = build(ctx)
    (tgt,) = [n for n in g.nodes.values() if n.kind == "sum"]
    with pytest.raises(tr.TransformError, match="padding"):
        tr.incrementalize(g, tgt, bs=7)


def test_incrementalize_biased_even_split():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 2)
        x = ctx.rng("x", (40, 8), domain=(t,))
        z = x * 2.0 + 1.0
        s = ctx.sum(z, 0)
        ctx.mark_output(s, "s")
        return ctx

    base = run(make(), seed=5)
    g = build(make())
    (tgt,) = [n for n in g.nodes.values() if n.kind == "sum"]
    tr.incrementalize(g, tgt, bs=10)
    assert validate(g).ok
    assert_same(base, reference_execute(g, seed=5))


def test_incrementalize_rejects_non_reduction():
    g = build(gated())
    (rng,) = [n for n in g.nodes.values() if n.kind == "rng"]
    with pytest.raises(tr.TransformError):
        tr.incrementalize(g, rng, bs=4)


def test_find_incrementalizable_orders_by_size():
    g = build(widesum(payload=(64, 16)))
    plans = tr.find_incrementalizable(g, block_bytes=2048)
    assert plans
    top = plans[0]
    assert g.nodes[top.target].kind == "sum"
    assert top.bs * top.DI >= 64
    # a tight budget still yields at least one row per block
    tight = tr.find_incrementalizable(g, block_bytes=1)
    assert all(p.bs == 1 for p in tight)


def test_find_incrementalizable_skips_small():
    g = build(gated())
    assert tr.find_incrementalizable(g, block_bytes=1 << 20) == []


# ---------------------------------------------------------------------------
# fusion


def test_fuse_chain_single_node():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 5)
        x = ctx.rng("x", (3,), domain=(t,))
        y = ctx.op("tanh", [x * 2.0 + 1.0])
        z = ctx.sum(y * y, 0)
        ctx.mark_output(z, "z")
        return ctx

    base, got, g = transformed(make, tr.fuse, seed=1)
    assert kinds(g) == ["dataflow", "rng"]
    assert_same(base, got, exact=True)


def test_fuse_keeps_multiple_outputs_separate():
    """Two outputs force two groups; neither may swallow the other."""

    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 4)
        x = ctx.rng("x", (2,), domain=(t,))
        a = ctx.op("tanh", [x]) * 2.0
        b = a + 1.0
        ctx.mark_output(a, "a")
        ctx.mark_output(b, "b")
        return ctx

    base, got, g = transformed(make, tr.fuse, seed=2)
    assert_same(base, got, exact=True)
    names = {nm for nm, _, _ in g.outputs}
    assert names == {"a", "b"}


def test_fuse_then_execute_matches_after_vectorize():
    base, got, g = transformed(
        gated, lambda g: (tr.vectorize_all(g), tr.fuse(g)), seed=3)
    assert_same(base, got, exact=True)


def test_fuse_absorbs_constants():
    def make():
        ctx = Context()
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(T, 3)
        x = ctx.rng("x", (2,), domain=(t,))
        y = x * 3.0 + 0.5
        ctx.mark_output(y, "y")
        return ctx

    _, _, g = transformed(make, tr.fuse)
    assert "const" not in kinds(g)


def test_fuse_leaves_mergers_outside():
    base, got, g = transformed(gated, tr.fuse, seed=4)
    assert "merge" in kinds(g)
    assert_same(base, got, exact=True)


# ---------------------------------------------------------------------------
# whole pipeline on a two-dim program


def test_all_transforms_stack():
    def make():
        ctx = Context()
        b, B = ctx.declare_dim("b", "B")
        t, T = ctx.declare_dim("t", "T")
        ctx.bind(B, 3)
        ctx.bind(T, 6)
        x = ctx.rng("x", (4,), domain=(b, t))
        y = ctx.recurrent("y", (4,), domain=(b, t))
        y.define([(se.eq(se.sym(t), se.cint(0)), x),
                  (None, y["b, t-1"] * 0.8 + x["b, t"])])
        z = ctx.sum(ctx.op("tanh", [y]), 0)
        ctx.mark_output(z, "z")
        return ctx

    def pipeline(g):
        tr.vectorize_all(g)
        tr.fuse(g)

    base, got, g = transformed(make, pipeline, seed=17)
    assert all(n.domain == () for n in g.nodes.values() if n.kind != "rng")
    assert_same(base, got, exact=True)
