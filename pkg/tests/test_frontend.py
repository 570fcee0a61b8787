"""Graph construction layer: domains, branching, indexing, reverse mode."""

import numpy as np
import pytest

from recten import frontend as fe
from recten import pdg
from recten import runtime as rt
from recten import symexpr as se


def ctx_t(bound=6):
    ctx = fe.Context()
    t, T = ctx.declare_dim("t", "T")
    ctx.bind(T, bound)
    return ctx, t, T


def parse(ctx):
    return lambda s: se.parse(s, ctx.resolve_symbol)


def oracle(ctx, **kw):
    g = pdg.eliminate_dead(pdg.build(ctx))
    return rt.reference_execute(g, **kw)


# -- domain and shape inference ---------------------------------------------


def test_op_domain_is_canonical_union():
    ctx = fe.Context()
    b, B = ctx.declare_dim("b", "B")
    t, T = ctx.declare_dim("t", "T")
    xb = ctx.input("xb", (), "f64", (b,))
    xt = ctx.input("xt", (), "f64", (t,))
    y = xt + xb  # declaration order wins, not operand order
    assert y.domain == (b, t)


def test_broadcast_shapes():
    ctx = fe.Context()
    a = ctx.input("a", (3, 1), "f64")
    b = ctx.input("b", (4,), "f64")
    assert (a + b).shape == (3, 4)
    c = ctx.input("c", (3, 5), "f64")
    with pytest.raises(fe.FrontendError, match="broadcast"):
        b + c


def test_dtype_mismatch_rejected():
    ctx = fe.Context()
    a = ctx.input("a", (), "f64")
    b = ctx.input("b", (), "f32")
    with pytest.raises(fe.FrontendError):
        a + b


def test_matmul_shapes():
    ctx = fe.Context()
    a = ctx.input("a", (3, 4), "f64")
    b = ctx.input("b", (4, 5), "f64")
    assert (a @ b).shape == (3, 5)
    v = ctx.input("v", (4,), "f64")
    assert (a @ v).shape == (3,)


# -- branching definitions ----------------------------------------------------


def test_true_branch_must_be_last():
    ctx, t, T = ctx_t()
    p = parse(ctx)
    x = ctx.recurrent("x", (), "f64", (t,))
    one = ctx.constant(1.0)
    with pytest.raises(fe.FrontendError, match="not last"):
        x.define([(None, one), (p("t == 0"), one)])


def test_overlapping_branches_report_witness():
    ctx, t, T = ctx_t()
    p = parse(ctx)
    x = ctx.recurrent("x", (), "f64", (t,))
    one = ctx.constant(1.0)
    two = ctx.constant(2.0)
    with pytest.raises(fe.FrontendError, match=r"branches 0 and 1 of x overlap at \(2,\)"):
        x.define([(p("t >= 1"), one), (p("t >= 2"), two), (None, one)])


def test_static_binding_limits_overlap_enumeration():
    # with T = 3 the two conditions never both hold inside the domain
    ctx, t, T = ctx_t(bound=3)
    p = parse(ctx)
    x = ctx.recurrent("x", (), "f64", (t,))
    one = ctx.constant(1.0)
    x.define([(p("t == 2"), one), (p("t >= 3"), one), (None, one)])
    assert isinstance(x.defn, fe.MergeDef)


def test_branch_shape_mismatch():
    ctx, t, T = ctx_t()
    x = ctx.recurrent("x", (2,), "f64", (t,))
    bad = ctx.constant(1.0, shape=(3,))
    with pytest.raises(fe.FrontendError, match="want f64\\[2\\]"):
        x.define([(None, bad)])


def test_branch_cannot_widen_domain():
    ctx = fe.Context()
    b, B = ctx.declare_dim("b", "B")
    t, T = ctx.declare_dim("t", "T")
    x = ctx.recurrent("x", (), "f64", (t,))
    wide = ctx.input("w", (), "f64", (b, t))
    with pytest.raises(fe.FrontendError, match="widens"):
        x.define([(None, wide)])


def test_condition_symbols_must_lie_in_domain():
    ctx = fe.Context()
    b, B = ctx.declare_dim("b", "B")
    t, T = ctx.declare_dim("t", "T")
    x = ctx.recurrent("x", (), "f64", (t,))
    p = parse(ctx)
    with pytest.raises(fe.FrontendError, match="outside its domain"):
        x.define([(p("b == 0"), ctx.constant(1.0)), (None, ctx.constant(2.0))])


def test_bind_rejects_junk():
    ctx, t, T = ctx_t()
    with pytest.raises(fe.FrontendError):
        ctx.bind(T, 0)
    with pytest.raises(fe.FrontendError):
        ctx.bind(T, "sometimes")
    with pytest.raises(fe.FrontendError):
        ctx.bind(t, 4)  # a dim is not a bound
    ctx.bind(T, "dyn")
    assert ctx.bindings[T] == "dyn"


# -- indexing ----------------------------------------------------------------


def test_index_arity_checked():
    ctx, t, T = ctx_t()
    x = ctx.input("x", (), "f64", (t,))
    with pytest.raises(fe.FrontendError, match="domain dims"):
        x.index("t, t")


def test_slice_view_shape_prepends_extent():
    ctx, t, T = ctx_t()
    x = ctx.input("x", (3,), "f64", (t,))
    v = x["t:T"]
    assert v.domain == (t,)
    assert len(v.shape) == 2 and v.shape[1] == 3
    ext = v.shape[0]
    assert se.to_text(se.wrap(ext)) == "T - t"


def test_view_of_view_requires_name():
    ctx, t, T = ctx_t()
    x = ctx.input("x", (), "f64", (t,))
    v = x["t - 1"]
    with pytest.raises(fe.FrontendError, match="name the intermediate"):
        v["t - 1"]


def test_constant_index_drops_dim():
    ctx, t, T = ctx_t()
    x = ctx.input("x", (), "f64", (t,))
    v = x["0"]
    assert v.domain == ()


# -- small op semantics through the oracle -------------------------------------


def test_where_and_cmp():
    ctx, t, T = ctx_t(bound=4)
    x = ctx.input("x", (), "f64", (t,))
    c = ctx.cmp("ge", x, ctx.constant(2.0))
    y = ctx.where(c, x, -x)
    assert c.dtype == "bool" and y.dtype == "f64"
    ctx.mark_output(y, "y")
    out = oracle(ctx, inputs={"x": np.array([0.0, 1.0, 2.0, 3.0])})
    assert np.array_equal(out["y"], [-0.0, -1.0, 2.0, 3.0])


def test_where_requires_bool_selector():
    ctx = fe.Context()
    x = ctx.input("x", (), "f64")
    with pytest.raises(fe.FrontendError):
        ctx.where(x, x, x)


def test_merge_first_true_branch_wins():
    ctx, t, T = ctx_t(bound=3)
    p = parse(ctx)
    x = ctx.recurrent("x", (), "f64", (t,))
    # conditions may overlap only via the trailing else
    x.define([(p("t <= 0"), ctx.constant(5.0)), (None, ctx.constant(7.0))])
    ctx.mark_output(x, "x")
    assert list(oracle(ctx)["x"]) == [5.0, 7.0, 7.0]


def test_set_symbol_driver_must_be_scalar_bool():
    ctx, t, T = ctx_t()
    x = ctx.input("x", (), "f64", (t,))
    with pytest.raises(fe.FrontendError, match="scalar bool"):
        ctx.set_symbol(T, t, x)


# -- reverse mode --------------------------------------------------------------


def grad_by_fd(ctx_builder, at, h=1e-6):
    """Central differences of the loss against one scalar parameter input."""
    def run(v):
        ctx, name = ctx_builder()
        out = oracle(ctx, inputs={name: np.asarray(v)})
        return float(out["l"])
    return (run(at + h) - run(at - h)) / (2 * h)


def test_grad_through_recurrence():
    # x[0] = w, x[t] = w * x[t-1]; l = sum_t x[t] => dl/dw = sum (t+1) w^t
    def build():
        ctx, t, T = ctx_t(bound=4)
        p = parse(ctx)
        w = ctx.input("w", (), "f64")
        x = ctx.recurrent("x", (), "f64", (t,))
        x.define([(p("t == 0"), w), (None, ctx.op("mul", [w, x[p("t - 1")]]))])
        l = ctx.sum(x["0:T"], 0)
        ctx.mark_output(l, "l")
        return ctx, t, T, w, l

    ctx, t, T, w, l = build()
    grads = ctx.backward(l, [w])
    ctx.mark_output(grads[w], "gw")
    out = oracle(ctx, inputs={"w": np.asarray(0.9)})
    expect = sum((k + 1) * 0.9 ** k for k in range(4))
    assert out["gw"] == pytest.approx(expect, rel=1e-12)

    def fd_builder():
        c, t2, T2, w2, l2 = build()
        return c, "w"

    def fd_run(v):
        c, t2, T2, w2, l2 = build()
        c.mark_output(l2, "l")
        return float(oracle(c, inputs={"w": np.asarray(v)})["l"])

    num = (fd_run(0.9 + 1e-6) - fd_run(0.9 - 1e-6)) / 2e-6
    assert out["gw"] == pytest.approx(num, rel=1e-6)


def test_grad_through_suffix_discounted_sum():
    # l = sum_t dsum(r[t:T], g); contribution of r[u] is sum_{t<=u} g^(u-t)
    gamma = 0.9

    def build():
        ctx, t, T = ctx_t(bound=5)
        p = parse(ctx)
        r = ctx.input("r", (), "f64", (t,))
        ret = ctx.discounted_sum(r[p("t:T")], gamma, dim=0)
        l = ctx.sum(ret["0:T"], 0)
        return ctx, r, l

    ctx, r, l = build()
    grads = ctx.backward(l, [r])
    ctx.mark_output(grads[r], "gr")
    ctx.mark_output(l, "l")
    rv = np.array([0.3, -0.2, 0.8, 0.1, 0.5])
    out = oracle(ctx, inputs={"r": rv})
    expect = [sum(gamma ** (u - t) for t in range(u + 1)) for u in range(5)]
    assert np.allclose(out["gr"], expect, rtol=1e-12)


def test_grad_masked_by_merge_branches():
    # x[t] = w at even t, 2w at odd t; l = sum x => dl/dw = count(even) + 2*count(odd)
    def build():
        ctx, t, T = ctx_t(bound=5)
        p = parse(ctx)
        w = ctx.input("w", (), "f64")
        x = ctx.recurrent("x", (), "f64", (t,))
        x.define([(p("t % 2 == 0"), w), (None, w * 2.0)])
        l = ctx.sum(x["0:T"], 0)
        return ctx, w, l

    ctx, w, l = build()
    grads = ctx.backward(l, [w])
    ctx.mark_output(grads[w], "gw")
    out = oracle(ctx, inputs={"w": np.asarray(1.3)})
    assert float(out["gw"]) == pytest.approx(3 + 2 * 2)


def test_grad_matmul_and_tanh():
    def build():
        ctx = fe.Context()
        w = ctx.input("w", (2, 2), "f64")
        v = ctx.input("v", (2,), "f64")
        y = ctx.op("tanh", [w @ v])
        l = ctx.sum(y, 0)
        return ctx, w, v, l

    ctx, w, v, l = build()
    grads = ctx.backward(l, [w])
    ctx.mark_output(grads[w], "gw")
    wv = np.array([[0.3, -0.5], [0.2, 0.7]])
    vv = np.array([0.4, -0.1])
    out = oracle(ctx, inputs={"w": wv, "v": vv})
    y = wv @ vv
    expect = ((1 - np.tanh(y) ** 2)[:, None]) * vv[None, :]
    assert np.allclose(out["gw"], expect, rtol=1e-12)


def test_detach_blocks_gradient():
    ctx = fe.Context()
    w = ctx.input("w", (), "f64")
    l = ctx.sum(ctx.unsqueeze(ctx.detach(w) * w, 0), 0)
    grads = ctx.backward(l, [w])
    ctx.mark_output(grads[w], "gw")
    out = oracle(ctx, inputs={"w": np.asarray(3.0)})
    # only the undetached factor contributes: d/dw [c * w] = c = 3
    assert float(out["gw"]) == pytest.approx(3.0)


def test_udf_is_a_stop_gradient():
    # opaque calls behave like detach: no flow, no error
    ctx, t, T = ctx_t(bound=3)
    ctx.register_udf("f", lambda ins, rng: (ins[0] * 2,), [()], ["f64"])
    w = ctx.input("w", (), "f64")
    (u,) = ctx.udf("f", [w], domain=(t,))
    l = ctx.sum(u["0:T"], 0)
    grads = ctx.backward(l, [w])
    ctx.mark_output(grads[w], "gw")
    out = oracle(ctx, inputs={"w": np.asarray(2.0)})
    assert float(out["gw"]) == 0.0


def test_loss_must_be_scalar():
    ctx, t, T = ctx_t()
    w = ctx.input("w", (2,), "f64")
    with pytest.raises(fe.FrontendError, match="scalar"):
        ctx.backward(w, [w])


def test_unreachable_parameter_gets_zero_grad():
    ctx = fe.Context()
    w = ctx.input("w", (), "f64")
    u = ctx.input("u", (), "f64")
    l = ctx.sum(ctx.unsqueeze(w * w, 0), 0)
    grads = ctx.backward(l, [u])
    ctx.mark_output(grads[u], "gu")
    out = oracle(ctx, inputs={"w": np.asarray(2.0), "u": np.asarray(5.0)})
    assert float(out["gu"]) == 0.0
