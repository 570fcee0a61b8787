"""Execution: a kernel table shared by the oracle and the compiled
interpreter, a demand-driven reference evaluator (the oracle), and the
simulated two-tier memory machinery used by compiled runs.

The oracle runs any dependence graph, before or after transformation: it
memoizes one value per (node, point) and recurses through edges, honoring
merge branch order and edge conditions. Dynamic bounds resolve in a first
stage that walks the driver chain forward; outputs evaluate in a second
stage under the fixed bound.
"""

from __future__ import annotations

import itertools
import sys

import numpy as np

from . import symexpr as se
from .frontend import DTYPES, ITEMSIZE
from .pdg import Pdg, PdgNode, InnerGraph
from .symexpr import Symbol


class RuntimeError_(Exception):
    pass


class OracleError(RuntimeError_):
    pass


DYN_CAP = 4096  # safety net for runaway dynamic-bound drivers


# ---------------------------------------------------------------------------
# kernels
#
# fn(node, vals, env, rng) -> tuple of arrays, one per output slot.
# vals hold the gathered per-point inputs (slice axes prepended); a val is
# None when the edge condition was false. env maps Symbol -> int for the
# node's point and every bound. rng is a zero-arg factory for a Generator
# seeded from (run seed, node identity, point).


def _k_const(node, vals, env, rng):
    return (node.params["value"],)


def _k_rng(node, vals, env, rng):
    g = rng()
    shape = node.shape
    if node.params["dist"] == "normal":
        return (g.standard_normal(shape),)
    return (g.uniform(0.0, 1.0, shape),)


def _k_unary(fn):
    return lambda node, vals, env, rng: (fn(vals[0]),)


def _k_binary(fn):
    return lambda node, vals, env, rng: (fn(vals[0], vals[1]),)


_CMP = {"eq": np.equal, "ne": np.not_equal, "lt": np.less, "le": np.less_equal,
        "gt": np.greater, "ge": np.greater_equal}


def _k_cmp(node, vals, env, rng):
    return (_CMP[node.params["op"]](vals[0], vals[1]),)


def _k_where(node, vals, env, rng):
    return (np.where(vals[0], vals[1], vals[2]),)


def _k_cast(node, vals, env, rng):
    return (vals[0].astype(DTYPES[node.params["dtype"]]),)


def _k_expand(node, vals, env, rng):
    shape = _concrete_shape(node.params["shape"], env)
    return (np.broadcast_to(vals[0], shape).copy(),)


def _k_reshape(node, vals, env, rng):
    return (vals[0].reshape(_concrete_shape(node.params["shape"], env)),)


def _k_permute(node, vals, env, rng):
    return (np.transpose(vals[0], node.params["order"]),)


def _k_sum(node, vals, env, rng):
    return (vals[0].sum(axis=node.params["dims"]),)


def _k_cumsum(node, vals, env, rng):
    x = vals[0]
    ax = node.params["dim"]
    if node.params.get("reverse"):
        x = np.flip(x, ax)
        return (np.flip(np.cumsum(x, axis=ax), ax),)
    return (np.cumsum(x, axis=ax),)


def _discount_weights(n, gamma, reverse, dtype):
    w = gamma ** np.arange(n, dtype=np.float64)
    if reverse:
        w = w[::-1]
    return w.astype(dtype, copy=False)


def _k_discounted_sum(node, vals, env, rng):
    x = vals[0]
    ax = node.params["dim"]
    w = _discount_weights(x.shape[ax], node.params["gamma"],
                          node.params.get("reverse", False), x.dtype)
    wshape = [1] * x.ndim
    wshape[ax] = -1
    return ((x * w.reshape(wshape)).sum(axis=ax),)


def _k_scan(node, vals, env, rng):
    # y = x + gamma * y_prev; the self edge (slot 1) is absent at the chain head
    x, prev = vals
    if prev is None:
        return (np.asarray(x).copy(),)
    return (x + node.params["gamma"] * prev,)


def _k_discounted_cumsum(node, vals, env, rng):
    # same accumulation order as the scan it came from, so results match
    # bit for bit
    x = np.moveaxis(vals[0], node.params["dim"], 0)
    gm = node.params["gamma"]
    out = np.empty_like(x)
    order = range(x.shape[0])
    if node.params.get("reverse"):
        order = reversed(order)
    acc = None
    for j in order:
        acc = x[j].copy() if acc is None else x[j] + gm * acc
        out[j] = acc
    return (np.moveaxis(out, 0, node.params["dim"]),)


def _k_eval_symbol(node, vals, env, rng):
    return (np.int64(env[node.params["symbol"]]),)


def _k_udf(node, vals, env, rng):
    spec = node.params["spec"]
    outs = spec.fn(list(vals), rng())
    if not isinstance(outs, tuple):
        outs = (outs,)
    return outs


def _k_index_select(node, vals, env, rng):
    d = node.params["dim"]
    expr = node.params["expr"]
    x = vals[0]
    if node.params.get("rows"):
        n = env[_bound_of(node, d)]
        rows = []
        for j in range(n):
            e2 = dict(env)
            e2[d] = j
            rows.append(x[_checked_row(se.evaluate(expr, e2), x, node)])
        return (np.stack(rows),)
    if expr.kind == "slice":
        lo = se.evaluate(expr.args[0], env)
        hi = se.evaluate(expr.args[1], env)
        if not 0 <= lo <= hi <= x.shape[0]:
            raise RuntimeError_(f"{node.name}: rows {lo}:{hi} outside 0..{x.shape[0]}")
        return (x[lo:hi],)
    return (x[_checked_row(se.evaluate(expr, env), x, node)],)


def _bound_of(node, d):
    return node.params["bound"]


def _checked_row(i, x, node):
    if not 0 <= i < x.shape[0]:
        raise RuntimeError_(f"{node.name}: row {i} outside 0..{x.shape[0] - 1}")
    return i


def _k_window_reduce(node, vals, env, rng):
    d = node.params["dim"]
    n = env[node.params["bound"]]
    x = vals[0]
    op = node.params["op"]
    gamma = node.params.get("gamma")
    out = np.zeros((n,) + x.shape[1:], x.dtype)
    for j in range(n):
        e2 = dict(env)
        e2[d] = j
        lo = max(0, se.evaluate(node.params["lo"], e2))
        hi = min(x.shape[0], se.evaluate(node.params["hi"], e2))
        win = x[lo:hi]
        if op == "sum":
            out[j] = win.sum(axis=0)
        else:
            w = _discount_weights(hi - lo, gamma,
                                  node.params.get("reverse", False), x.dtype)
            out[j] = (win * w.reshape((-1,) + (1,) * (win.ndim - 1))).sum(axis=0)
    return (out,)


def _k_slice_axis(node, vals, env, rng):
    ax = node.params["axis"]
    bs = node.params["block"]
    j = env[node.params["dim"]]
    x = np.moveaxis(vals[0], ax, 0)
    blk = x[j * bs:(j + 1) * bs]
    if blk.shape[0] < bs:  # ragged tail: zero-pad, additive reducers ignore it
        pad = np.zeros((bs - blk.shape[0],) + blk.shape[1:], blk.dtype)
        blk = np.concatenate([blk, pad])
    return (np.moveaxis(blk, 0, ax),)


def _k_dataflow(node, vals, env, rng):
    graph: InnerGraph = node.params["graph"]
    done = []
    for op in graph.ops:
        ins = [vals[i] if k == "ext" else done[i] for k, i in op.inputs]
        shadow = PdgNode(-1, op.name, op.kind, (), ((),), ("f64",), op.params)
        done.append(KERNELS[op.kind](shadow, ins, env, rng)[0])
    return (done[graph.out],)


KERNELS = {
    "const": _k_const,
    "rng": _k_rng,
    "add": _k_binary(np.add),
    "sub": _k_binary(np.subtract),
    "mul": _k_binary(np.multiply),
    "div": _k_binary(np.divide),
    "neg": _k_unary(np.negative),
    "exp": _k_unary(np.exp),
    "log": _k_unary(np.log),
    "tanh": _k_unary(np.tanh),
    "sqrt": _k_unary(np.sqrt),
    "pow_const": lambda n, v, e, r: (v[0] ** n.params["exponent"],),
    "matmul": _k_binary(np.matmul),
    "cmp": _k_cmp,
    "where": _k_where,
    "cast": _k_cast,
    "identity": _k_unary(lambda x: x),
    "detach": _k_unary(lambda x: x),
    "expand": _k_expand,
    "reshape": _k_reshape,
    "permute": _k_permute,
    "squeeze": lambda n, v, e, r: (np.squeeze(v[0], n.params["dim"]),),
    "unsqueeze": lambda n, v, e, r: (np.expand_dims(v[0], n.params["dim"]),),
    "sum": _k_sum,
    "cumsum": _k_cumsum,
    "discounted_sum": _k_discounted_sum,
    "discounted_cumsum": _k_discounted_cumsum,
    "scan": _k_scan,
    "eval_symbol": _k_eval_symbol,
    "udf": _k_udf,
    "index_select": _k_index_select,
    "window_reduce": _k_window_reduce,
    "slice_axis": _k_slice_axis,
    "dataflow": _k_dataflow,
}


def _concrete_shape(shape, env):
    out = []
    for s in shape:
        out.append(s if isinstance(s, (int, np.integer)) else se.evaluate(s, env))
    return tuple(out)


# ---------------------------------------------------------------------------
# oracle


class _Oracle:
    def __init__(self, g: Pdg, bounds, inputs, seed):
        self.g = g
        self.inputs = dict(inputs or {})
        self.seed = seed
        self.memo: dict[tuple, tuple] = {}
        self.benv: dict[Symbol, int] = {}
        self.pending: list[PdgNode] = []
        overrides = dict(bounds or {})
        for d in g.dim_order:
            b = g.dim_bound[d]
            v = overrides.pop(b.name, g.bindings.get(b))
            if isinstance(v, int):
                self.benv[b] = v
            elif v == "dyn":
                pass  # resolved by a set_symbol walk
            else:
                raise OracleError(f"bound {b.name} is unbound")
        if overrides:
            raise OracleError(f"unknown bound overrides {sorted(overrides)}")

    # -- dynamic bounds ---------------------------------------------------

    def resolve_dynamic(self):
        setters = [n for n in self.g.sorted_nodes() if n.kind == "set_symbol"]
        for d in self.g.dim_order:
            b = self.g.dim_bound[d]
            if b in self.benv:
                continue
            mine = [n for n in setters if n.params["bound"] == b]
            if not mine:
                raise OracleError(f"dynamic bound {b.name} has no set_symbol driver")
            node = mine[0]
            dim = node.params["dim"]
            others = [x for x in node.domain if x != dim]
            ranges = [range(self.benv[self.g.dim_bound[x]]) for x in others]
            t = 0
            while True:
                if t >= DYN_CAP:
                    raise OracleError(f"driver for {b.name} never fired (cap {DYN_CAP})")
                alldone = True
                for combo in itertools.product(*ranges):
                    point = self._order_point(node.domain, dim, t, others, combo)
                    v = self.value(node.id, point)[0]
                    if not bool(v):
                        alldone = False
                        break
                if alldone:
                    self.benv[b] = t + 1
                    break
                t += 1

    def _order_point(self, domain, dim, t, others, combo):
        m = dict(zip(others, combo))
        m[dim] = t
        return tuple(m[x] for x in domain)

    # -- evaluation ---------------------------------------------------------

    def value(self, nid: int, point: tuple[int, ...]) -> tuple:
        key = (nid,) + point
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        node = self.g.nodes[nid]
        env = dict(self.benv)
        env.update(zip(node.domain, point))
        for d, p in zip(node.domain, point):
            b = env.get(self.g.dim_bound[d])
            if b is not None and not 0 <= p < b:
                raise OracleError(f"{node.name} evaluated outside its domain at {point}")
        ins = self.g.in_edges(nid)
        if node.kind == "input":
            arr = self.inputs.get(node.name)
            if arr is None:
                raise OracleError(f"missing input {node.name!r}")
            out = (np.asarray(arr)[point],)
        elif node.kind == "merge":
            conds = node.params["conds"]
            pick = None
            for k, c in enumerate(conds):
                if c is se.TRUE or se.evaluate(c, env):
                    pick = k
                    break
            if pick is None:
                raise OracleError(f"no branch of {node.name} holds at {point}")
            out = (self.read(ins[pick], env, force=True),)
        elif node.kind == "set_symbol":
            out = (np.asarray(self.read(ins[0], env, force=True)),)
        else:
            vals = [self.read(e, env) for e in ins]
            fn = KERNELS.get(node.kind)
            if fn is None:
                raise OracleError(f"no kernel for op kind {node.kind!r}")
            rng = self._rng_factory(node, point)
            out = fn(node, vals, env, rng)
        out = tuple(np.asarray(v, DTYPES[dt])
                    for v, dt in zip(out, node.out_dtypes))
        for v, shp in zip(out, node.out_shapes):
            want = _concrete_shape(shp, env)
            if v.shape != want:
                raise OracleError(
                    f"{node.name} produced shape {v.shape}, declared {want}")
        self.memo[key] = out
        return out

    def _rng_factory(self, node, point):
        tag = node.params.get("tag", node.params.get("uid", node.id))
        seed = self.seed
        return lambda: np.random.default_rng((seed, tag) + point)

    def read(self, e, env, force=False):
        """Gather the source values an edge names; slice components prepend
        axes in component order. Returns None when the edge condition fails
        (force skips the condition: merge order already decided)."""
        if not force and e.psi is not None and not se.evaluate(e.psi, env):
            return None
        src = self.g.nodes[e.src]
        comps = e.phi_components()
        scal: list = []
        spans: list[tuple[int, int]] = []
        for c in comps:
            if c.kind == "slice":
                lo = se.evaluate(c.args[0], env)
                hi = se.evaluate(c.args[1], env)
                spans.append((lo, hi))
                scal.append(None)
            else:
                scal.append(se.evaluate(c, env))
        if not spans:
            return self.value(e.src, tuple(scal))[e.oid]
        elem = _concrete_shape(src.out_shapes[e.oid], {**self.benv, **env})
        dt = DTYPES[src.out_dtypes[e.oid]]
        out = np.zeros(tuple(max(0, hi - lo) for lo, hi in spans) + elem, dt)
        ranges = [range(lo, hi) for lo, hi in spans]
        for combo in itertools.product(*ranges):
            it = iter(combo)
            pt = tuple(s if s is not None else next(it) for s in scal)
            idx = tuple(x - lo for x, (lo, _) in zip(combo, spans))
            out[idx] = self.value(e.src, pt)[e.oid]
        return out

    def outputs(self) -> dict[str, np.ndarray]:
        res = {}
        for name, nid, oid in self.g.outputs:
            values = {}
            node = self.g.nodes[nid]
            exts = [self.benv[self.g.dim_bound[d]] for d in node.domain]
            for point in itertools.product(*(range(x) for x in exts)):
                values[point] = self.value(nid, point)[oid]
            res[name] = assemble_output(self.g, nid, oid, values, self.benv)
        return res


def assemble_output(g: Pdg, nid: int, oid: int, values, benv) -> np.ndarray:
    """Lay out per-point values over the node's original domain box.

    Vectorized nodes carry dims folded into leading value axes (params
    "vec", in axis order); those unfold back into canonical dim positions
    so runs with different transform settings stay comparable."""
    node = g.nodes[nid]
    vec = tuple(node.params.get("vec", ()))
    alldims = tuple(d for d in g.dim_order if d in set(node.domain) | set(vec))
    exts = {d: benv[g.dim_bound[d]] for d in alldims}
    payload = _concrete_shape(node.out_shapes[oid], benv)[len(vec):]
    arr = np.zeros(tuple(exts[d] for d in alldims) + tuple(payload),
                   DTYPES[node.out_dtypes[oid]])
    for point, v in values.items():
        at = dict(zip(node.domain, point))
        for vp in itertools.product(*(range(exts[d]) for d in vec)):
            at.update(zip(vec, vp))
            arr[tuple(at[d] for d in alldims)] = v[vp]
    return arr


def reference_execute(g: Pdg, bounds=None, inputs=None, seed=0,
                      return_bounds=False):
    """Eager evaluation of every output over its full domain. bounds maps
    bound names to ints (required for dynamic bounds only if you want to pin
    them instead of running the driver)."""
    orc = _Oracle(g, bounds, inputs, seed)
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 100_000))
    try:
        orc.resolve_dynamic()
        outs = orc.outputs()
    finally:
        sys.setrecursionlimit(old)
    if return_bounds:
        return outs, {b.name: v for b, v in orc.benv.items()}
    return outs


# ---------------------------------------------------------------------------
# static size estimate


def static_tensor_bytes(g: Pdg, bounds=None) -> dict[str, int]:
    """Eager-materialization footprint: every non-const tensor held whole,
    |domain| points times the per-point payload. Keys are node names plus
    a "total" entry."""
    benv: dict[Symbol, int] = {}
    overrides = dict(bounds or {})
    for d in g.dim_order:
        b = g.dim_bound[d]
        v = overrides.get(b.name, g.bindings.get(b))
        if not isinstance(v, int):
            raise RuntimeError_(f"bound {b.name} needs a value for the estimate")
        benv[b] = v
    per: dict[str, int] = {}
    total = 0
    for n in g.sorted_nodes():
        if n.kind == "const":
            continue
        pts = 1
        for d in n.domain:
            pts *= benv[g.dim_bound[d]]
        payload = 0
        for shp, dt in zip(n.out_shapes, n.out_dtypes):
            elems = 1
            for s in _concrete_shape(shp, benv):
                elems *= s
            payload += elems * ITEMSIZE[dt]
        per[n.name] = pts * payload
        total += pts * payload
    per["total"] = total
    return per
