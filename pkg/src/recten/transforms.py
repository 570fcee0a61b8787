"""Whole-program rewrites over the dependence graph.

Three families, each oracle-preserving and independently toggleable:

* lifting + vectorization: recurrence patterns become scan/reduce nodes,
  then a symbolic dim with a static bound folds into a concrete leading
  axis on every node where the dependence structure allows it;
* incrementalization: an oversized concrete reduction and its producer
  chain are tiled into blocks indexed by a fresh symbolic dim, followed
  by a small reduction over the partials;
* fusion: maximal groups of same-domain nodes joined by identity edges
  collapse into single dataflow nodes interpreted as one unit.

All passes mutate the graph in place and return it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import symexpr as se
from .frontend import ITEMSIZE
from .pdg import (InnerGraph, InnerOp, Pdg, PdgEdge, PdgNode, PdgError,
                  _is_identity_phi, _sccs, eliminate_dead)
from .symexpr import BOUND, LOOP, SymExpr, Symbol, sym


class TransformError(PdgError):
    pass


def _is_output(g: Pdg, nid: int) -> bool:
    return any(n == nid for _, n, _ in g.outputs)


def _aff_is(e: SymExpr, coeffs: dict, const: int) -> bool:
    aff = se.as_affine(e)
    return aff is not None and aff[0] == coeffs and aff[1] == const


def _is_dim(c: SymExpr, d: Symbol) -> bool:
    return c.kind == "sym" and c.value == d


def _shifted_identity(phi: SymExpr, domain, d: Symbol, shift: int) -> bool:
    """phi is the identity on domain except dim d, which is offset by shift."""
    comps = se.components(phi)
    if len(comps) != len(domain):
        return False
    for c, dd in zip(comps, domain):
        if dd == d:
            if not _aff_is(c, {d: 1}, shift):
                return False
        elif not _is_dim(c, dd):
            return False
    return True


def _slice_positions(e: PdgEdge) -> list[int]:
    return [j for j, c in enumerate(e.phi_components()) if c.kind == "slice"]


# ---------------------------------------------------------------------------
# lifting (scan extraction + windowed add chains)


def _head_cond(g: Pdg, cond, domain):
    """Match `d == 0` (forward chain) or `d == bound-1` (reverse chain);
    returns (d, reverse) or None."""
    if cond is None or cond.kind != "eq":
        return None
    aff = se.as_affine(se.sub(cond.args[0], cond.args[1]))
    if aff is None:
        return None
    coeffs, const = aff
    if const == 0 and len(coeffs) == 1:
        (s, c), = coeffs.items()
        if abs(c) == 1 and s in domain:
            return s, False
    for d in domain:
        b = g.dim_bound[d]
        if coeffs in ({d: 1, b: -1}, {d: -1, b: 1}) and abs(const) == 1:
            return d, True
    return None


def _match_self_ref(g: Pdg, e: PdgEdge, m: PdgNode, d: Symbol, shift: int):
    """An addend that is gamma * m[d+shift]; returns (gamma, dead node ids)."""
    if e.psi is not None:
        return None
    if e.src == m.id:
        if _shifted_identity(e.phi, m.domain, d, shift):
            return 1.0, []
        return None
    s = g.nodes[e.src]
    if s.kind != "mul" or not _is_identity_phi(e.phi, s.domain):
        return None
    if s.domain != m.domain or len(g.out_edges(s.id)) != 1 or _is_output(g, s.id):
        return None
    ins = g.in_edges(s.id)
    if len(ins) != 2:
        return None
    for ce, me in (ins, ins[::-1]):
        c = g.nodes[ce.src]
        if c.kind != "const" or c.domain or c.shape or ce.psi is not None:
            continue
        if me.src == m.id and me.psi is None and \
                _shifted_identity(me.phi, m.domain, d, shift):
            return float(c.params["value"]), [s.id]
    return None


def _covers_rest(g: Pdg, c, d: Symbol, reverse: bool) -> bool:
    """Whether else-branch condition c holds everywhere the head does not:
    literal TRUE, or the exact complement of the head test."""
    if c is se.TRUE:
        return True
    if c.kind not in ("ge", "lt") or len(c.args) != 2:
        return False
    diff = se.sub(c.args[0], c.args[1])
    if c.kind == "ge" and not reverse:
        return _aff_is(diff, {d: 1}, -1)          # d >= 1
    if c.kind == "lt" and reverse:
        return _aff_is(diff, {d: 1, g.dim_bound[d]: -1}, 1)  # d < B - 1
    return False


def _drop_in_edges(g: Pdg, nids):
    dead = set(nids)
    g.edges = [e for e in g.edges if e.sink not in dead]


def _match_scan(g: Pdg, m: PdgNode):
    """Merge(d==head: x; else: x + gamma * self[d-step]) across dim d."""
    if m.kind != "merge" or len(m.params.get("conds", ())) != 2:
        return None
    c0, c1 = m.params["conds"]
    head = _head_cond(g, c0, m.domain)
    if head is None:
        return None
    d, reverse = head
    if not _covers_rest(g, c1, d, reverse):
        return None
    shift = 1 if reverse else -1
    ins = g.in_edges(m.id)
    if len(ins) != 2:
        return None
    e0, e1 = ins
    a = g.nodes[e1.src]
    if a.kind != "add" or a.domain != m.domain:
        return None
    if not _is_identity_phi(e1.phi, a.domain):
        return None
    if len(g.out_edges(a.id)) != 1 or _is_output(g, a.id):
        return None
    a_ins = g.in_edges(a.id)
    if len(a_ins) != 2:
        return None
    for self_e, x_e in (a_ins, a_ins[::-1]):
        got = _match_self_ref(g, self_e, m, d, shift)
        if got is None or x_e.psi is not None:
            continue
        gamma, dead = got
        # the head branch must read the very value the addend reads
        if (e0.src, e0.oid, e0.phi) != (x_e.src, x_e.oid, x_e.phi):
            continue
        return d, reverse, gamma, x_e, [a.id] + dead
    return None


def _final_only_readers(g: Pdg, m: PdgNode, d: Symbol, reverse: bool) -> bool:
    """True when every consumer reads only the end of the chain."""
    if _is_output(g, m.id):
        return False
    b = g.dim_bound[d]
    want = ({}, 0) if reverse else ({b: 1}, -1)
    k = m.domain.index(d)
    any_reader = False
    for e in g.out_edges(m.id):
        comps = se.components(e.phi)
        if len(comps) != len(m.domain):
            return False
        if not _aff_is(comps[k], *want):
            return False
        if any(d in se.free_symbols(c) for j, c in enumerate(comps) if j != k):
            return False
        any_reader = True
    return any_reader


def _rewrite_final_only(g: Pdg, m: PdgNode, d: Symbol, reverse: bool,
                        gamma: float, x_e: PdgEdge) -> bool:
    """Chain read only at its last point: replace with a total over the
    whole range of d."""
    src = g.nodes[x_e.src]
    if d not in src.domain:
        return False
    comps = list(se.components(x_e.phi))
    k = src.domain.index(d)
    if not _is_dim(comps[k], d):
        return False
    if any(d in se.free_symbols(c) for j, c in enumerate(comps) if j != k):
        return False
    b = g.dim_bound[d]
    comps[k] = se.slc(se.cint(0), sym(b))
    pos = m.domain.index(d)
    m.domain = m.domain[:pos] + m.domain[pos + 1:]
    if gamma == 1.0:
        m.kind, m.params = "sum", {"dims": (0,)}
    else:
        # row u of the surviving total weighs gamma^(last-u) for a forward
        # chain, gamma^u when the chain ran backward
        m.kind = "discounted_sum"
        m.params = {"dim": 0, "gamma": gamma, "reverse": not reverse}
    m.nin = 1
    g.add_edge(m.id, 0, se.tup(*comps), None, x_e.oid, x_e.src)
    for e in g.out_edges(m.id):
        ocomps = list(se.components(e.phi))
        del ocomps[pos]
        e.phi = se.tup(*ocomps)
    return True


def _shift_phi(domain, d, k) -> SymExpr:
    return se.tup(*(se.add(sym(x), se.cint(k)) if x == d else sym(x)
                    for x in domain))


def _lift_scans(g: Pdg) -> bool:
    changed = False
    for m in list(g.sorted_nodes()):
        if m.id not in g.nodes:
            continue
        got = _match_scan(g, m)
        if got is None:
            continue
        d, reverse, gamma, x_e, dead = got
        keep = PdgEdge(m.id, 0, x_e.phi, None, x_e.oid, x_e.src)
        _drop_in_edges(g, [m.id] + dead)
        for nid in dead:
            del g.nodes[nid]
        if _final_only_readers(g, m, d, reverse) and \
                _rewrite_final_only(g, m, d, reverse, gamma, keep):
            changed = True
            continue
        m.kind = "scan"
        m.params = {"gamma": gamma, "dim": d, "reverse": reverse}
        m.nin = 2
        g.edges.append(keep)
        b = g.dim_bound[d]
        if reverse:
            phi = _shift_phi(m.domain, d, 1)
            psi = se.simplify(se.lt(sym(d), se.sub(sym(b), se.cint(1))))
        else:
            phi = _shift_phi(m.domain, d, -1)
            psi = se.simplify(se.ge(sym(d), se.cint(1)))
        g.add_edge(m.id, 1, phi, psi, 0, m.id)
        changed = True
    return changed


def _absorbable(g: Pdg, e: PdgEdge, into: PdgNode) -> bool:
    s = g.nodes[e.src]
    return (s.kind == "add" and s.domain == into.domain and e.psi is None
            and e.src != e.sink and _is_identity_phi(e.phi, s.domain)
            and len(g.out_edges(s.id)) == 1 and not _is_output(g, s.id))


def _flatten_adds(g: Pdg, nid: int, leaves, dead):
    for e in g.in_edges(nid):
        if _absorbable(g, e, g.nodes[nid]):
            dead.append(e.src)
            _flatten_adds(g, e.src, leaves, dead)
        else:
            leaves.append(e)


def _lift_windows(g: Pdg) -> bool:
    """Chains like x[d-2]+x[d-1]+x[d] become one windowed slice total."""
    changed = False
    for r in list(g.sorted_nodes()):
        if r.id not in g.nodes or r.kind != "add":
            continue
        outs = g.out_edges(r.id)
        if len(outs) == 1 and _absorbable(g, outs[0], g.nodes[outs[0].sink]):
            continue  # not the root of its chain
        leaves: list[PdgEdge] = []
        dead: list[int] = []
        _flatten_adds(g, r.id, leaves, dead)
        if len(leaves) < 3:
            continue
        first = leaves[0]
        if any((e.src, e.oid) != (first.src, first.oid) or e.psi is not None
               for e in leaves):
            continue
        src = g.nodes[first.src]
        offs, k = [], None
        for e in leaves:
            comps = se.components(e.phi)
            if len(comps) != len(src.domain):
                break
            cand = None  # (position, offset); None while identity so far
            for j, (c, dd) in enumerate(zip(comps, src.domain)):
                if _is_dim(c, dd):
                    continue
                aff = se.as_affine(c)
                if cand is None and aff is not None and aff[0] == {dd: 1}:
                    cand = (j, aff[1])
                else:
                    cand = False
                    break
            if cand is False or (cand and k is not None and cand[0] != k):
                break
            if cand:
                k, off = cand
                offs.append(off)
            else:
                offs.append(0)  # pure identity read: offset zero
        else:
            if k is None:
                continue
            d = src.domain[k]
            if sorted(offs) == list(range(min(offs), min(offs) + len(offs))) \
                    and d in r.domain:
                comps = list(se.components(first.phi))
                comps[k] = se.slc(se.add(sym(d), se.cint(min(offs))),
                                  se.add(sym(d), se.cint(max(offs) + 1)))
                _drop_in_edges(g, [r.id] + dead)
                for nid in dead:
                    del g.nodes[nid]
                r.kind, r.params, r.nin = "sum", {"dims": (0,)}, 1
                g.add_edge(r.id, 0, se.tup(*comps), None, first.oid, first.src)
                changed = True
    return changed


def lift_incremental_patterns(g: Pdg) -> Pdg:
    """Turn recognizable incremental recurrences into batchable nodes:
    head/step merges into scans (into totals when only the last point is
    read) and fixed windows of shifted adds into slice sums. No match means
    no change."""
    while _lift_scans(g) or _lift_windows(g):
        pass
    return g


# ---------------------------------------------------------------------------
# vectorization


# kinds that stay per-point: identity-bearing or per-point-conditional ops
VEC_EXCLUDED = {"merge", "udf", "rng", "input", "set_symbol", "eval_symbol",
                "index_select", "window_reduce", "slice_axis", "dataflow"}
ELEMENTWISE = {"add", "sub", "mul", "div", "neg", "exp", "log", "tanh",
               "sqrt", "pow_const", "cmp", "where", "cast", "identity",
               "detach"}
# ops whose axis params shift by one when a leading axis appears
VEC_AXIS_PARAMS = {"sum": "dims", "cumsum": "dim", "discounted_sum": "dim",
                   "discounted_cumsum": "dim", "squeeze": "dim",
                   "unsqueeze": "dim"}


@dataclass
class VecPlan:
    dim: Symbol
    bound: Symbol
    nodes: set[int] = field(default_factory=set)
    classes: list[set[int]] = field(default_factory=list)


def _comp_of(domain, e: PdgEdge, d: Symbol):
    """(position, component) of dim d of the given source domain, or None."""
    if d not in domain:
        return None
    k = domain.index(d)
    comps = e.phi_components()
    if k >= len(comps):
        return None
    return k, comps[k]


def _mixes_dim(g: Pdg, e: PdgEdge, d: Symbol) -> bool:
    """d appears in a component other than the one addressing dim d."""
    dom = g.nodes[e.src].domain
    for j, c in enumerate(se.components(e.phi)):
        if (j >= len(dom) or dom[j] != d) and d in se.free_symbols(c):
            return True
    return False


def _full_range(c: SymExpr, b: Symbol) -> bool:
    return (c.kind == "slice" and _aff_is(c.args[0], {}, 0)
            and _aff_is(c.args[1], {b: 1}, 0))


def _is_scan_self(g: Pdg, e: PdgEdge, d: Symbol) -> bool:
    n = g.nodes[e.sink]
    return (e.src == e.sink and n.kind == "scan" and n.params.get("dim") == d)


def _window_eligible(g: Pdg, n: PdgNode, d: Symbol) -> bool:
    """A slice reducer whose one window moves with d can become a per-row
    windowed reduction."""
    if n.kind == "sum" and tuple(n.params["dims"]) != (0,):
        return False
    if n.kind == "discounted_sum" and n.params["dim"] != 0:
        return False
    if n.kind not in ("sum", "discounted_sum"):
        return False
    ins = g.in_edges(n.id)
    if len(ins) != 1 or ins[0].psi is not None:
        return False
    got = _comp_of(g.nodes[ins[0].src].domain, ins[0], d)
    if got is None:
        return False
    k, c = got
    return (c.kind == "slice" and d in se.free_symbols(c)
            and _slice_positions(ins[0]) == [k])


def _gather_reducer(g: Pdg, n: PdgNode, d: Symbol) -> bool:
    """A reducer over gathered ranges of other dims, with d read pointwise;
    folding leaves its axis params alone (the folded axis lands after the
    gathered ones either way)."""
    if n.kind not in ("sum", "discounted_sum"):
        return False
    ins = g.in_edges(n.id)
    if len(ins) != 1 or ins[0].psi is not None:
        return False
    slices = _slice_positions(ins[0])
    if not slices:
        return False
    if n.kind == "sum" and set(n.params["dims"]) != set(range(len(slices))):
        return False
    if n.kind == "discounted_sum" and (len(slices) != 1 or n.params["dim"] != 0):
        return False
    got = _comp_of(g.nodes[ins[0].src].domain, ins[0], d)
    return got is not None and _is_dim(got[1], d)


def _gather_scan(g: Pdg, n: PdgNode, d: Symbol) -> bool:
    """A cumulative op reading gathered ranges, with d read pointwise ahead
    of every gathered span: the folded axis lands leading in the value, so
    the running axis just shifts by one."""
    if n.kind not in ("cumsum", "discounted_cumsum"):
        return False
    ins = g.in_edges(n.id)
    if len(ins) != 1 or ins[0].psi is not None:
        return False
    slices = _slice_positions(ins[0])
    if not slices:
        return False
    got = _comp_of(g.nodes[ins[0].src].domain, ins[0], d)
    if got is None or not _is_dim(got[1], d):
        return False
    return all(j > got[0] for j in slices)


def _vec_candidate(g: Pdg, n: PdgNode, d: Symbol) -> bool:
    if d not in n.domain or n.kind in VEC_EXCLUDED:
        return False
    for e in g.edges:
        if (e.sink == n.id or e.src == n.id) and _mixes_dim(g, e, d):
            return False
    # consumers must not gather other dims in the same read: the folded
    # axis would land out of position among the gathered ones
    k_out = n.domain.index(d)
    for e in g.out_edges(n.id):
        if _is_scan_self(g, e, d):
            continue
        if any(j != k_out for j in _slice_positions(e)):
            return False
    if _window_eligible(g, n, d) or _gather_reducer(g, n, d) \
            or _gather_scan(g, n, d):
        return True
    r_out = len(n.out_shapes[0])
    for e in g.in_edges(n.id):
        if _is_scan_self(g, e, d):
            continue
        if e.psi is not None and d in se.free_symbols(e.psi):
            return False
        if _slice_positions(e):
            return False
        src = g.nodes[e.src]
        got = _comp_of(src.domain, e, d)
        if got is not None:
            if not _is_dim(got[1], d):
                return False
            if n.kind in ELEMENTWISE and n.nin > 1 \
                    and len(src.out_shapes[e.oid]) != r_out:
                return False
    if n.kind == "matmul":
        return all(len(g.nodes[e.src].out_shapes[e.oid]) >= 2
                   for e in g.in_edges(n.id))
    return True


def find_vectorizable(g: Pdg, d: Symbol) -> VecPlan:
    """Nodes over d whose folding is sound: kind-eligible, reads of d all
    pointwise-aligned, and no membership in a cycle that advances along d.
    Cycle classes are all-or-nothing: one blocked member blocks the class."""
    plan = VecPlan(d, g.dim_bound[d])
    cand = {n.id for n in g.nodes.values() if _vec_candidate(g, n, d)}
    succ: dict[int, list[int]] = {nid: [] for nid in g.nodes}
    for e in g.edges:
        succ[e.src].append(e.sink)
    for comp in _sccs(sorted(g.nodes), succ):
        members = set(comp)
        inner = [e for e in g.edges if e.src in members and e.sink in members]
        cyclic = len(comp) > 1 or any(e.src == e.sink for e in inner)
        if not cyclic:
            plan.nodes |= members & cand
            continue
        with_d = {nid for nid in members if d in g.nodes[nid].domain}
        if not with_d or not with_d <= cand:
            continue
        trivial = True
        for e in inner:
            if _is_scan_self(g, e, d):
                continue
            got = _comp_of(g.nodes[e.src].domain, e, d)
            if got is not None and not _is_dim(got[1], d):
                trivial = False
        if trivial:
            plan.nodes |= with_d
            plan.classes.append(with_d)
    # a gathered-range cumulative op needs its source unfolded, else the
    # folded axis lands behind the gathered spans instead of leading
    changed = True
    while changed:
        changed = False
        for nid in sorted(plan.nodes):
            n = g.nodes[nid]
            if _gather_scan(g, n, d) and g.in_edges(nid)[0].src in plan.nodes:
                plan.nodes.discard(nid)
                changed = True
    return plan


def _bump_axes(n: PdgNode):
    key = VEC_AXIS_PARAMS.get(n.kind)
    if key:
        v = n.params[key]
        if isinstance(v, tuple):
            n.params[key] = tuple(a + 1 for a in v)
        else:
            n.params[key] = v + 1
    if n.kind == "permute":
        n.params["order"] = (0,) + tuple(o + 1 for o in n.params["order"])


def _static_bound(g: Pdg, d: Symbol):
    v = g.bindings.get(g.dim_bound[d])
    return v if isinstance(v, int) and not isinstance(v, bool) else None


def vectorize(g: Pdg, d: Symbol, D: int | None = None) -> Pdg:
    """Fold dim d into a concrete leading axis of extent D on every planned
    node. Edges rewrite by the role of each endpoint: drop the component
    when both sides fold, gather the whole range when only the reader does,
    select rows when only the source does, and broadcast sources that never
    carried d. Scans along d become cumulative ops."""
    if D is None:
        D = _static_bound(g, d)
    if D is None:
        raise TransformError(
            f"cannot vectorize {d.name}: bound {g.dim_bound[d].name} "
            f"= {g.bindings.get(g.dim_bound[d])!r} is not static")
    b = g.dim_bound[d]
    plan = find_vectorizable(g, d)
    V = plan.nodes
    if not V:
        return g
    old_dom = {nid: n.domain for nid, n in g.nodes.items()}
    windows = {nid for nid in V if _window_eligible(g, g.nodes[nid], d)}
    plain_reducers = {nid for nid in V
                      if _gather_reducer(g, g.nodes[nid], d)} - windows

    for nid in sorted(V):
        n = g.nodes[nid]
        if nid in windows:
            e = g.in_edges(nid)[0]
            k, c = _comp_of(old_dom[e.src], e, d)
            op = "sum" if n.kind == "sum" else "dsum"
            n.params = {"dim": d, "bound": b, "op": op,
                        "lo": c.args[0], "hi": c.args[1],
                        "gamma": n.params.get("gamma"),
                        "reverse": n.params.get("reverse", False)}
            n.kind = "window_reduce"
            comps = list(se.components(e.phi))
            comps[k] = se.slc(se.cint(0), sym(b))
            e.phi = se.tup(*comps)
        elif nid in plain_reducers:
            # a folded source carries the new axis in its payload, after
            # every gathered axis; an unfolded one adds it as a gathered
            # axis at d's component rank, pushing later ranks down
            e = g.in_edges(nid)[0]
            if e.src not in V:
                k, _ = _comp_of(old_dom[e.src], e, d)
                rank = sum(1 for j in _slice_positions(e) if j < k)
                if n.kind == "sum":
                    g_ax = len(_slice_positions(e))
                    n.params["dims"] = tuple(a for a in range(g_ax + 1)
                                             if a != rank)
                elif rank == 0:
                    n.params["dim"] = 1
        elif n.kind == "scan" and n.params["dim"] == d:
            gamma, rev = n.params["gamma"], n.params.get("reverse", False)
            if gamma == 1.0:
                n.kind, n.params = "cumsum", {"dim": 0, "reverse": rev}
            else:
                n.kind = "discounted_cumsum"
                n.params = {"dim": 0, "gamma": gamma, "reverse": rev}
            n.nin = 1
            g.edges = [e for e in g.edges
                       if not (e.src == nid and e.sink == nid)]
        else:
            _bump_axes(n)
            if n.kind in ("reshape", "expand"):
                n.params["shape"] = (D,) + tuple(n.params["shape"])
        pos = n.domain.index(d)
        n.domain = n.domain[:pos] + n.domain[pos + 1:]
        n.out_shapes = tuple((D,) + s for s in n.out_shapes)
        n.params["vec"] = (d,) + tuple(n.params.get("vec", ()))

    carries = set()  # folded sinks with at least one axis-bearing input
    for e in list(g.edges):
        src_in, snk_in = e.src in V, e.sink in V
        got = _comp_of(old_dom[e.src], e, d)
        if got is not None:
            k, c = got
            comps = list(se.components(e.phi))
            if src_in:
                del comps[k]
                e.phi = se.tup(*comps)
                if snk_in:
                    if _is_dim(c, d) or (e.sink in windows and c.kind == "slice"):
                        carries.add(e.sink)
                    else:
                        _insert_index_select(g, e, d, b, c)
                elif not (_full_range(c, b) and not _slice_positions(e)):
                    _insert_index_select(g, e, d, b, c)
            elif snk_in and _is_dim(c, d):
                comps[k] = se.slc(se.cint(0), sym(b))
                e.phi = se.tup(*comps)
                carries.add(e.sink)
            # other unfolded-source forms were vetoed by the plan
    for nid in sorted(V - windows - carries):
        n = g.nodes[nid]
        if n.kind == "expand":
            continue  # its kernel broadcasts to the declared shape anyway
        ins = g.in_edges(nid)
        if not ins:
            continue
        if n.kind in ELEMENTWISE:
            e = max(ins, key=lambda e: len(g.nodes[e.src].out_shapes[e.oid]))
        else:
            e = ins[0]
        _insert_expand(g, e, D)
    return g


def _insert_index_select(g: Pdg, e: PdgEdge, d: Symbol, b: Symbol, expr):
    """Reroute e through a row select on the folded leading axis."""
    src = g.nodes[e.src]
    sink = g.nodes[e.sink]
    if expr.kind == "slice":
        lo, hi = expr.args
        shape = (se.simplify(se.sub(hi, lo)),) + tuple(src.out_shapes[e.oid][1:])
    else:
        shape = tuple(src.out_shapes[e.oid][1:])
    s = g.add_node(f"{src.name}_at", "index_select", sink.domain,
                   [shape], [src.out_dtypes[e.oid]],
                   {"dim": d, "expr": expr, "rows": False, "bound": b}, nin=1)
    g.add_edge(s.id, 0, e.phi, None, e.oid, e.src)
    e.src, e.oid, e.phi = s.id, 0, g.identity_phi(sink.domain)


def _insert_expand(g: Pdg, e: PdgEdge, D: int):
    src = g.nodes[e.src]
    shape = (D,) + tuple(src.out_shapes[e.oid])
    x = g.add_node(f"{src.name}_row", "expand", src.domain,
                   [shape], [src.out_dtypes[e.oid]], {"shape": shape}, nin=1)
    g.add_edge(x.id, 0, g.identity_phi(src.domain), None, e.oid, e.src)
    e.src, e.oid = x.id, 0


def vectorize_all(g: Pdg) -> Pdg:
    """Lift, then fold every static-bound dim, innermost first."""
    lift_incremental_patterns(g)
    for d in reversed(g.dim_order):
        if _static_bound(g, d) is None:
            continue
        vectorize(g, d)
        lift_incremental_patterns(g)
    eliminate_dead(g)
    return g


# ---------------------------------------------------------------------------
# incrementalization


@dataclass
class IncPlan:
    target: int
    bs: int
    di: str
    DI: int


# kinds a block index can be pushed through
INC_OK = {"add", "sub", "mul", "neg", "identity", "detach", "exp", "log",
          "tanh", "sqrt", "pow_const", "div", "cmp", "where", "cast",
          "permute", "squeeze", "unsqueeze", "expand"}
# of those, the ones that map a zero row to zero regardless of other inputs
ZERO_SAFE = {"mul", "neg", "identity", "detach", "tanh", "sqrt",
             "permute", "squeeze", "unsqueeze", "expand"}

DYN_FALLBACK = 4096


def _bounds_env(g: Pdg) -> dict:
    return {b: (DYN_FALLBACK if v == "dyn" else v)
            for b, v in g.bindings.items() if isinstance(v, int) or v == "dyn"}


def _payload_bytes(g: Pdg, n: PdgNode, benv, oid=0) -> int:
    elems = 1
    for s in n.out_shapes[oid]:
        elems *= s if isinstance(s, int) else se.evaluate(s, benv)
    return elems * ITEMSIZE[n.out_dtypes[oid]]


def _pad_safe(g: Pdg, nid: int, axis: dict[int, int]) -> bool:
    """Whether zero rows injected by a ragged tail survive this member as
    zeros.  Boundary inputs are zero-padded too, so an input is pad-zero
    exactly when it carries the tiled axis; broadcast inputs keep their
    value in the pad rows."""
    n = g.nodes[nid]
    if n.kind in ZERO_SAFE:
        return True
    carried = [_edge_axis(g, n, e, axis[nid])[0] == "axis"
               for e in g.in_edges(nid)]
    if n.kind in ("add", "sub"):
        return all(carried)
    if n.kind == "div":
        return len(carried) == 2 and carried[0] and not carried[1]
    if n.kind == "pow_const":
        p = n.params.get("exponent")
        return isinstance(p, (int, float)) and p > 0
    return False


def _edge_axis(g: Pdg, n: PdgNode, e: PdgEdge, i: int):
    """How payload axis i of n relates to input edge e: ("axis", j) when it
    is axis j of the source value, ("broadcast", None) when the source
    broadcasts over it, ("opaque", None) when untrackable."""
    if _slice_positions(e):
        return ("opaque", None)
    src = g.nodes[e.src]
    if n.kind == "permute":
        i = n.params["order"][i]
    elif n.kind == "squeeze":
        i = i if i < n.params["dim"] else i + 1
    elif n.kind == "unsqueeze":
        if i == n.params["dim"]:
            return ("broadcast", None)
        i = i if i < n.params["dim"] else i - 1
    elif n.kind == "reshape":
        return ("opaque", None)
    off = len(n.shape) - len(src.out_shapes[e.oid])
    j = i - off
    if j < 0:
        return ("broadcast", None)
    s = src.out_shapes[e.oid][j]
    if s == 1:
        return ("broadcast", None)
    return ("axis", j)


def find_incrementalizable(g: Pdg, block_bytes: int) -> list[IncPlan]:
    """Reductions over a concrete axis whose input payload exceeds the
    block budget, largest first."""
    benv = _bounds_env(g)
    out = []
    for n in g.sorted_nodes():
        if n.kind != "sum" or len(n.params["dims"]) != 1:
            continue
        ins = g.in_edges(n.id)
        if len(ins) != 1 or _slice_positions(ins[0]):
            continue
        src = g.nodes[ins[0].src]
        i = n.params["dims"][0]
        shape = src.out_shapes[ins[0].oid]
        if i >= len(shape) or not isinstance(shape[i], int):
            continue
        try:
            nbytes = _payload_bytes(g, src, benv, ins[0].oid)
        except se.SymExprError:
            continue
        if nbytes <= block_bytes:
            continue
        extent = shape[i]
        row = nbytes // extent
        bs = max(1, min(extent, block_bytes // max(1, row)))
        out.append((nbytes, IncPlan(n.id, bs, f"d{n.id}",
                                    math.ceil(extent / bs))))
    out.sort(key=lambda p: (-p[0], p[1].target))
    return [p for _, p in out]


def incrementalize(g: Pdg, o: int | PdgNode, bs: int, di: str = "di",
                   DI: int | None = None) -> Pdg:
    """Tile reduction o and the oversized producer chain feeding it into
    blocks of bs along the reduced axis, indexed by a fresh dim; a final
    small reduction over the DI partials takes over o's consumers."""
    if isinstance(o, PdgNode):
        o = o.id
    node = g.nodes[o]
    if node.kind != "sum" or len(node.params["dims"]) != 1:
        raise TransformError(f"{node.name} is not a single-axis reduction")
    ins = g.in_edges(o)
    if len(ins) != 1 or _slice_positions(ins[0]):
        raise TransformError(f"{node.name} reduces a gathered range, "
                             f"not a payload axis")
    src0 = g.nodes[ins[0].src]
    i0 = node.params["dims"][0]
    shape0 = src0.out_shapes[ins[0].oid]
    extent = shape0[i0] if i0 < len(shape0) else None
    if not isinstance(extent, int):
        raise TransformError(f"{node.name} reduces a non-static axis")
    if bs < 1:
        raise TransformError("block size must be at least 1")
    want = math.ceil(extent / bs)
    if DI is None:
        DI = want
    if DI != want or DI * bs < extent:
        raise TransformError(f"block count {DI} does not cover extent "
                             f"{extent} at block size {bs}")
    benv = _bounds_env(g)
    threshold = bs * (_payload_bytes(g, src0, benv, ins[0].oid) // extent)

    # grow the rewrite set along trackable producer edges
    axis: dict[int, int] = {o: i0}
    rewr: set[int] = {o}
    work = [o]
    while work:
        nid = work.pop()
        n = g.nodes[nid]
        for e in g.in_edges(nid):
            cls, j = (("axis", i0) if nid == o
                      else _edge_axis(g, n, e, axis[nid]))
            src = g.nodes[e.src]
            if cls == "broadcast":
                if e.src in rewr:
                    rewr.discard(e.src)
                continue
            if cls == "opaque" or j >= len(src.out_shapes[e.oid]) \
                    or src.out_shapes[e.oid][j] != extent:
                continue
            if e.src in rewr:
                if axis.get(e.src) != j:
                    rewr.discard(e.src)
                continue
            if (src.kind not in INC_OK or src.domain != node.domain
                    or _is_output(g, src.id)
                    or _payload_bytes(g, src, benv, e.oid) <= threshold
                    or any(_edge_axis(g, src, f, j)[0] == "opaque"
                           for f in g.in_edges(src.id))):
                continue
            rewr.add(src.id)
            axis[src.id] = j
            if src.kind != "expand":  # a broadcast creating the axis stops
                work.append(src.id)

    # drop members with consumers outside the rewritten set
    stable = False
    while not stable:
        stable = True
        for nid in sorted(rewr - {o}):
            if any(e.sink not in rewr for e in g.out_edges(nid)):
                rewr.discard(nid)
                stable = False
    if extent % bs and \
            any(not _pad_safe(g, nid, axis) for nid in rewr - {o}):
        raise TransformError(
            f"block size {bs} does not divide extent {extent} and the "
            f"producer chain is not padding-safe")

    dsym = Symbol(_fresh_dim_name(g, di), LOOP)
    dbound = Symbol(_fresh_dim_name(g, di.upper() or "DI"), BOUND)
    g.dim_order = tuple(g.dim_order) + (dsym,)
    g.dim_bound[dsym] = dbound
    g.bindings[dbound] = DI

    # final reduction over the partials takes over o's consumers
    red = g.add_node(f"{node.name}_total", "sum", node.domain,
                     [node.out_shapes[0]], [node.out_dtypes[0]],
                     {"dims": (0,)}, nin=1)
    for e in g.out_edges(o):
        e.src = red.id
    g.outputs = [(nm, red.id if nid == o else nid, oid)
                 for nm, nid, oid in g.outputs]

    for nid in sorted(rewr):
        n = g.nodes[nid]
        n.domain = tuple(n.domain) + (dsym,)
        if nid != o:
            j = axis[nid]
            n.out_shapes = tuple(s[:j] + (bs,) + s[j + 1:]
                                 for s in n.out_shapes)
            if n.kind == "expand":
                shp = list(n.params["shape"])
                shp[j] = bs
                n.params["shape"] = tuple(shp)

    for e in list(g.edges):
        if e.sink not in rewr:
            continue
        n, src = g.nodes[e.sink], g.nodes[e.src]
        if e.src in rewr:
            e.phi = se.tup(*(se.components(e.phi) + (sym(dsym),)))
            continue
        cls, j = (("axis", i0) if e.sink == o
                  else _edge_axis(g, n, e, axis[e.sink]))
        if cls != "axis" or j >= len(src.out_shapes[e.oid]) \
                or src.out_shapes[e.oid][j] != extent:
            continue  # broadcast input: the old read still applies
        sl = g.add_node(f"{src.name}_blk", "slice_axis",
                        tuple(src.domain) + (dsym,),
                        [src.out_shapes[e.oid][:j] + (bs,)
                         + src.out_shapes[e.oid][j + 1:]],
                        [src.out_dtypes[e.oid]],
                        {"axis": j, "block": bs, "dim": dsym}, nin=1)
        g.add_edge(sl.id, 0, g.identity_phi(src.domain), None, e.oid, e.src)
        e.src, e.oid = sl.id, 0
        e.phi = se.tup(*(se.components(e.phi) + (sym(dsym),)))

    g.add_edge(red.id, 0,
               se.tup(*(tuple(sym(x) for x in red.domain)
                        + (se.slc(se.cint(0), sym(dbound)),))),
               None, 0, o)
    return g


def _fresh_dim_name(g: Pdg, base: str) -> str:
    names = {s.name for s in g.dim_order} | {b.name for b in g.dim_bound.values()}
    if base not in names:
        return base
    k = 2
    while f"{base}{k}" in names:
        k += 1
    return f"{base}{k}"


# ---------------------------------------------------------------------------
# fusion


FUSE_OK = {"add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sqrt",
           "pow_const", "identity", "detach", "cast", "cmp", "where",
           "expand", "reshape", "permute", "squeeze", "unsqueeze", "sum",
           "cumsum", "discounted_sum", "discounted_cumsum", "matmul", "const"}
# kinds allowed to join a group with a strictly larger domain
FUSE_SMALL = {"const", "expand", "reshape", "permute", "squeeze",
              "unsqueeze", "identity", "detach"}


def _ordered_subset(a, b) -> bool:
    it = iter(b)
    return all(x in it for x in a)


def _plain_edge(g: Pdg, e: PdgEdge) -> bool:
    """Identity read, no condition: the two ends see the same point."""
    return e.psi is None and _is_identity_phi(e.phi, g.nodes[e.src].domain)


class _Groups:
    def __init__(self, g: Pdg):
        self.g = g
        self.parent = {nid: nid for nid in g.nodes}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def members(self, root):
        return {n for n in self.parent if self.find(n) == root}

    def try_union(self, e: PdgEdge) -> bool:
        g = self.g
        a, b = self.find(e.src), self.find(e.sink)
        if a == b:
            return False
        src, snk = g.nodes[e.src], g.nodes[e.sink]
        if src.kind not in FUSE_OK or snk.kind not in FUSE_OK:
            return False
        if not _plain_edge(g, e):
            return False
        if src.domain != snk.domain and not (
                _ordered_subset(src.domain, snk.domain)
                and src.kind in FUSE_SMALL):
            return False
        joint = self.members(a) | self.members(b)
        for e2 in g.edges:
            if e2.src in joint and e2.sink in joint and not _plain_edge(g, e2):
                return False
        doms = {g.nodes[n].domain for n in joint}
        big = max(doms, key=len)
        if any(not _ordered_subset(dm, big) for dm in doms):
            return False
        if any(g.nodes[n].domain != big and g.nodes[n].kind not in FUSE_SMALL
               for n in joint):
            return False
        if len(self._boundary(joint)) > 1:
            return False
        self.parent[a] = b
        return True

    def _boundary(self, members) -> set[int]:
        g = self.g
        out = {e.src for e in g.edges
               if e.src in members and e.sink not in members}
        out |= {n for n in members if _is_output(g, n)}
        return out


def fuse(g: Pdg) -> Pdg:
    """Collapse maximal same-domain groups joined purely by identity reads
    into single dataflow nodes, folding smaller-domain constants and layout
    ops into the group that consumes them. Identity-bearing kinds (merge,
    udf, rng, symbol ops) never fuse, and a group keeps exactly one
    outward-facing producer."""
    groups = _Groups(g)
    changed = True
    while changed:
        changed = False
        for e in sorted(g.edges, key=lambda e: (e.src, e.sink, e.iid)):
            if groups.try_union(e):
                changed = True
    roots: dict[int, set[int]] = {}
    for nid in g.nodes:
        roots.setdefault(groups.find(nid), set()).add(nid)
    for root in sorted(roots):
        members = roots[root]
        if len(members) >= 2:
            _materialize_group(g, members)
    return g


def _materialize_group(g: Pdg, members: set[int]):
    order = _topo(g, members)
    if order is None:
        return
    boundary = [n for n in order
                if _is_output(g, n)
                or any(e.src == n and e.sink not in members for e in g.edges)]
    if len(boundary) != 1:
        return
    idx = {nid: k for k, nid in enumerate(order)}
    slots: dict[tuple, int] = {}
    ext_edges: list[PdgEdge] = []
    ops = []
    for nid in order:
        n = g.nodes[nid]
        inputs = []
        for e in g.in_edges(nid):
            if e.src in members:
                inputs.append(("op", idx[e.src]))
            else:
                key = (e.src, e.oid, e.phi, e.psi)
                if key not in slots:
                    slots[key] = len(slots)
                    ext_edges.append(e)
                inputs.append(("ext", slots[key]))
        ops.append(InnerOp(n.name, n.kind, dict(n.params), tuple(inputs)))
    out_node = g.nodes[boundary[0]]
    df = g.add_node(out_node.name, "dataflow", out_node.domain,
                    [out_node.out_shapes[0]], [out_node.out_dtypes[0]],
                    {"graph": InnerGraph(tuple(ops), idx[boundary[0]]),
                     "vec": tuple(out_node.params.get("vec", ()))},
                    nin=len(slots))
    for e in g.edges:
        if e.src == boundary[0] and e.sink not in members:
            e.src, e.oid = df.id, 0
    g.outputs = [(nm, df.id if nid == boundary[0] else nid, oid)
                 for nm, nid, oid in g.outputs]
    for k, e in enumerate(ext_edges):
        g.add_edge(df.id, k, e.phi, e.psi, e.oid, e.src)
    g.edges = [e for e in g.edges
               if e.sink not in members and e.src not in members]
    for nid in members:
        del g.nodes[nid]


def _topo(g: Pdg, members: set[int]):
    indeg = {n: 0 for n in members}
    succ: dict[int, list[int]] = {n: [] for n in members}
    for e in g.edges:
        if e.src in members and e.sink in members:
            indeg[e.sink] += 1
            succ[e.src].append(e.sink)
    ready = sorted(n for n, k in indeg.items() if k == 0)
    out = []
    while ready:
        n = ready.pop(0)
        out.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort()
    return out if len(out) == len(members) else None
