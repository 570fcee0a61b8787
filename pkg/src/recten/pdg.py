"""Polyhedral dependence graph: a cyclic multigraph of domain-tagged ops.

Nodes come from frontend tensors (index views fold into edges), edges carry
a dependence expression phi (one component per source-domain dim, scalars or
half-open slices) and an optional boolean condition psi. Cleanup passes are
classical: dead code, structural dedup, local algebraic rewrites. validate()
additionally proves (boundedly) that every cycle makes progress.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import polyhedra as ph
from . import symexpr as se
from .frontend import (Context, IndexDef, InputDef, MergeDef, OpDef,
                       SetSymbolDef, UdfDef, DISJOINT_ENUM_BOUND)
from .symexpr import BOUND, SymExpr, Symbol, sym


class PdgError(Exception):
    pass


# kinds with no input slots
LEAF_KINDS = ("const", "input", "rng", "eval_symbol")
# kinds that carry identity and must never be merged by dedup
UNIQUE_KINDS = ("input", "rng", "udf", "set_symbol")


@dataclass
class PdgNode:
    id: int
    name: str
    kind: str
    domain: tuple[Symbol, ...]
    out_shapes: tuple[tuple, ...]
    out_dtypes: tuple[str, ...]
    params: dict = field(default_factory=dict)
    nin: int = 0

    @property
    def shape(self) -> tuple:
        return self.out_shapes[0]

    @property
    def dtype(self) -> str:
        return self.out_dtypes[0]

    def __repr__(self) -> str:
        dom = ",".join(s.name for s in self.domain)
        return f"<n{self.id} {self.name}:{self.kind} ({dom})>"


@dataclass
class PdgEdge:
    sink: int
    iid: int
    phi: SymExpr  # tuple expression, |components| == |domain(source)|
    psi: SymExpr | None
    oid: int
    src: int

    def phi_components(self) -> tuple[SymExpr, ...]:
        return se.components(self.phi)


@dataclass
class InnerOp:
    """One step of a fused dataflow body; inputs reference either an outer
    slot ("ext", iid) or an earlier inner op ("op", index)."""

    name: str
    kind: str
    params: dict
    inputs: tuple[tuple[str, int], ...]


@dataclass
class InnerGraph:
    ops: tuple[InnerOp, ...]
    out: int


class Pdg:
    def __init__(self, dim_order, dim_bound, bindings):
        self.nodes: dict[int, PdgNode] = {}
        self.edges: list[PdgEdge] = []
        self.outputs: list[tuple[str, int, int]] = []  # (name, node, oid)
        self.dim_order: tuple[Symbol, ...] = tuple(dim_order)
        self.dim_bound: dict[Symbol, Symbol] = dict(dim_bound)
        self.bindings: dict[Symbol, object] = dict(bindings)
        self._next = itertools.count()

    # -- construction helpers ------------------------------------------------

    def add_node(self, name, kind, domain, out_shapes, out_dtypes, params=None,
                 nin=0) -> PdgNode:
        n = PdgNode(next(self._next), name, kind, tuple(domain),
                    tuple(tuple(s) for s in out_shapes), tuple(out_dtypes),
                    dict(params or {}), nin)
        self.nodes[n.id] = n
        return n

    def add_edge(self, sink, iid, phi, psi, oid, src) -> PdgEdge:
        e = PdgEdge(sink, iid, phi, psi, oid, src)
        self.edges.append(e)
        return e

    # -- queries ---------------------------------------------------------------

    def node(self, nid: int) -> PdgNode:
        return self.nodes[nid]

    def in_edges(self, nid: int) -> list[PdgEdge]:
        return sorted((e for e in self.edges if e.sink == nid), key=lambda e: e.iid)

    def out_edges(self, nid: int) -> list[PdgEdge]:
        return [e for e in self.edges if e.src == nid]

    def by_name(self, name: str) -> PdgNode:
        for n in self.nodes.values():
            if n.name == name:
                return n
        raise PdgError(f"no node named {name!r}")

    def bounds_map(self) -> dict[Symbol, SymExpr]:
        return {d: sym(b) for d, b in self.dim_bound.items()}

    def identity_phi(self, domain) -> SymExpr:
        return se.tup(*(sym(d) for d in domain))

    def sorted_nodes(self) -> list[PdgNode]:
        return [self.nodes[k] for k in sorted(self.nodes)]

    def dyn_bounds(self) -> set[Symbol]:
        return {b for b, v in self.bindings.items() if v == "dyn"}

    def static_bounds(self, overrides=None) -> dict[Symbol, int]:
        """Concrete value per bound symbol; dynamic bounds must be overridden
        (by a cap or a test value)."""
        out = {}
        for d in self.dim_order:
            b = self.dim_bound[d]
            v = self.bindings.get(b)
            if overrides and b.name in overrides:
                v = overrides[b.name]
            if not isinstance(v, int):
                raise PdgError(f"bound {b.name} has no static value")
            out[b] = v
        return out


# ---------------------------------------------------------------------------
# build


def build(ctx: Context) -> Pdg:
    g = Pdg(ctx.dim_order, ctx.dim_bound, ctx.bindings)
    loc: dict[int, tuple[int, int]] = {}  # tensor id -> (node id, oid)
    udf_nodes: dict[int, int] = {}  # call uid -> node id

    def slot(x) -> tuple[int, int, SymExpr]:
        """Resolve an input tensor to (src node, oid, phi), folding views.

        Nested views compose by substitution, which requires the outer view
        to be scalar-indexed (a slice of a slice has no tuple form here)."""
        phi = g.identity_phi(x.domain)
        while isinstance(x.defn, IndexDef):
            outer = se.components(phi)
            if any(c.kind == "slice" for c in outer):
                raise PdgError(f"cannot compose slice view chain at {x.name}")
            mapping = dict(zip(x.domain, outer))
            comps = [se.substitute(c, mapping)
                     for c in se.components(x.defn.index)]
            phi = se.tup(*comps)
            x = x.defn.base
        nid, oid = loc[x.id]
        return nid, oid, phi

    # pass 1: nodes (recurrences make the graph cyclic, so edges wait)
    for t in ctx.tensors:
        d = t.defn
        if d is None:
            raise PdgError(f"tensor {t.name} was declared but never defined")
        if isinstance(d, IndexDef):
            continue  # views become edges at each use
        if isinstance(d, OpDef):
            params = dict(d.params)
            if d.kind == "rng":
                params["tag"] = t.id  # keeps draws distinct across dedup
            n = g.add_node(t.name, d.kind, t.domain, [t.shape], [t.dtype],
                           params, nin=len(d.inputs))
            loc[t.id] = (n.id, 0)
        elif isinstance(d, InputDef):
            n = g.add_node(t.name, "input", t.domain, [t.shape], [t.dtype])
            loc[t.id] = (n.id, 0)
        elif isinstance(d, MergeDef):
            conds = tuple(c for c, _ in d.branches)
            n = g.add_node(t.name, "merge", t.domain, [t.shape], [t.dtype],
                           {"conds": conds}, nin=len(d.branches))
            loc[t.id] = (n.id, 0)
        elif isinstance(d, UdfDef):
            call = d.call
            if call.uid not in udf_nodes:
                spec = call.udf
                n = g.add_node(f"{spec.name}_{call.uid}", "udf", call.domain,
                               spec.out_shapes, spec.out_dtypes,
                               {"spec": spec, "uid": call.uid},
                               nin=len(call.inputs))
                udf_nodes[call.uid] = n.id
            loc[t.id] = (udf_nodes[call.uid], d.out_index)
        elif isinstance(d, SetSymbolDef):
            n = g.add_node(t.name, "set_symbol", t.domain, [t.shape], [t.dtype],
                           {"bound": d.bound, "dim": d.dim}, nin=1)
            loc[t.id] = (n.id, 0)
        else:
            raise PdgError(f"unknown definition {d!r} for {t.name}")

    # pass 2: edges
    wired_udfs: set[int] = set()
    for t in ctx.tensors:
        d = t.defn
        if isinstance(d, (IndexDef, InputDef)):
            continue
        nid = loc[t.id][0]
        if isinstance(d, OpDef):
            for k, x in enumerate(d.inputs):
                src, oid, phi = slot(x)
                g.add_edge(nid, k, phi, None, oid, src)
        elif isinstance(d, MergeDef):
            conds = tuple(c for c, _ in d.branches)
            for k, (cond, x) in enumerate(d.branches):
                src, oid, phi = slot(x)
                g.add_edge(nid, k, phi, _branch_psi(conds, k), oid, src)
        elif isinstance(d, UdfDef):
            if d.call.uid in wired_udfs:
                continue
            wired_udfs.add(d.call.uid)
            for k, x in enumerate(d.call.inputs):
                src, oid, phi = slot(x)
                g.add_edge(nid, k, phi, None, oid, src)
        elif isinstance(d, SetSymbolDef):
            src, oid, phi = slot(d.driver)
            g.add_edge(nid, 0, phi, None, oid, src)

    for name, t in ctx.outputs:
        if isinstance(t.defn, IndexDef):
            src, oid, phi = slot(t)
            n = g.add_node(f"{name}_out", "identity", t.domain,
                           [t.shape], [t.dtype], nin=1)
            g.add_edge(n.id, 0, phi, None, oid, src)
            g.outputs.append((name, n.id, 0))
        else:
            nid, oid = loc[t.id]
            g.outputs.append((name, nid, oid))
    return g


def _branch_psi(conds, k) -> SymExpr | None:
    """Dependence condition of branch k: its own condition, or for the
    trailing else the negation of every earlier one."""
    c = conds[k]
    if c is not se.TRUE:
        return c
    prior = [c2 for c2 in conds[:k] if c2 is not se.TRUE]
    if not prior:
        return None
    neg = se.not_(prior[0]) if len(prior) == 1 else se.not_(se.or_(*prior))
    neg = se.simplify(neg)
    return None if neg is se.TRUE else neg


# ---------------------------------------------------------------------------
# passes


def eliminate_dead(g: Pdg) -> Pdg:
    roots = [nid for _, nid, _ in g.outputs]
    roots += [n.id for n in g.nodes.values() if n.kind == "set_symbol"]
    rev: dict[int, list[int]] = {}
    for e in g.edges:
        rev.setdefault(e.sink, []).append(e.src)
    live: set[int] = set()
    work = list(roots)
    while work:
        nid = work.pop()
        if nid in live:
            continue
        live.add(nid)
        work.extend(rev.get(nid, ()))
    g.nodes = {k: v for k, v in g.nodes.items() if k in live}
    g.edges = [e for e in g.edges if e.sink in live and e.src in live]
    return g


def _params_key(params: dict):
    out = []
    for k in sorted(params):
        v = params[k]
        if isinstance(v, np.ndarray):
            out.append((k, str(v.dtype), v.shape, v.tobytes()))
        elif isinstance(v, (list, tuple)):
            out.append((k, tuple(v)))
        else:
            out.append((k, v))
    return tuple(out)


def deduplicate(g: Pdg) -> Pdg:
    changed = True
    while changed:
        changed = False
        seen: dict[tuple, int] = {}
        redirect: dict[int, int] = {}
        for n in g.sorted_nodes():
            if n.kind in UNIQUE_KINDS:
                continue
            ins = tuple((e.iid, e.oid, e.src, e.phi, e.psi) for e in g.in_edges(n.id))
            key = (n.kind, n.domain, n.out_shapes, n.out_dtypes,
                   _params_key(n.params), ins)
            if key in seen:
                redirect[n.id] = seen[key]
            else:
                seen[key] = n.id
        if not redirect:
            break
        changed = True
        for e in g.edges:
            if e.src in redirect:
                e.src = redirect[e.src]
        g.outputs = [(nm, redirect.get(nid, nid), oid) for nm, nid, oid in g.outputs]
        g.edges = [e for e in g.edges if e.sink not in redirect]
        g.nodes = {k: v for k, v in g.nodes.items() if k not in redirect}
    return g


def _is_identity_phi(phi: SymExpr, domain) -> bool:
    comps = se.components(phi)
    return len(comps) == len(domain) and all(
        c.kind == "sym" and c.value == d for c, d in zip(comps, domain))


def _const_is(g: Pdg, nid: int, value) -> bool:
    n = g.nodes[nid]
    if n.kind != "const" or n.domain:
        return False
    arr = n.params["value"]
    return bool(np.all(arr == value))


def simplify_algebraic(g: Pdg) -> Pdg:
    """x*1 -> x, x+0 -> x, x-0 -> x, x/1 -> x, neg(neg(x)) -> x, pow^1 -> x,
    identity/detach elision, expand-of-expand collapse. Rewrites reroute
    consumer edges; dead leaves are left for eliminate_dead."""
    changed = True
    while changed:
        changed = False
        for n in list(g.sorted_nodes()):
            e = _passthrough_input(g, n)
            if e is None or e.psi is not None:
                continue
            src = g.nodes[e.src]
            if src.out_shapes[e.oid] != n.shape or src.out_dtypes[e.oid] != n.dtype:
                continue
            comps = e.phi_components()
            identity = _is_identity_phi(e.phi, src.domain)
            if not identity and any(c.kind == "slice" for c in comps):
                continue
            rewired = []
            for oe in g.out_edges(n.id):
                ocomps = oe.phi_components()
                if identity:
                    pos = [n.domain.index(d) for d in src.domain]
                    oe.phi = se.tup(*(ocomps[j] for j in pos))
                elif all(c.kind != "slice" for c in ocomps):
                    mapping = dict(zip(n.domain, ocomps))
                    oe.phi = se.tup(*(se.substitute(c, mapping) for c in comps))
                else:
                    continue  # slice read of a shifted passthrough: keep node
                oe.src = e.src
                oe.oid = e.oid
                rewired.append(oe)
            if rewired:
                changed = True
            is_out = any(nid == n.id for _, nid, _ in g.outputs)
            if identity and is_out:
                g.outputs = [(nm, e.src if nid == n.id else nid,
                              e.oid if nid == n.id else oid)
                             for nm, nid, oid in g.outputs]
                is_out = False
            if not g.out_edges(n.id) and not is_out:
                g.edges = [x for x in g.edges if x.sink != n.id]
                del g.nodes[n.id]
                changed = True
        changed |= _collapse_expand_chains(g)
    return g


def _passthrough_input(g: Pdg, n: PdgNode) -> PdgEdge | None:
    """If n is semantically the identity of one input, return that edge."""
    ins = g.in_edges(n.id)
    if n.kind in ("identity", "detach"):
        return ins[0] if ins else None
    if n.kind == "neg":
        (e,) = ins
        src = g.nodes[e.src]
        if src.kind == "neg" and _is_identity_phi(e.phi, src.domain) and e.psi is None:
            inner = g.in_edges(src.id)[0]
            return inner
        return None
    if n.kind == "pow_const" and n.params.get("exponent") == 1.0:
        return ins[0]
    if n.kind in ("mul", "div") and len(ins) == 2:
        if _const_is(g, ins[1].src, 1):
            return ins[0]
        if n.kind == "mul" and _const_is(g, ins[0].src, 1):
            return ins[1]
        return None
    if n.kind in ("add", "sub") and len(ins) == 2:
        if _const_is(g, ins[1].src, 0):
            return ins[0]
        if n.kind == "add" and _const_is(g, ins[0].src, 0):
            return ins[1]
        return None
    return None


def _collapse_expand_chains(g: Pdg) -> bool:
    changed = False
    for n in list(g.sorted_nodes()):
        if n.kind != "expand":
            continue
        (e,) = g.in_edges(n.id)
        src = g.nodes[e.src]
        if src.kind != "expand" or src.domain != n.domain:
            continue
        if not _is_identity_phi(e.phi, src.domain) or e.psi is not None:
            continue
        inner = g.in_edges(src.id)[0]
        e.src, e.oid, e.phi, e.psi = inner.src, inner.oid, inner.phi, inner.psi
        changed = True
    return changed


# ---------------------------------------------------------------------------
# validation


@dataclass
class Report:
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def _expected_nin(n: PdgNode) -> int:
    if n.kind in LEAF_KINDS:
        return 0
    return n.nin


def validate(g: Pdg) -> Report:
    rep = Report()
    bound_syms = set(g.dim_bound.values())
    for n in g.sorted_nodes():
        ins = g.in_edges(n.id)
        want = _expected_nin(n)
        got = sorted(e.iid for e in ins)
        if n.kind == "merge":
            if got != list(range(want)):
                rep.problems.append(f"n{n.id} {n.name}: merge slots {got}, want 0..{want - 1}")
        elif got != list(range(want)):
            rep.problems.append(f"n{n.id} {n.name}: input slots {got}, want 0..{want - 1}")
        for e in ins:
            src = g.nodes.get(e.src)
            if src is None:
                rep.problems.append(f"n{n.id}: edge from missing node {e.src}")
                continue
            comps = e.phi_components()
            if len(comps) != len(src.domain):
                rep.problems.append(
                    f"n{n.id} {n.name}: phi arity {len(comps)} vs |domain({src.name})|={len(src.domain)}")
                continue
            for c in comps:
                if se.classify_affine(c) == "non-affine":
                    rep.problems.append(
                        f"n{n.id} {n.name}: non-affine phi component {se.to_text(c)}")
            if e.psi is not None:
                bad = [s for s in se.free_symbols(e.psi)
                       if s not in n.domain and s not in bound_syms]
                if bad:
                    rep.problems.append(
                        f"n{n.id} {n.name}: psi uses {[s.name for s in bad]} outside sink domain")
        if n.kind == "merge":
            _check_merge_disjoint(g, n, rep)
    _check_cycles(g, rep)
    return rep


def _check_merge_disjoint(g: Pdg, n: PdgNode, rep: Report):
    conds = n.params["conds"]
    explicit = [(k, c) for k, c in enumerate(conds) if c is not se.TRUE]
    if len(explicit) < 2:
        return
    env_base = {}
    for _, c in explicit:
        for s in se.free_symbols(c):
            if s.kind == BOUND:
                v = g.bindings.get(s)
                env_base[s] = v if isinstance(v, int) else DISJOINT_ENUM_BOUND
    ranges = []
    for d in n.domain:
        v = g.bindings.get(g.dim_bound[d])
        m = min(v, DISJOINT_ENUM_BOUND) if isinstance(v, int) else DISJOINT_ENUM_BOUND
        ranges.append(range(m))
    for point in itertools.product(*ranges):
        env = dict(env_base)
        env.update(zip(n.domain, point))
        hits = [k for k, c in explicit if se.evaluate(c, env)]
        if len(hits) > 1:
            rep.problems.append(
                f"n{n.id} {n.name}: merge branches {hits[0]} and {hits[1]} overlap at {point}")
            return


def _sccs(node_ids, succ) -> list[list[int]]:
    """Tarjan; deterministic by ascending node id."""
    index = {}
    low = {}
    stack, on_stack = [], set()
    out = []
    counter = itertools.count()

    def strong(v):
        index[v] = low[v] = next(counter)
        stack.append(v)
        on_stack.add(v)
        for w in succ.get(v, ()):
            if w not in index:
                strong(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            out.append(sorted(comp))

    import sys
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 10000))
    try:
        for v in sorted(node_ids):
            if v not in index:
                strong(v)
    finally:
        sys.setrecursionlimit(old)
    return out


def edge_pieces(g: Pdg, e: PdgEdge):
    """Presburger pieces of an edge's dependence relation."""
    snk = g.nodes[e.sink]
    src = g.nodes[e.src]
    bounds = g.bounds_map()
    return se.to_presburger(e.phi, snk.domain, src.domain,
                            {d: bounds[d] for d in snk.domain},
                            {d: bounds[d] for d in src.domain}, e.psi)


def max_dim_distance(g: Pdg, e: PdgEdge, d: Symbol, sign: int = 1):
    """max over the dependence relation of sign*(src_d - snk_d); returns a
    polyhedra.Bound aggregated over condition pieces ("empty" if none
    satisfiable)."""
    snk = g.nodes[e.sink]
    src = g.nodes[e.src]
    terms = {}
    if d in src.domain:
        terms[(se.SRC, d)] = sign
    if d in snk.domain:
        terms[(se.SNK, d)] = terms.get((se.SNK, d), 0) - sign
    obj = ph.LinExpr.make(terms, 0)
    params = [(se.PARAM, b) for b in set(g.dim_bound.values())]
    best = None
    for piece in edge_pieces(g, e):
        b = ph.max_objective(piece, obj, params)
        if b.kind == "empty":
            continue
        if b.kind in ("param", "unbounded"):
            return b
        if best is None or b.value > best.value:
            best = b
    return best if best is not None else ph.Bound("empty", None)


def _check_cycles(g: Pdg, rep: Report):
    succ: dict[int, set[int]] = {}
    by_pair: dict[tuple[int, int], list[PdgEdge]] = {}
    for e in g.edges:
        succ.setdefault(e.src, set()).add(e.sink)
        by_pair.setdefault((e.src, e.sink), []).append(e)
    for comp in _sccs(set(g.nodes), {k: sorted(v) for k, v in succ.items()}):
        cyclic = len(comp) > 1 or any(
            (v, v) in by_pair for v in comp)
        if not cyclic:
            continue
        edges = [e for (a, b), es in by_pair.items()
                 if a in comp and b in comp for e in es]
        # drop vacuous edges (unsatisfiable psi)
        live = [e for e in edges if max_dim_distance(
            g, e, g.dim_order[0] if g.dim_order else None, 1).kind != "empty"] \
            if g.dim_order else edges
        if not _well_founded(g, set(comp), live, list(g.dim_order)):
            names = ", ".join(g.nodes[v].name for v in sorted(comp))
            rep.problems.append(f"unschedulable cycle through [{names}]")


def _well_founded(g: Pdg, comp: set[int], edges: list[PdgEdge], dims) -> bool:
    if not edges:
        return True
    common = [d for d in dims
              if all(d in g.nodes[v].domain for v in comp)]
    for d, sign in itertools.product(common, (1, -1)):
        dist = {}
        ok = True
        for e in edges:
            b = max_dim_distance(g, e, d, sign)
            if b.kind == "empty":
                dist[id(e)] = None  # vacuous
            elif b.kind == "bounded" and b.value <= 0:
                dist[id(e)] = b.value
            else:
                ok = False
                break
        if not ok:
            continue
        flat = [e for e in edges if dist[id(e)] == 0]
        if not flat:
            return True
        succ: dict[int, set[int]] = {}
        for e in flat:
            succ.setdefault(e.src, set()).add(e.sink)
        rest = [x for x in dims if x != d]
        done = True
        for sub in _sccs({e.src for e in flat} | {e.sink for e in flat},
                         {k: sorted(v) for k, v in succ.items()}):
            pairs = {(e.src, e.sink) for e in flat}
            cyclic = len(sub) > 1 or any((v, v) in pairs for v in sub)
            if not cyclic:
                continue
            sub_edges = [e for e in flat if e.src in sub and e.sink in sub]
            if not _well_founded(g, set(sub), sub_edges, rest):
                done = False
                break
        if done:
            return True
    return False


# ---------------------------------------------------------------------------
# dot dump


def to_dot(g: Pdg) -> str:
    lines = ["digraph pdg {"]
    for n in g.sorted_nodes():
        dom = ",".join(s.name for s in n.domain)
        if len(n.out_dtypes) == 1:
            ty = f"{n.dtype}{list(n.shape)}"
        else:
            ty = "; ".join(f"{d}{list(s)}" for d, s in zip(n.out_dtypes, n.out_shapes))
        lines.append(f'  n{n.id} [label="{n.name} : {n.kind} ({dom}) {ty}"];')
    for e in sorted(g.edges, key=lambda e: (e.sink, e.iid, e.src)):
        lab = "[" + ", ".join(se.to_text(c) for c in e.phi_components()) + "]"
        if e.psi is not None:
            lab += f" if {se.to_text(e.psi)}"
        if e.oid:
            lab += f" #{e.oid}"
        lines.append(f'  n{e.src} -> n{e.sink} [label="{lab}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
