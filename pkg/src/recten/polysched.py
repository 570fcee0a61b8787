"""Affine schedule construction over the dependence graph.

extract() turns every edge into convex constraint pieces over tagged sink /
source / parameter variables (edge conditions are dropped here, which only
adds pairs and keeps validity conservative). schedule() then assigns each
node one affine row per level: a band per program dim in declaration order,
sequence levels inserted when no direction can satisfy every remaining
dependence weakly, and a final constant level giving nodes a unique slot.
Per-node offsets inside a band come from a longest-path solution over
dependence-distance bounds, so skews are minimal. verify_schedule() replays
every dependence pair by plain enumeration and is the only authority on
validity. Donation analysis, memory-op augmentation and the derived memory
schedule live here as well.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field, replace

from . import polyhedra as ph
from . import symexpr as se
from .pdg import Pdg, PdgEdge, PdgNode, Report, _sccs
from .symexpr import AUX, BOUND, PARAM, SNK, SRC, SymExpr, Symbol, sym

MIB = 1 << 20
DEFAULT_SWAP_THRESHOLD = 64 * MIB
SKEW_FLOOR = 8


class PolyschedError(Exception):
    pass


# ---------------------------------------------------------------------------
# model


@dataclass
class Domains:
    """Iteration-space summary the scheduler works from."""

    dim_order: tuple[Symbol, ...]
    bound: dict[Symbol, Symbol]
    dyn: frozenset[Symbol]
    node_dims: dict[int, tuple[Symbol, ...]]
    names: dict[int, str]

    @staticmethod
    def from_pdg(g: Pdg) -> "Domains":
        return Domains(g.dim_order, dict(g.dim_bound), frozenset(g.dyn_bounds()),
                       {n.id: n.domain for n in g.sorted_nodes()},
                       {n.id: n.name for n in g.sorted_nodes()})


@dataclass
class Dep:
    """One edge's dependence relation: source runs strictly before sink."""

    snk: int
    src: int
    tag: str
    snk_dims: tuple[Symbol, ...]
    src_dims: tuple[Symbol, ...]
    snk_bounds: tuple[Symbol, ...]
    src_bounds: tuple[Symbol, ...]
    phi: SymExpr
    psi: SymExpr | None
    pieces: list[list[ph.Constraint]]


@dataclass
class JoinDep:
    """Ordering through a shared producer point: whenever the source's and
    sink's point-maps overlap (and both guards hold), the source must run
    strictly earlier."""

    snk: int
    src: int
    tag: str
    snk_dims: tuple[Symbol, ...]
    src_dims: tuple[Symbol, ...]
    snk_bounds: tuple[Symbol, ...]
    src_bounds: tuple[Symbol, ...]
    snk_map: SymExpr
    src_map: SymExpr
    snk_psi: SymExpr | None = None
    src_psi: SymExpr | None = None


@dataclass(frozen=True)
class Row:
    """One schedule level for one node: integer-affine over the node's own
    dims and bound symbols."""

    terms: tuple[tuple[Symbol, int], ...] = ()
    const: int = 0

    @staticmethod
    def make(coeffs: dict[Symbol, int], const: int = 0) -> "Row":
        items = tuple(sorted(((s, c) for s, c in coeffs.items() if c != 0),
                             key=lambda t: t[0].sort_key()))
        return Row(items, const)

    def evaluate(self, env) -> int:
        return self.const + sum(c * env[s] for s, c in self.terms)

    def shift(self, k: int) -> "Row":
        return Row(self.terms, self.const + k)


def row_text(row: Row) -> str:
    parts = []
    for s, c in row.terms:
        if not parts:
            parts.append(s.name if c == 1 else f"-{s.name}" if c == -1 else f"{c}*{s.name}")
        else:
            sign = "+" if c > 0 else "-"
            mag = abs(c)
            parts.append(f"{sign} {s.name if mag == 1 else f'{mag}*{s.name}'}")
    if row.const or not parts:
        if not parts:
            parts.append(str(row.const))
        else:
            parts.append(f"+ {row.const}" if row.const > 0 else f"- {-row.const}")
    return " ".join(parts)


@dataclass
class ScheduleFn:
    """Per-node affine execution times; levels compare lexicographically."""

    levels: tuple[tuple, ...]
    rows: dict[int, tuple[Row, ...]]
    parallel: tuple[bool, ...]

    @property
    def arity(self) -> int:
        return len(self.levels)

    def time(self, nid: int, env) -> tuple[int, ...]:
        return tuple(r.evaluate(env) for r in self.rows[nid])


# ---------------------------------------------------------------------------
# extraction


def extract(g: Pdg):
    """(domains, dependence relations, proximity bounds) for scheduling.

    Proximity keeps only constant distance bounds, computed from slice upper
    endpoints with pure bound/const arguments stripped out of min/max."""
    domains = Domains.from_pdg(g)
    bounds = g.bounds_map()
    deps: list[Dep] = []
    prox: dict[str, dict[Symbol, int]] = {}
    for e in sorted(g.edges, key=lambda e: (e.sink, e.iid, e.src)):
        snk, src = g.nodes[e.sink], g.nodes[e.src]
        for c in e.phi_components():
            if se.classify_affine(c) == "non-affine":
                raise PolyschedError(
                    f"n{e.sink} {snk.name}: non-affine dependence component "
                    f"{se.to_text(c)}")
        tag = f"n{e.src}->n{e.sink}#{e.iid}"
        pieces = se.to_presburger(e.phi, snk.domain, src.domain,
                                  {d: bounds[d] for d in snk.domain},
                                  {d: bounds[d] for d in src.domain}, psi=None)
        pieces = [p for p in pieces if ph.feasible(p)]
        deps.append(Dep(e.sink, e.src, tag, snk.domain, src.domain,
                        tuple(g.dim_bound[d] for d in snk.domain),
                        tuple(g.dim_bound[d] for d in src.domain),
                        e.phi, e.psi, pieces))
        pb = _proximity_bounds(g, e)
        if pb:
            prox[tag] = pb
    return domains, deps, prox


def _strip_clamp(e: SymExpr, dims) -> SymExpr:
    """Drop pure bound/const arguments of min/max when a dim-bearing
    argument remains."""
    if e.kind not in ("min", "max"):
        return e
    keep = [a for a in e.args if any(s in dims for s in se.free_symbols(a))]
    if not keep:
        return e
    if len(keep) == 1:
        return keep[0]
    return se.SymExpr(e.kind, tuple(keep))


def _proximity_bounds(g: Pdg, e: PdgEdge) -> dict[Symbol, int]:
    snk, src = g.nodes[e.sink], g.nodes[e.src]
    statics = {b: se.cint(v) for b, v in g.bindings.items()
               if isinstance(v, int)}
    comps = []
    for c in e.phi_components():
        if c.kind == "slice":
            hi = _strip_clamp(c.args[1], snk.domain)
            comps.append(se.simplify(se.substitute(se.sub(hi, se.ONE), statics)))
        else:
            comps.append(se.simplify(se.substitute(c, statics)))
    phi2 = se.tup(*comps)
    bounds = g.bounds_map()
    try:
        pieces = se.to_presburger(phi2, snk.domain, src.domain,
                                  {d: bounds[d] for d in snk.domain},
                                  {d: bounds[d] for d in src.domain})
    except se.SymExprError:
        return {}
    out: dict[Symbol, int] = {}
    for d in snk.domain:
        if d not in src.domain:
            continue
        obj = ph.LinExpr.make({(SRC, d): 1, (SNK, d): -1}, 0)
        params = {(PARAM, b) for b in set(g.dim_bound.values())}
        best = None
        for piece in pieces:
            b = ph.max_objective(piece, obj, params)
            if b.kind == "empty":
                continue
            if b.kind != "bounded":
                best = None
                break
            best = b.value if best is None else max(best, b.value)
        if best is not None:
            out[d] = best
    return out


# ---------------------------------------------------------------------------
# schedule search


@dataclass
class _Piece:
    dep: Dep
    cons: list[ph.Constraint]
    alive: bool = True


# per-node placement forms at one band level
_DIM = "dim"      # own loop dim, ascending or descending
_ZERO = "zero"    # constant slot (no pressure from this dim)
_TFORM = "tform"  # after the whole extent: bound symbol + offset
_ANCHOR = "anchor"  # derived affine expression over own dims/bounds


@dataclass
class _Form:
    kind: str
    dir: int = 1
    coeffs: dict = field(default_factory=dict)  # Symbol -> int (anchor only)
    const: int = 0

    def hat(self, tag: str, d: Symbol, bsym: Symbol) -> ph.LinExpr:
        """Placement as a LinExpr under a snk/src tag, offset excluded."""
        if self.kind == _DIM:
            if self.dir > 0:
                return ph.LinExpr.of((tag, d))
            return ph.LinExpr.make({(tag, d): -1, (PARAM, bsym): 1}, -1)
        if self.kind == _ZERO:
            return ph.LinExpr.constant(0)
        if self.kind == _TFORM:
            return ph.LinExpr.of((PARAM, bsym))
        coeffs = {}
        for s, c in self.coeffs.items():
            coeffs[(tag, s) if s.kind != BOUND else (PARAM, s)] = c
        return ph.LinExpr.make(coeffs, self.const)

    def row(self, d: Symbol, bsym: Symbol, delta: int) -> Row:
        if self.kind == _DIM:
            if self.dir > 0:
                return Row.make({d: 1}, delta)
            return Row.make({d: -1, bsym: 1}, delta - 1)
        if self.kind == _ZERO:
            return Row.make({}, delta)
        if self.kind == _TFORM:
            return Row.make({bsym: 1}, delta)
        return Row.make(dict(self.coeffs), self.const + delta)

    def expr(self, d: Symbol, bsym: Symbol) -> SymExpr:
        if self.kind == _DIM:
            if self.dir > 0:
                return sym(d)
            return se.simplify(se.sub(se.sub(sym(bsym), se.ONE), sym(d)))
        if self.kind == _ZERO:
            return se.ZERO
        if self.kind == _TFORM:
            return sym(bsym)
        return se.affine_expr(self.coeffs, self.const)


def _param_keep(cons, obj) -> set:
    params = set()
    for c in cons:
        params |= {v for v in c.expr.vars() if v[0] == PARAM}
    return params - obj.vars()


def _weight(piece: _Piece, obj: ph.LinExpr) -> ph.Bound:
    return ph.max_objective(piece.cons, obj, _param_keep(piece.cons, obj))


class _Search:
    def __init__(self, domains: Domains, deps: list[Dep], proximity):
        self.dom = domains
        self.pieces = [_Piece(dep, p) for dep in deps for p in dep.pieces]
        best = [v for per in proximity.values() for v in per.values()]
        self.skew_cap = max(SKEW_FLOOR, 2 + max(best, default=0))

    # -- helpers -----------------------------------------------------------

    def alive(self, members=None):
        for p in self.pieces:
            if p.alive and (members is None or
                            (p.dep.snk in members and p.dep.src in members)):
                yield p

    def _anchor_form(self, expr: SymExpr, dims) -> _Form | None:
        aff = se.as_affine(se.simplify(expr))
        if aff is None:
            return None
        coeffs, const = aff
        for s in coeffs:
            if s.kind != BOUND and s not in dims:
                return None
        return _Form(_ANCHOR, coeffs=dict(coeffs), const=const)

    def _candidates(self, nid: int, d: Symbol, in_arcs, forms) -> list[_Form]:
        """Derived placements for a node without dim d, best first."""
        dims = self.dom.node_dims[nid]
        bsym = self.dom.bound[d]
        out: list[_Form] = []
        seen = set()

        def push(expr):
            f = self._anchor_form(expr, dims)
            if f is None:
                return
            key = (tuple(sorted(((s.name, c) for s, c in f.coeffs.items()))), f.const)
            if key not in seen:
                seen.add(key)
                out.append(f)

        for p in sorted(in_arcs, key=lambda p: (p.dep.src, p.dep.tag)):
            sdims = p.dep.src_dims
            if d in sdims:
                comp = se.components(p.dep.phi)[sdims.index(d)]
                if comp.kind == "slice":
                    push(se.sub(comp.args[1], se.ONE))
                else:
                    push(comp)
            else:
                sf = forms.get(p.dep.src)
                if sf is None or sf.kind in (_ZERO,):
                    continue
                sexpr = sf.expr(d, bsym)
                mapping = {}
                ok = True
                comps = se.components(p.dep.phi)
                for s in se.free_symbols(sexpr):
                    if s.kind == BOUND:
                        continue
                    if s not in sdims:
                        ok = False
                        break
                    c = comps[sdims.index(s)]
                    mapping[s] = se.sub(c.args[1], se.ONE) if c.kind == "slice" else c
                if ok:
                    push(se.substitute(sexpr, mapping))
        out.append(_Form(_TFORM))
        return out

    def _assign_forms(self, members, d: Symbol, direction: int, arcs):
        bsym = self.dom.bound[d]
        forms: dict[int, _Form] = {}
        pending = []
        for nid in sorted(members):
            if d in self.dom.node_dims[nid]:
                forms[nid] = _Form(_DIM, dir=direction)
            else:
                pending.append(nid)
        order = _kahn(pending, [(p.dep.src, p.dep.snk) for p in arcs
                                if p.dep.src in pending and p.dep.snk in pending
                                and p.dep.src != p.dep.snk])
        if order is None:  # cycle among dim-less nodes: settle them all late
            order = sorted(pending)
            fallback = True
        else:
            fallback = False
        for nid in order:
            in_arcs = [p for p in arcs if p.dep.snk == nid]
            touch = [p for p in in_arcs
                     if forms.get(p.dep.src, _Form(_ZERO)).kind != _ZERO]
            if not touch:
                forms[nid] = _Form(_ZERO)
                continue
            if fallback:
                forms[nid] = _Form(_TFORM)
                continue
            chosen = None
            for cand in self._candidates(nid, d, touch, forms):
                ok = True
                for p in touch:
                    obj = forms[p.dep.src].hat(SRC, d, bsym).sub(cand.hat(SNK, d, bsym))
                    if _weight(p, obj).kind not in ("bounded", "empty"):
                        ok = False
                        break
                if ok:
                    chosen = cand
                    break
            if chosen is None:
                return None
            forms[nid] = chosen
        return forms

    def try_band(self, members, d: Symbol, direction: int):
        """One direction of one band over one group. Pure: returns None or
        (forms, delta, strict piece ids, vacuous piece ids, parallel flag)."""
        bsym = self.dom.bound[d]
        arcs = [p for p in self.alive(set(members))]
        forms = self._assign_forms(set(members), d, direction, arcs)
        if forms is None:
            return None
        weights = []    # (piece, w)
        vacuous = set()
        for p in arcs:
            obj = forms[p.dep.src].hat(SRC, d, bsym).sub(forms[p.dep.snk].hat(SNK, d, bsym))
            b = _weight(p, obj)
            if b.kind == "empty":
                vacuous.add(id(p))
                continue
            if b.kind != "bounded":
                return None
            weights.append((p, b.value))
        delta = {nid: 0 for nid in members}
        for _ in range(len(delta) + 1):
            changed = False
            for p, w in weights:
                want = delta[p.dep.src] + w
                if delta[p.dep.snk] < want:
                    delta[p.dep.snk] = want
                    changed = True
                    if want > self.skew_cap:
                        return None
            if not changed:
                break
        else:
            return None  # still relaxing: positive cycle
        strict = set()
        parallel = True
        for p, w in weights:
            if w + delta[p.dep.src] - delta[p.dep.snk] <= -1:
                strict.add(id(p))
                parallel = False
                continue
            obj2 = forms[p.dep.snk].hat(SNK, d, bsym).sub(forms[p.dep.src].hat(SRC, d, bsym))
            b2 = _weight(p, obj2)
            lo = -(w + delta[p.dep.src] - delta[p.dep.snk])
            hi = None if b2.kind != "bounded" else b2.value + delta[p.dep.snk] - delta[p.dep.src]
            if not (lo == 0 and hi == 0):
                parallel = False
        return forms, delta, strict, vacuous, parallel

    def try_band_dirs(self, members, d: Symbol):
        dirs = (1,) if self.dom.bound[d] in self.dom.dyn else (1, -1)
        for direction in dirs:
            sol = self.try_band(members, d, direction)
            if sol is not None:
                return sol
        return None

    def split_group(self, group, d: Symbol):
        """Refine a group into sequence phases so each phase bands on d."""
        members = set(group)
        arcs = [(p.dep.src, p.dep.snk) for p in self.alive(members)
                if p.dep.src != p.dep.snk]
        comp_of: dict[int, int] = {}
        comps = _sccs(sorted(members), _succ_map(arcs))
        for ci, comp in enumerate(comps):
            for nid in comp:
                comp_of[nid] = ci
        carcs = {(comp_of[a], comp_of[b]) for a, b in arcs
                 if comp_of[a] != comp_of[b]}
        order = _kahn(list(range(len(comps))), sorted(carcs),
                      key=lambda ci: min(comps[ci]))
        assert order is not None  # condensation is acyclic
        phases: list[tuple[list[int], tuple]] = []
        placed: dict[int, int] = {}
        for ci in order:
            start = max((placed[a] for a, b in carcs if b == ci), default=0)
            sol = None
            at = None
            for idx in range(start, len(phases)):
                trial = phases[idx][0] + comps[ci]
                sol = self.try_band_dirs(trial, d)
                if sol is not None:
                    phases[idx] = (trial, sol)
                    at = idx
                    break
            if at is None:
                sol = self.try_band_dirs(comps[ci], d)
                if sol is None:
                    names = ", ".join(self.dom.names[n] for n in comps[ci])
                    raise PolyschedError(
                        f"no valid schedule for [{names}] along {d.name}")
                phases.append((comps[ci], sol))
                at = len(phases) - 1
            placed[ci] = at
        return phases


def _succ_map(arcs):
    succ: dict[int, set[int]] = {}
    for a, b in arcs:
        succ.setdefault(a, set()).add(b)
    return {k: sorted(v) for k, v in succ.items()}


def _kahn(nodes, arcs, key=None):
    """Deterministic topological order (min key first); None on a cycle."""
    key = key or (lambda n: n)
    indeg = {n: 0 for n in nodes}
    succ: dict = {n: set() for n in nodes}
    for a, b in set(arcs):
        if a == b:
            return None
        succ[a].add(b)
        indeg[b] += 1
    heap = [(key(n), n) for n in nodes if indeg[n] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, n = heapq.heappop(heap)
        out.append(n)
        for m in sorted(succ[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, (key(m), m))
    return out if len(out) == len(nodes) else None


def schedule(domains: Domains, deps: list[Dep], proximity) -> ScheduleFn:
    """Affine rows per node: bands over each dim in declaration order,
    sequence levels where a dim forces phases, one constant tiebreak level."""
    search = _Search(domains, deps, proximity)
    nodes = sorted(domains.node_dims)
    rows: dict[int, list[Row]] = {nid: [] for nid in nodes}
    levels: list[tuple] = []
    parallel: list[bool] = []
    partition: list[list[int]] = [nodes]

    for d in domains.dim_order:
        if not any(d in domains.node_dims[n] for n in nodes):
            continue
        bsym = domains.bound[d]
        results = []
        split = False
        for grp in partition:
            sol = search.try_band_dirs(grp, d)
            if sol is None:
                results.extend(search.split_group(grp, d))
                split = True
            else:
                results.append((grp, sol))
        if split:
            idx_of = {}
            for gi, (grp, _) in enumerate(results):
                for n in grp:
                    rows[n].append(Row((), gi))
                    idx_of[n] = gi
            levels.append(("seq",))
            parallel.append(False)
            for p in search.alive():
                a, b = idx_of[p.dep.src], idx_of[p.dep.snk]
                if a != b:
                    assert a < b, f"sequence inversion on {p.dep.tag}"
                    p.alive = False
        allpar = True
        for grp, (forms, delta, strict, vacuous, par) in results:
            for n in grp:
                rows[n].append(forms[n].row(d, bsym, delta[n]))
            for p in search.alive(set(grp)):
                if id(p) in strict or id(p) in vacuous:
                    p.alive = False
            allpar = allpar and par
        levels.append(("band", d))
        parallel.append(allpar)
        partition = [grp for grp, _ in results]

    for grp in partition:
        arcs = []
        for p in search.alive(set(grp)):
            if p.dep.src == p.dep.snk:
                raise PolyschedError(
                    f"self dependence at equal time: {p.dep.tag}")
            arcs.append((p.dep.src, p.dep.snk))
        order = _kahn(sorted(grp), arcs)
        if order is None:
            names = ", ".join(domains.names[n] for n in sorted(grp))
            raise PolyschedError(f"no sequential order for [{names}]")
        rank = {n: i for i, n in enumerate(order)}
        for n in grp:
            rows[n].append(Row((), rank[n]))
    levels.append(("const",))
    parallel.append(False)

    return ScheduleFn(tuple(levels), {n: tuple(r) for n, r in rows.items()},
                      tuple(parallel))


# ---------------------------------------------------------------------------
# verification


def verify_schedule(theta: ScheduleFn, deps, bounds) -> Report:
    """Enumerate every dependence pair up to bounds and check strict
    lexicographic order; independent of the search's own reasoning."""
    rep = Report()
    benv = dict(bounds)
    for dep in deps:
        if isinstance(dep, JoinDep):
            _verify_join(theta, dep, benv, rep)
        else:
            _verify_dep(theta, dep, benv, rep)
        if len(rep.problems) > 40:
            rep.problems.append("... (truncated)")
            break
    return rep


def _points(dims, bound_syms, benv):
    return itertools.product(*(range(benv[b]) for b in bound_syms)) \
        if dims else iter([()])


def _verify_dep(theta, dep: Dep, benv, rep):
    for q in _points(dep.snk_dims, dep.snk_bounds, benv):
        env = dict(benv)
        env.update(zip(dep.snk_dims, q))
        if dep.psi is not None and not se.evaluate(dep.psi, env):
            continue
        tq = theta.time(dep.snk, env)
        for pnt in se.enumerate_points(dep.phi, env):
            if any(not (0 <= v < benv[b]) for v, b in zip(pnt, dep.src_bounds)):
                continue
            senv = dict(benv)
            senv.update(zip(dep.src_dims, pnt))
            tp = theta.time(dep.src, senv)
            if not tp < tq:
                rep.problems.append(
                    f"{dep.tag}: n{dep.src}@{pnt} !< n{dep.snk}@{q} "
                    f"({tp} vs {tq})")
                if len(rep.problems) > 40:
                    return


def _touched(map_expr, dims, bound_syms, psi, benv):
    out = []
    for q in _points(dims, bound_syms, benv):
        env = dict(benv)
        env.update(zip(dims, q))
        if psi is not None and not se.evaluate(psi, env):
            continue
        pts = frozenset(se.enumerate_points(map_expr, env))
        out.append((q, env, pts))
    return out


def _verify_join(theta, dep: JoinDep, benv, rep):
    srcs = _touched(dep.src_map, dep.src_dims, dep.src_bounds, dep.src_psi, benv)
    snks = _touched(dep.snk_map, dep.snk_dims, dep.snk_bounds, dep.snk_psi, benv)
    for q, qenv, qpts in snks:
        tq = theta.time(dep.snk, qenv)
        for p, penv, ppts in srcs:
            if not (qpts & ppts):
                continue
            tp = theta.time(dep.src, penv)
            if not tp < tq:
                rep.problems.append(
                    f"{dep.tag}: n{dep.src}@{p} !< n{dep.snk}@{q} "
                    f"({tp} vs {tq})")
                if len(rep.problems) > 40:
                    return


# ---------------------------------------------------------------------------
# schedule-order reasoning on relation pieces (donation, dominance)


def _retag(cons, rename):
    out = []
    for c in cons:
        coeffs = {}
        for v, k in c.expr.terms:
            coeffs[rename(v)] = coeffs.get(rename(v), 0) + k
        out.append(ph.Constraint(ph.LinExpr.make(coeffs, c.expr.const), c.is_eq))
    return out


def _consumer_tag(label, naux_base):
    def rename(v):
        if v[0] == SNK:
            return (label, v[1])
        if v[0] == AUX:
            return (AUX, (label, v[1] + naux_base))
        return v
    return rename


def _row_lin(row: Row, label: str) -> ph.LinExpr:
    coeffs = {}
    for s, c in row.terms:
        coeffs[(PARAM, s) if s.kind == BOUND else (label, s)] = c
    return ph.LinExpr.make(coeffs, row.const)


def _strictly_before(pieces_a, rows_a, pieces_b, rows_b):
    """True iff every read by a happens strictly before every read by b
    whenever both touch the same producer point (proved by infeasibility of
    the rational relaxation; a 'don't know' comes back False)."""
    arity = len(rows_a)
    ta = [_row_lin(r, "ca") for r in rows_a]
    tb = [_row_lin(r, "cb") for r in rows_b]
    for pa in pieces_a:
        ca = _retag(pa, _consumer_tag("ca", 0))
        for pb in pieces_b:
            cb = _retag(pb, _consumer_tag("cb", 1000))
            base = ca + cb
            combos = []
            for k in range(arity):
                cs = [ph.Constraint(ta[j].sub(tb[j]), True) for j in range(k)]
                cs.append(ph.Constraint(
                    ta[k].sub(tb[k]).sub(ph.LinExpr.constant(1)), False))
                combos.append(cs)
            combos.append([ph.Constraint(ta[j].sub(tb[j]), True)
                           for j in range(arity)])
            for extra in combos:
                if ph.feasible(base + extra):
                    return False
    return True


def _reads_partition(pieces):
    """True iff no producer point is read at two distinct sink points
    (proved on the rational relaxation)."""
    for pa in pieces:
        ca = _retag(pa, _consumer_tag("ca", 0))
        dims = sorted({v[1] for c in ca for v in c.expr.vars()
                       if v[0] == "ca"}, key=lambda s: s.sort_key())
        for pb in pieces:
            cb = _retag(pb, _consumer_tag("cb", 1000))
            for d in dims:
                gap = ph.LinExpr.make({("ca", d): 1, ("cb", d): -1}, -1)
                if ph.feasible(ca + cb + [ph.Constraint(gap, False)]):
                    return False
    return True


# ---------------------------------------------------------------------------
# donation


def donation_analysis(g: Pdg, theta: ScheduleFn, *,
                      swap_threshold: int = DEFAULT_SWAP_THRESHOLD,
                      no_swap: bool = False) -> dict[int, int]:
    """Producer node -> consumer node whose output reuses its buffer.

    A consumer qualifies when it provably reads every shared point after
    every competing read (the schedule-order formula), reads pointwise and
    unconditionally, and matches the producer's payload."""
    bounds = g.bounds_map()
    out: dict[int, int] = {}
    taken: set[int] = set()
    cache: dict[tuple[int, int, int], list] = {}

    def pieces_of(e: PdgEdge):
        key = (e.sink, e.iid, e.src)
        if key not in cache:
            snk, src = g.nodes[e.sink], g.nodes[e.src]
            ps = se.to_presburger(e.phi, snk.domain, src.domain,
                                  {d: bounds[d] for d in snk.domain},
                                  {d: bounds[d] for d in src.domain})
            cache[key] = [p for p in ps if ph.feasible(p)]
        return cache[key]

    output_ids = {nid for _, nid, _ in g.outputs}
    for prod in g.sorted_nodes():
        if not prod.domain or len(prod.out_shapes) != 1:
            continue
        if prod.kind == "input" or prod.id in output_ids:
            continue
        if not no_swap and _swap_managed(g, prod, swap_threshold):
            continue
        consumers = [e for e in g.edges if e.src == prod.id]
        if not consumers:
            continue
        candidates = []
        for e in sorted(consumers, key=lambda e: (e.sink, e.iid)):
            if e.psi is not None or e.sink == prod.id:
                continue
            snk = g.nodes[e.sink]
            if snk.id in taken or len(snk.out_shapes) != 1:
                continue
            if snk.shape != prod.shape or snk.dtype != prod.dtype:
                continue
            if snk.kind in ("set_symbol",):
                continue
            try:
                inv = se.invert_dependence(e.phi, snk.domain, prod.domain,
                                           {d: bounds[d] for d in snk.domain})
            except se.InversionError:
                continue
            if any(c.kind == "slice" for c in inv.exprs):
                continue
            candidates.append(e)
        for e in candidates:
            rows_u = theta.rows[e.sink]
            beats_all = True
            for other in consumers:
                if other is e:
                    continue
                if not _strictly_before(pieces_of(other),
                                        theta.rows[other.sink],
                                        pieces_of(e), rows_u):
                    beats_all = False
                    break
            if beats_all:
                out[prod.id] = e.sink
                taken.add(e.sink)
                break
    return out


# ---------------------------------------------------------------------------
# memory-op augmentation


@dataclass
class MemOp:
    nid: int
    kind: str           # "deallocate" | "offload" | "fetch"
    tensor: int         # producer node id
    anchor: int
    pad: int
    domain: tuple[Symbol, ...]
    map: SymExpr | None  # producer points touched, over the op's own domain
    guard: SymExpr | None
    rows: tuple[Row, ...]


@dataclass
class MemOpSet:
    ops: list[MemOp] = field(default_factory=list)
    deps: list = field(default_factory=list)
    managed: dict[int, dict] = field(default_factory=dict)


def node_static_bytes(g: Pdg, n: PdgNode, cap: int = 4096) -> int:
    """Whole-tensor static size: symbolic extents use their binding or cap."""
    total = 0
    for shape, dtype in zip(n.out_shapes, n.out_dtypes):
        size = {"f64": 8, "f32": 4, "i64": 8, "bool": 1}[dtype]
        for x in shape:
            size *= int(x)
        for d in n.domain:
            v = g.bindings.get(g.dim_bound[d])
            size *= v if isinstance(v, int) else cap
        total += size
    return total


def _swap_managed(g: Pdg, n: PdgNode, threshold: int) -> bool:
    return len(n.domain) > 1 and node_static_bytes(g, n) >= threshold


def clone_pdg(g: Pdg) -> Pdg:
    g2 = Pdg(g.dim_order, g.dim_bound, g.bindings)
    g2.nodes = dict(g.nodes)
    g2.edges = [replace(e) for e in g.edges]
    g2.outputs = list(g.outputs)
    g2._next = itertools.count(max(g.nodes, default=-1) + 1)
    g2.memops = None
    return g2


def _identity_map(domain) -> SymExpr:
    return se.tup(*(sym(d) for d in domain))


def _earliest_access(g: Pdg, theta: ScheduleFn, e: PdgEdge, benv):
    snk = g.nodes[e.sink]
    best = None
    for q in _points(snk.domain, tuple(g.dim_bound[d] for d in snk.domain), benv):
        env = dict(benv)
        env.update(zip(snk.domain, q))
        if e.psi is not None and not se.evaluate(e.psi, env):
            continue
        t = theta.time(e.sink, env)
        if best is None or t < best:
            best = t
    return best


def _substituted_rows(theta, consumer: PdgNode, inv: se.InvertedDependence,
                      prod_dims) -> tuple[Row, ...] | None:
    """Consumer rows re-expressed over the producer's dims via the inverse
    map; slice components use the end the row direction reaches last."""
    out = []
    for row in theta.rows[consumer.id]:
        expr = se.affine_expr({s: c for s, c in row.terms}, row.const)
        mapping = {}
        for d, comp in zip(consumer.domain, inv.exprs):
            coef = dict(row.terms).get(d, 0)
            if coef == 0:
                continue
            if comp.kind == "slice":
                lo, hi = comp.args
                mapping[d] = se.sub(hi, se.ONE) if coef > 0 else lo
            else:
                mapping[d] = comp
        expr = se.simplify(se.substitute(expr, mapping))
        aff = se.as_affine(expr)
        if aff is None:
            return None
        coeffs, const = aff
        if any(s.kind != BOUND and s not in prod_dims for s in coeffs):
            return None
        out.append(Row.make(dict(coeffs), const))
    return tuple(out)


def augment_memory_ops(g: Pdg, theta: ScheduleFn, *,
                       swap_threshold: int = DEFAULT_SWAP_THRESHOLD,
                       no_swap: bool = False,
                       donations: dict[int, int] | None = None):
    """Add deallocate/offload/fetch nodes with their ordering edges.

    Deallocation anchors on the provably last consumer (producer-indexed
    when the inverse map stays affine, otherwise consumer-indexed when its
    reads partition the tensor); swap transfers anchor on each consumer."""
    donations = donations or {}
    bounds = g.bounds_map()
    benv = _enum_bounds(g)
    g2 = clone_pdg(g)
    mem = MemOpSet()
    output_ids = {nid for _, nid, _ in g.outputs}

    def bsyms(dims):
        return tuple(g.dim_bound[d] for d in dims)

    def dep(snk, src, tag, snk_node, src_node, phi, psi=None):
        return Dep(snk, src, tag, snk_node.domain, src_node.domain,
                   bsyms(snk_node.domain), bsyms(src_node.domain), phi, psi,
                   [])

    def join(snk, src, tag, snk_node, src_node, snk_map, src_map,
             snk_psi=None, src_psi=None):
        return JoinDep(snk, src, tag, snk_node.domain, src_node.domain,
                       bsyms(snk_node.domain), bsyms(src_node.domain),
                       snk_map, src_map, snk_psi, src_psi)

    piece_cache: dict[tuple, list] = {}

    def pieces_of(e: PdgEdge):
        key = (e.sink, e.iid, e.src)
        if key not in piece_cache:
            snk, src = g.nodes[e.sink], g.nodes[e.src]
            ps = se.to_presburger(e.phi, snk.domain, src.domain,
                                  {d: bounds[d] for d in snk.domain},
                                  {d: bounds[d] for d in src.domain})
            piece_cache[key] = [p for p in ps if ph.feasible(p)]
        return piece_cache[key]

    next_fetch = itertools.count(1)
    next_off = itertools.count(1)
    dealloc_specs = []  # (producer, rows, domain, map, guard, anchor)

    for prod in g.sorted_nodes():
        if not prod.domain or prod.id in output_ids or prod.id in donations:
            continue
        swap = not no_swap and _swap_managed(g, prod, swap_threshold)
        consumers = sorted((e for e in g.edges if e.src == prod.id),
                           key=lambda e: (_earliest_access(g, theta, e, benv)
                                          or (), e.sink, e.iid))
        mem.managed[prod.id] = {"swap": swap, "bytes": node_static_bytes(g, prod)}

        # deallocate: no consumers -> right after production; else anchor on
        # the provably last consumer, or skip (end-of-run cleanup covers it)
        if not consumers:
            dealloc_specs.append((prod, theta.rows[prod.id], prod.domain,
                                  None, None, prod.id))
        else:
            last = consumers[-1]
            others = [e for e in consumers if e is not last]
            dominant = all(
                _strictly_before(pieces_of(c), theta.rows[c.sink],
                                 pieces_of(last), theta.rows[last.sink])
                for c in others)
            if dominant:
                spec = None
                snk = g.nodes[last.sink]
                try:
                    inv = se.invert_dependence(
                        last.phi, snk.domain, prod.domain,
                        {d: bounds[d] for d in snk.domain})
                except se.InversionError:
                    inv = None
                if inv is not None:
                    rows = _substituted_rows(theta, snk, inv, prod.domain)
                    if rows is not None:
                        spec = (prod, rows, prod.domain, None,
                                inv.condition, last.sink)
                if spec is None and _reads_partition(pieces_of(last)):
                    spec = (prod, theta.rows[last.sink], snk.domain,
                            last.phi, last.psi, last.sink)
                if spec is not None:
                    dealloc_specs.append(spec)

        if not swap or not consumers:
            continue

        koff = next(next_off)
        o0 = g2.add_node(f"{prod.name}.off0", "offload", prod.domain, ((),),
                         ("bool",), {"tensor": prod.id, "tname": prod.name,
                                     "map": None, "guard": None})
        op0 = MemOp(o0.id, "offload", prod.id, prod.id, koff, prod.domain,
                    None, None, theta.rows[prod.id])
        mem.ops.append(op0)
        mem.deps.append(dep(o0.id, prod.id, f"mem:off0 n{prod.id}", o0, prod,
                            _identity_map(prod.domain)))
        chain = [(op0, _identity_map(prod.domain), o0)]
        prev_edge = None
        for e in consumers:
            snk = g.nodes[e.sink]
            kf = next(next_fetch)
            ko = next(next_off)
            f = g2.add_node(f"{prod.name}.fetch.n{e.sink}.{e.iid}", "fetch",
                            snk.domain, ((),), ("bool",),
                            {"tensor": prod.id, "tname": prod.name,
                             "map": e.phi, "guard": e.psi})
            o = g2.add_node(f"{prod.name}.off.n{e.sink}.{e.iid}", "offload",
                            snk.domain, ((),), ("bool",),
                            {"tensor": prod.id, "tname": prod.name,
                             "map": e.phi, "guard": e.psi})
            fop = MemOp(f.id, "fetch", prod.id, e.sink, -kf, snk.domain,
                        e.phi, e.psi, theta.rows[e.sink])
            oop = MemOp(o.id, "offload", prod.id, e.sink, ko, snk.domain,
                        e.phi, e.psi, theta.rows[e.sink])
            mem.ops.extend([fop, oop])
            mem.deps.append(dep(e.sink, f.id, f"mem:fetch-use n{f.id}", snk, f,
                                _identity_map(snk.domain)))
            mem.deps.append(dep(o.id, e.sink, f"mem:use-off n{o.id}", o, snk,
                                _identity_map(snk.domain)))
            prev_op, prev_map, prev_node = chain[-1]
            ordered = prev_edge is None or _strictly_before(
                pieces_of(prev_edge), theta.rows[prev_edge.sink],
                pieces_of(e), theta.rows[e.sink])
            if ordered:
                mem.deps.append(join(f.id, prev_node.id,
                                     f"mem:chain n{prev_node.id}->n{f.id}",
                                     f, prev_node, e.phi, prev_map,
                                     snk_psi=e.psi, src_psi=prev_op.guard))
                chain.append((oop, e.phi, o))
                prev_edge = e

    kd = itertools.count(max((op.pad for op in mem.ops if op.kind == "offload"),
                             default=0) + 1)
    for prod, rows, domain, map_expr, guard, anchor in dealloc_specs:
        dnode = g2.add_node(f"{prod.name}.dealloc", "deallocate", domain,
                            ((),), ("bool",),
                            {"tensor": prod.id, "tname": prod.name,
                             "map": map_expr, "guard": guard})
        pad = next(kd)
        dnode.params["pad"] = pad
        dop = MemOp(dnode.id, "deallocate", prod.id, anchor, pad, domain,
                    map_expr, guard, rows)
        mem.ops.append(dop)
        dmap = map_expr if map_expr is not None else _identity_map(domain)
        for e in (x for x in g.edges if x.src == prod.id):
            snk = g.nodes[e.sink]
            mem.deps.append(join(dnode.id, e.sink,
                                 f"mem:use-dealloc n{e.sink}->n{dnode.id}",
                                 dnode, snk, dmap, e.phi,
                                 snk_psi=guard, src_psi=e.psi))
        for op in mem.ops:
            if op.tensor == prod.id and op.kind != "deallocate":
                src_node = g2.nodes[op.nid]
                src_map = op.map if op.map is not None else _identity_map(op.domain)
                mem.deps.append(join(dnode.id, op.nid,
                                     f"mem:transfer-dealloc n{op.nid}->n{dnode.id}",
                                     dnode, src_node, dmap, src_map,
                                     snk_psi=guard, src_psi=op.guard))
        if not [x for x in g.edges if x.src == prod.id]:
            mem.deps.append(dep(dnode.id, prod.id,
                                f"mem:prod-dealloc n{prod.id}", dnode, prod,
                                _identity_map(domain)))

    for op in mem.ops:
        g2.nodes[op.nid].params["pad"] = op.pad
    g2.memops = mem
    return g2, mem


def _enum_bounds(g: Pdg, cap: int = 4) -> dict[Symbol, int]:
    out = {}
    for b in set(g.dim_bound.values()):
        v = g.bindings.get(b)
        out[b] = min(v, cap) if isinstance(v, int) else cap
    return out


def schedule_memory(g2: Pdg, theta: ScheduleFn) -> ScheduleFn:
    """Derived times for memory ops: the anchor's rows plus one trailing
    level where fetches sort negative, execution zero, offloads and then
    deallocates positive. Verified against the synthetic edges."""
    mem: MemOpSet = getattr(g2, "memops", None)
    if mem is None:
        raise PolyschedError("augment_memory_ops must run first")
    rows = {}
    for nid, rws in theta.rows.items():
        rows[nid] = rws + (Row((), 0),)
    for op in mem.ops:
        rows[op.nid] = op.rows + (Row((), op.pad),)
    theta2 = ScheduleFn(theta.levels + (("mem",),), rows,
                        theta.parallel + (False,))

    benv = _enum_bounds(g2, cap=3)
    _, deps, _ = extract(g2)
    rep = verify_schedule(theta2, deps + mem.deps, benv)
    if not rep.ok:
        raise PolyschedError("memory schedule failed verification: "
                             + "; ".join(rep.problems[:3]))
    return theta2


# ---------------------------------------------------------------------------
# dump


def schedule_text(g: Pdg, theta: ScheduleFn) -> str:
    labels = []
    for lv, par in zip(theta.levels, theta.parallel):
        if lv[0] == "band":
            labels.append(f"band({lv[1].name})" + ("*" if par else ""))
        else:
            labels.append(lv[0])
    lines = ["levels: " + " ".join(labels)]
    for n in g.sorted_nodes():
        if n.id not in theta.rows:
            continue
        body = ", ".join(row_text(r) for r in theta.rows[n.id])
        lines.append(f"n{n.id} {n.name}: ({body})")
    return "\n".join(lines) + "\n"
