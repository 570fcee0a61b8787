"""Program construction: recurrent tensors over symbolic domains.

A Context owns dims, user-defined functions and tensors. Tensors are defined
by ops over other tensors, by conditional branches (recurrences), by external
inputs, or by UDF calls; symbolic indexing produces view tensors whose index
becomes a dependence when the graph is lowered.

Gradients are symbolic: backward() builds more recurrent tensors whose
definitions invert every dependence on the path from the parameters to the
loss.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import symexpr as se
from .symexpr import BOUND, LOOP, SymExpr, Symbol, sym

DTYPES = {
    "f64": np.float64,
    "f32": np.float32,
    "i64": np.int64,
    "bool": np.bool_,
}
ITEMSIZE = {"f64": 8, "f32": 4, "i64": 8, "bool": 1}

Shape = tuple  # of int | SymExpr


class FrontendError(Exception):
    pass


class NonDifferentiableError(FrontendError):
    pass


def _check_dtype(dtype: str) -> str:
    if dtype not in DTYPES:
        raise FrontendError(f"unknown dtype {dtype!r}")
    return dtype


def broadcast_shapes(a: Shape, b: Shape) -> Shape:
    out = []
    la, lb = len(a), len(b)
    for k in range(max(la, lb)):
        xa = a[la - 1 - k] if k < la else 1
        xb = b[lb - 1 - k] if k < lb else 1
        if xa == 1:
            out.append(xb)
        elif xb == 1 or xa == xb:
            out.append(xa)
        else:
            raise FrontendError(f"cannot broadcast shapes {a} and {b}")
    return tuple(reversed(out))


DISJOINT_ENUM_BOUND = 32  # per-dim cap for the compile-time branch overlap check


def check_disjoint(ctx: "Context", domain, conds) -> tuple | None:
    """Bounded enumeration witness that two explicit branch conditions both
    hold somewhere; returns (point, j, k) or None. The trailing else (TRUE)
    is exempt. Bound symbols take their static binding when known, else the
    enumeration cap; dims enumerate min(bound, cap) values."""
    explicit = [(k, c) for k, c in enumerate(conds) if c is not se.TRUE]
    if len(explicit) < 2:
        return None
    env_base: dict[Symbol, int] = {}
    free = set()
    for _, c in explicit:
        free |= se.free_symbols(c)
    for s in free:
        if s.kind == BOUND:
            v = ctx.bindings.get(s)
            env_base[s] = v if isinstance(v, int) else DISJOINT_ENUM_BOUND
    ranges = []
    for d in domain:
        b = ctx.bindings.get(ctx.dim_bound[d])
        n = min(b, DISJOINT_ENUM_BOUND) if isinstance(b, int) else DISJOINT_ENUM_BOUND
        ranges.append(range(n))
    for point in itertools.product(*ranges):
        env = dict(env_base)
        env.update(zip(domain, point))
        hits = [k for k, c in explicit if se.evaluate(c, env)]
        if len(hits) > 1:
            return point, hits[0], hits[1]
    return None


@dataclass(frozen=True)
class OpDef:
    kind: str
    inputs: tuple["RecTensor", ...]
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MergeDef:
    branches: tuple[tuple[SymExpr, "RecTensor"], ...]  # last condition may be TRUE


@dataclass(frozen=True)
class IndexDef:
    base: "RecTensor"
    index: SymExpr  # tuple view, one component per base domain dim


@dataclass(frozen=True)
class InputDef:
    pass


@dataclass(frozen=True)
class UdfCall:
    udf: "UdfSpec"
    inputs: tuple["RecTensor", ...]
    domain: tuple[Symbol, ...]
    uid: int


@dataclass(frozen=True)
class UdfDef:
    call: UdfCall
    out_index: int


@dataclass(frozen=True)
class SetSymbolDef:
    driver: "RecTensor"
    bound: Symbol
    dim: Symbol


@dataclass(frozen=True)
class UdfSpec:
    """Opaque kernel: fn(inputs, rng) -> tuple of arrays matching out_shapes.

    Must be deterministic given (inputs, rng state); the runtime seeds rng
    from (seed, call id, point)."""

    name: str
    fn: Callable
    out_shapes: tuple[tuple[int, ...], ...]
    out_dtypes: tuple[str, ...]


class RecTensor:
    def __init__(self, ctx: "Context", name: str | None, domain: tuple[Symbol, ...],
                 shape: Shape, dtype: str, defn=None):
        self.ctx = ctx
        # per-context numbering keeps auto-names and rng tags reproducible
        # across separate builds of the same program
        self.id = next(ctx._uid)
        self.name = name or f"v{self.id}"
        self.domain = tuple(domain)
        self.shape = tuple(shape)
        self.dtype = _check_dtype(dtype)
        self.defn = defn
        ctx._register(self)

    def __repr__(self) -> str:
        dom = ",".join(s.name for s in self.domain)
        return f"<{self.name}[{dom}] {self.dtype}{list(self.shape)}>"

    def define(self, branches: Sequence[tuple[SymExpr | None, "RecTensor"]]):
        """Complete a forward declaration with conditional branches; a None
        condition is the final else."""
        if self.defn is not None:
            raise FrontendError(f"{self.name} is already defined")
        if not branches:
            raise FrontendError("merge needs at least one branch")
        fixed = []
        for k, (cond, src) in enumerate(branches):
            cond = se.TRUE if cond is None else se.wrap(cond)
            if cond is se.TRUE and k != len(branches) - 1:
                raise FrontendError(
                    f"branch {k} of {self.name} is unconditionally true but not last")
            for s in se.free_symbols(cond):
                if s.kind == LOOP and s not in self.domain:
                    raise FrontendError(
                        f"branch condition on {self.name} uses {s.name} outside its domain")
            if src.shape != self.shape or src.dtype != self.dtype:
                raise FrontendError(
                    f"branch {k} of {self.name}: got {src.dtype}{list(src.shape)}, "
                    f"want {self.dtype}{list(self.shape)}")
            if not set(src.domain) <= set(self.domain):
                raise FrontendError(f"branch {k} of {self.name} widens the domain")
            fixed.append((se.simplify(cond), src))
        overlap = check_disjoint(self.ctx, self.domain, [c for c, _ in fixed])
        if overlap is not None:
            point, j, k = overlap
            raise FrontendError(
                f"branches {j} and {k} of {self.name} overlap at {point}")
        self.defn = MergeDef(tuple(fixed))

    # -- indexing -----------------------------------------------------------

    def index(self, index) -> "RecTensor":
        if isinstance(index, str):
            index = se.parse(index, self.ctx.resolve_symbol)
        index = se.wrap(index) if not isinstance(index, SymExpr) else index
        comps = se.components(index)
        if len(comps) != len(self.domain):
            raise FrontendError(
                f"{self.name} has {len(self.domain)} domain dims, index has {len(comps)}")
        if isinstance(self.defn, IndexDef):
            raise FrontendError("cannot index an indexed view; name the intermediate")
        domain_syms: set[Symbol] = set()
        extents: list = []
        for comp in comps:
            for s in se.free_symbols(comp):
                if s.kind == LOOP:
                    if s not in self.ctx.dim_order:
                        raise FrontendError(f"unknown dim {s.name} in index")
                    domain_syms.add(s)
            if comp.kind == "slice":
                ext = se.simplify(se.sub(comp.args[1], comp.args[0]))
                extents.append(ext.value if ext.kind == "int" else ext)
        domain = tuple(s for s in self.ctx.dim_order if s in domain_syms)
        idx = se.tup(*(se.simplify(c) for c in comps)) if len(comps) != 1 else se.simplify(comps[0])
        if len(comps) == 1 and idx.kind == "tuple":
            idx = idx.args[0]
        return RecTensor(self.ctx, None, domain, tuple(extents) + self.shape, self.dtype,
                         IndexDef(self, se.tup(*se.components(idx))))

    def __getitem__(self, index) -> "RecTensor":
        return self.index(index)

    # -- operator sugar -----------------------------------------------------

    def _coerce(self, other) -> "RecTensor":
        if isinstance(other, RecTensor):
            return other
        if isinstance(other, (int, float)):
            return self.ctx.constant(other, dtype=self.dtype)
        raise FrontendError(f"cannot mix {other!r} into tensor arithmetic")

    def __add__(self, other):
        return self.ctx.op("add", [self, self._coerce(other)])

    def __radd__(self, other):
        return self.ctx.op("add", [self._coerce(other), self])

    def __sub__(self, other):
        return self.ctx.op("sub", [self, self._coerce(other)])

    def __rsub__(self, other):
        return self.ctx.op("sub", [self._coerce(other), self])

    def __mul__(self, other):
        return self.ctx.op("mul", [self, self._coerce(other)])

    def __rmul__(self, other):
        return self.ctx.op("mul", [self._coerce(other), self])

    def __truediv__(self, other):
        return self.ctx.op("div", [self, self._coerce(other)])

    def __rtruediv__(self, other):
        return self.ctx.op("div", [self._coerce(other), self])

    def __neg__(self):
        return self.ctx.op("neg", [self])

    def __matmul__(self, other):
        return self.ctx.op("matmul", [self, other])

    def __pow__(self, c):
        return self.ctx.op("pow_const", [self], {"exponent": float(c)})


ELEMENTWISE_UNARY = ("neg", "exp", "log", "tanh", "sqrt")
ELEMENTWISE_BINARY = ("add", "sub", "mul", "div")
LAYOUT_KINDS = ("reshape", "permute", "squeeze", "unsqueeze", "expand", "identity",
                "index_select", "slice_axis")


class Context:
    def __init__(self):
        self.dim_order: list[Symbol] = []
        self.dim_bound: dict[Symbol, Symbol] = {}
        self.tensors: list[RecTensor] = []
        self.outputs: list[tuple[str, RecTensor]] = []
        self.udfs: dict[str, UdfSpec] = {}
        # bound Symbol -> static int, or "dyn" when fixed at runtime
        self.bindings: dict[Symbol, object] = {}
        self._names: set[str] = set()
        self._uid = itertools.count()

    # -- symbols ------------------------------------------------------------

    def declare_dim(self, name: str, bound: str) -> tuple[Symbol, Symbol]:
        d = Symbol(name, LOOP)
        ub = Symbol(bound, BOUND)
        if d in self.dim_bound:
            raise FrontendError(f"dim {name} already declared")
        self.dim_order.append(d)
        self.dim_bound[d] = ub
        return d, ub

    def resolve_symbol(self, name: str) -> Symbol:
        for d in self.dim_order:
            if d.name == name:
                return d
            if self.dim_bound[d].name == name:
                return self.dim_bound[d]
        raise se.ParseError(f"unknown symbol {name!r}", 0)

    def canonical_domain(self, syms: Iterable[Symbol]) -> tuple[Symbol, ...]:
        ss = set(syms)
        return tuple(d for d in self.dim_order if d in ss)

    def bind(self, bound: Symbol | str, value) -> None:
        if isinstance(bound, str):
            bound = self.resolve_symbol(bound)
        if bound.kind != BOUND:
            raise FrontendError(f"{bound.name} is not a bound symbol")
        if value != "dyn" and (not isinstance(value, int) or value <= 0):
            raise FrontendError(f"bound {bound.name} must be a positive int or 'dyn'")
        self.bindings[bound] = value

    def bounds_map(self) -> dict[Symbol, SymExpr]:
        return {d: sym(b) for d, b in self.dim_bound.items()}

    def _register(self, t: RecTensor):
        if t.name in self._names:
            raise FrontendError(f"duplicate tensor name {t.name!r}")
        self._names.add(t.name)
        self.tensors.append(t)

    # -- leaf tensors -------------------------------------------------------

    def constant(self, value, dtype: str = "f64", shape: Shape = (), name: str | None = None) -> RecTensor:
        arr = np.asarray(value, dtype=DTYPES[_check_dtype(dtype)])
        if shape and arr.shape != tuple(shape):
            arr = np.broadcast_to(arr, tuple(shape)).copy()
        return RecTensor(self, name, (), arr.shape, dtype,
                         OpDef("const", (), {"value": arr}))

    def input(self, name: str, shape: Shape, dtype: str = "f64",
              domain: tuple[Symbol, ...] = ()) -> RecTensor:
        return RecTensor(self, name, domain, shape, dtype, InputDef())

    def rng(self, name: str, shape: Shape, dtype: str = "f64",
            domain: tuple[Symbol, ...] = (), dist: str = "normal") -> RecTensor:
        if dist not in ("normal", "uniform"):
            raise FrontendError(f"unknown distribution {dist!r}")
        return RecTensor(self, name, domain, shape, dtype,
                         OpDef("rng", (), {"dist": dist}))

    def recurrent(self, name: str, shape: Shape, dtype: str = "f64",
                  domain: tuple[Symbol, ...] = ()) -> RecTensor:
        return RecTensor(self, name, domain, shape, dtype, None)

    # -- ops ----------------------------------------------------------------

    def op(self, kind: str, inputs: Sequence[RecTensor], params: dict | None = None,
           name: str | None = None) -> RecTensor:
        params = dict(params or {})
        inputs = tuple(inputs)
        domain = self.canonical_domain(s for x in inputs for s in x.domain)
        shape, dtype = _infer(kind, inputs, params)
        return RecTensor(self, name, domain, shape, dtype, OpDef(kind, inputs, params))

    def sum(self, x: RecTensor, dims: int | Sequence[int]) -> RecTensor:
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        dims = tuple(sorted(d % len(x.shape) for d in dims))
        return self.op("sum", [x], {"dims": dims})

    def mean(self, x: RecTensor, dims: int | Sequence[int]) -> RecTensor:
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        dims = tuple(sorted(d % len(x.shape) for d in dims))
        n = 1
        for d in dims:
            ext = x.shape[d]
            if not isinstance(ext, int):
                raise FrontendError("mean over a symbolic extent is not supported")
            n *= ext
        return self.sum(x, dims) * (1.0 / n)

    def cumsum(self, x: RecTensor, dim: int = 0, reverse: bool = False) -> RecTensor:
        return self.op("cumsum", [x], {"dim": dim % len(x.shape), "reverse": reverse})

    def discounted_sum(self, x: RecTensor, gamma: float, dim: int = 0,
                       reverse: bool = False) -> RecTensor:
        return self.op("discounted_sum", [x],
                       {"dim": dim % len(x.shape), "gamma": float(gamma), "reverse": reverse})

    def matmul(self, a: RecTensor, b: RecTensor) -> RecTensor:
        return self.op("matmul", [a, b])

    def expand(self, x: RecTensor, shape: Shape) -> RecTensor:
        return self.op("expand", [x], {"shape": tuple(shape)})

    def reshape(self, x: RecTensor, shape: Shape) -> RecTensor:
        return self.op("reshape", [x], {"shape": tuple(shape)})

    def permute(self, x: RecTensor, order: Sequence[int]) -> RecTensor:
        return self.op("permute", [x], {"order": tuple(order)})

    def squeeze(self, x: RecTensor, dim: int) -> RecTensor:
        return self.op("squeeze", [x], {"dim": dim % len(x.shape)})

    def unsqueeze(self, x: RecTensor, dim: int) -> RecTensor:
        return self.op("unsqueeze", [x], {"dim": dim % (len(x.shape) + 1)})

    def detach(self, x: RecTensor) -> RecTensor:
        return self.op("detach", [x])

    def cmp(self, op: str, a: RecTensor, b: RecTensor) -> RecTensor:
        return self.op("cmp", [a, b], {"op": op})

    def where(self, c: RecTensor, a: RecTensor, b: RecTensor) -> RecTensor:
        return self.op("where", [c, a, b])

    def eval_symbol(self, dim: Symbol) -> RecTensor:
        if dim not in self.dim_bound and dim.kind == LOOP:
            raise FrontendError(f"unknown dim {dim.name}")
        domain = (dim,) if dim.kind == LOOP else ()
        return RecTensor(self, None, domain, (), "i64",
                         OpDef("eval_symbol", (), {"symbol": dim}))

    def set_symbol(self, bound: Symbol, dim: Symbol, driver: RecTensor) -> RecTensor:
        if driver.dtype != "bool" or driver.shape != ():
            raise FrontendError("set_symbol driver must be a scalar bool tensor")
        if dim not in driver.domain:
            raise FrontendError("set_symbol driver must vary over the watched dim")
        return RecTensor(self, None, driver.domain, (), "bool",
                         SetSymbolDef(driver, bound, dim))

    # -- UDFs ---------------------------------------------------------------

    def register_udf(self, name: str, fn: Callable,
                     out_shapes: Sequence[tuple[int, ...]],
                     out_dtypes: Sequence[str]) -> UdfSpec:
        spec = UdfSpec(name, fn, tuple(tuple(s) for s in out_shapes),
                       tuple(_check_dtype(d) for d in out_dtypes))
        self.udfs[name] = spec
        return spec

    def udf(self, name: str, inputs: Sequence[RecTensor],
            domain: tuple[Symbol, ...] | None = None) -> tuple[RecTensor, ...]:
        spec = self.udfs[name]
        inputs = tuple(inputs)
        if domain is None:
            domain = self.canonical_domain(s for x in inputs for s in x.domain)
        call = UdfCall(spec, inputs, tuple(domain), next(self._uid))
        outs = []
        for k, (shp, dt) in enumerate(zip(spec.out_shapes, spec.out_dtypes)):
            outs.append(RecTensor(self, None, tuple(domain), shp, dt, UdfDef(call, k)))
        return tuple(outs)

    # -- outputs ------------------------------------------------------------

    def mark_output(self, x: RecTensor, name: str | None = None):
        self.outputs.append((name or x.name, x))

    # -- gradients ----------------------------------------------------------

    def backward(self, loss: RecTensor, wrt: Sequence[RecTensor]) -> dict[RecTensor, RecTensor]:
        return _backward(self, loss, list(wrt))


def _infer(kind: str, inputs: tuple[RecTensor, ...], params: dict) -> tuple[Shape, str]:
    if kind in ELEMENTWISE_UNARY:
        (x,) = inputs
        if kind != "neg" and x.dtype not in ("f64", "f32"):
            raise FrontendError(f"{kind} needs a float input")
        return x.shape, x.dtype
    if kind in ELEMENTWISE_BINARY:
        a, b = inputs
        if a.dtype != b.dtype:
            raise FrontendError(f"{kind}: dtype mismatch {a.dtype} vs {b.dtype}")
        return broadcast_shapes(a.shape, b.shape), a.dtype
    if kind == "pow_const":
        (x,) = inputs
        return x.shape, x.dtype
    if kind == "matmul":
        a, b = inputs
        sa, sb = a.shape, b.shape
        if any(not isinstance(d, int) for d in sa + sb):
            raise FrontendError("matmul with symbolic extents is not supported")
        if a.dtype != b.dtype:
            raise FrontendError("matmul: dtype mismatch")
        va = sa if len(sa) > 1 else (1,) + sa
        vb = sb if len(sb) > 1 else sb + (1,)
        if va[-1] != vb[-2]:
            raise FrontendError(f"matmul: inner dims differ ({sa} @ {sb})")
        batch = broadcast_shapes(va[:-2], vb[:-2])
        out = batch + (va[-2], vb[-1])
        if len(sa) == 1:
            out = out[:-2] + (out[-1],)
        if len(sb) == 1:
            out = out[:-1]
        return out, a.dtype
    if kind == "sum":
        (x,) = inputs
        dims = params["dims"]
        return tuple(d for k, d in enumerate(x.shape) if k not in dims), x.dtype
    if kind == "cumsum":
        (x,) = inputs
        return x.shape, x.dtype
    if kind == "discounted_sum":
        (x,) = inputs
        d = params["dim"]
        return x.shape[:d] + x.shape[d + 1:], x.dtype
    if kind == "reshape":
        (x,) = inputs
        shape = params["shape"]
        if any(not isinstance(d, int) for d in tuple(x.shape) + tuple(shape)):
            raise FrontendError("reshape with symbolic extents is not supported")
        if int(np.prod(x.shape or (1,))) != int(np.prod(shape or (1,))):
            raise FrontendError(f"reshape {x.shape} -> {shape} changes element count")
        return tuple(shape), x.dtype
    if kind == "permute":
        (x,) = inputs
        order = params["order"]
        if sorted(order) != list(range(len(x.shape))):
            raise FrontendError(f"bad permutation {order} for rank {len(x.shape)}")
        return tuple(x.shape[k] for k in order), x.dtype
    if kind == "squeeze":
        (x,) = inputs
        d = params["dim"]
        if x.shape[d] != 1:
            raise FrontendError(f"squeeze dim {d} has extent {x.shape[d]}")
        return x.shape[:d] + x.shape[d + 1:], x.dtype
    if kind == "unsqueeze":
        (x,) = inputs
        d = params["dim"]
        return x.shape[:d] + (1,) + x.shape[d:], x.dtype
    if kind == "expand":
        (x,) = inputs
        shape = tuple(params["shape"])
        broadcast_shapes(x.shape, shape)
        if len(shape) < len(x.shape):
            raise FrontendError("expand cannot drop axes")
        return shape, x.dtype
    if kind in ("identity", "detach"):
        (x,) = inputs
        return x.shape, x.dtype
    if kind == "cast":
        (x,) = inputs
        return x.shape, params["dtype"]
    if kind == "cmp":
        a, b = inputs
        if params["op"] not in ("eq", "ne", "lt", "le", "gt", "ge"):
            raise FrontendError(f"unknown comparison {params['op']!r}")
        if a.dtype != b.dtype:
            raise FrontendError(f"cmp: dtype mismatch {a.dtype} vs {b.dtype}")
        return broadcast_shapes(a.shape, b.shape), "bool"
    if kind == "where":
        c, a, b = inputs
        if c.dtype != "bool" or a.dtype != b.dtype:
            raise FrontendError("where needs (bool, x, x) inputs")
        return broadcast_shapes(c.shape, broadcast_shapes(a.shape, b.shape)), a.dtype
    raise FrontendError(f"unknown op kind {kind!r}")


# ---------------------------------------------------------------------------
# Symbolic backprop


def _consumers(ctx: Context) -> dict[RecTensor, list[RecTensor]]:
    out: dict[RecTensor, list[RecTensor]] = {}
    for t in ctx.tensors:
        if t.defn is None:
            continue  # forward declarations may be completed later
        for src in _def_inputs(t):
            out.setdefault(src, []).append(t)
    return out


def _def_inputs(t: RecTensor) -> tuple[RecTensor, ...]:
    d = t.defn
    if d is None:
        raise FrontendError(f"{t.name} was declared but never defined")
    if isinstance(d, OpDef):
        return d.inputs
    if isinstance(d, MergeDef):
        return tuple(src for _, src in d.branches)
    if isinstance(d, IndexDef):
        return (d.base,)
    if isinstance(d, UdfDef):
        return d.call.inputs
    if isinstance(d, SetSymbolDef):
        return (d.driver,)
    if isinstance(d, InputDef):
        return ()
    raise FrontendError(f"unknown definition {d!r}")


def _reachable(roots: Iterable[RecTensor], adj: Mapping[RecTensor, Sequence[RecTensor]]) -> set[RecTensor]:
    seen, work = set(), list(roots)
    while work:
        t = work.pop()
        if t in seen:
            continue
        seen.add(t)
        work.extend(adj.get(t, ()))
    return seen


_BARRIER_OPS = {"detach", "cmp", "where", "cast", "rng"}


def _grad_blocked(t: RecTensor) -> bool:
    """No gradient flows through this tensor's definition."""
    d = t.defn
    if isinstance(d, (UdfDef, SetSymbolDef)):
        return True
    return isinstance(d, OpDef) and d.kind in _BARRIER_OPS


class _GradBuilder:
    def __init__(self, ctx: Context, loss: RecTensor, wrt: list[RecTensor]):
        self.ctx = ctx
        self.loss = loss
        self.wrt = wrt
        self.consumers = _consumers(ctx)
        # barriers bound the active set on both sides, so graphs hanging off
        # a detach (an earlier gradient, say) never demand vjp rules
        fwd = _reachable(wrt, {s: [t for t in ts if not _grad_blocked(t)]
                               for s, ts in self.consumers.items()})
        back = _reachable([loss], {t: list(_def_inputs(t))
                                   for t in ctx.tensors
                                   if t.defn is not None and not _grad_blocked(t)})
        self.active = fwd & back
        self.core = {t for t in self.active if not isinstance(t.defn, IndexDef)}
        self.contribs: dict[RecTensor, list[RecTensor]] = {t: [] for t in self.core}

    def zeros_like(self, x: RecTensor) -> RecTensor:
        return self.ctx.constant(0.0, dtype=x.dtype, shape=x.shape)

    def run(self) -> dict[RecTensor, RecTensor]:
        if self.loss.shape != () or self.loss.domain != ():
            raise FrontendError("loss must be a scalar with an empty domain")
        if self.loss not in self.active:
            # No differentiable path: all-zero gradients.
            return {p: self.zeros_like(p) for p in self.wrt}
        seeded = self.ctx.constant(1.0, dtype=self.loss.dtype)
        placeholders: dict[RecTensor, RecTensor] = {}
        for x in sorted(self.core, key=lambda t: t.id):
            # a second backward over an overlapping graph reuses base names
            name = f"grad_{x.name}"
            k = 1
            while name in self.ctx._names:
                k += 1
                name = f"grad_{x.name}_{k}"
            placeholders[x] = self.ctx.recurrent(name, x.shape, x.dtype, x.domain)
        self.grad_of = placeholders
        for y in sorted(self.core, key=lambda t: t.id):
            self.emit_contributions(y)
        for x, ph in placeholders.items():
            parts = self.contribs[x]
            if x is self.loss:
                parts = [seeded] + parts
            if not parts:
                total = self.zeros_like(x)
            else:
                total = parts[0]
                for p in parts[1:]:
                    total = total + p
            ph.define([(None, total)])
        return {p: placeholders[p] for p in self.wrt}

    # For each active consumer y, push d(loss)/dy into its active inputs.
    def emit_contributions(self, y: RecTensor):
        gy = self.grad_of[y]
        d = y.defn
        if isinstance(d, InputDef):
            return
        if isinstance(d, (UdfDef, SetSymbolDef)):
            return  # opaque and integer/bool ops block gradient flow
        if isinstance(d, MergeDef):
            for k, (cond, src) in enumerate(d.branches):
                target = src.defn.base if isinstance(src.defn, IndexDef) else src
                if target not in self.core:
                    continue
                masked = self.masked_grad(gy, d.branches, k)
                self.push(src, masked, y)
            return
        assert isinstance(d, OpDef)
        if d.kind in ("detach", "cmp", "where", "cast", "rng"):
            return  # gradient barriers
        rules = _VJP.get(d.kind)
        if rules is None:
            if any(x in self.active or (isinstance(x.defn, IndexDef) and x.defn.base in self.active)
                   for x in d.inputs):
                raise NonDifferentiableError(f"op {d.kind} has no gradient rule")
            return
        for slot, x in enumerate(d.inputs):
            target = x.defn.base if isinstance(x.defn, IndexDef) else x
            if target not in self.core:
                continue
            if isinstance(x.defn, IndexDef) and any(
                    c.kind == "slice" for c in se.components(x.defn.index)):
                if d.kind not in ("sum", "discounted_sum"):
                    raise NonDifferentiableError(
                        "slice views are only differentiable through sum/discounted_sum")
                self.contribs[target].append(self.slice_reduce_vjp(gy, y, x.defn))
                continue
            contrib = rules(self, gy, y, slot)
            if contrib is None:
                raise NonDifferentiableError(
                    f"input {slot} of {d.kind} is not differentiable here")
            contrib = self.guard_forward_reads(contrib, d)
            self.push(x, contrib, y)

    def guard_forward_reads(self, contrib: RecTensor, d: OpDef) -> RecTensor:
        """Zero a vjp expression wherever the consumer's shifted reads leave
        the source domain. The consumer was never evaluated at such points
        (its own read would have failed), so the incoming gradient is zero
        there and masking preserves the total; without the mask, the vjp's
        re-read of those forward values would fault."""
        conj = []
        for x in d.inputs:
            if not isinstance(x.defn, IndexDef):
                continue
            base = x.defn.base
            for c, dim in zip(se.components(x.defn.index), base.domain):
                if c.kind == "slice":
                    continue  # slice readers route through slice_reduce_vjp
                bound = sym(self.ctx.dim_bound[dim])
                for cond in (se.ge(c, se.cint(0)), se.lt(c, bound)):
                    cond = se.simplify(cond)
                    if cond is not se.TRUE:
                        conj.append(cond)
        if not conj:
            return contrib
        guard = se.simplify(se.and_(*conj)) if len(conj) > 1 else conj[0]
        if guard is se.TRUE:
            return contrib
        zero = self.ctx.constant(0.0, dtype=contrib.dtype, shape=contrib.shape)
        dom = self.ctx.canonical_domain(
            set(contrib.domain) | {s for s in se.free_symbols(guard) if s.kind == LOOP})
        m = self.ctx.recurrent(None, contrib.shape, contrib.dtype, dom)
        m.define([(guard, contrib), (None, zero)])
        return m

    def masked_grad(self, gy: RecTensor, branches, k: int) -> RecTensor:
        cond_k, _ = branches[k]
        zero = self.ctx.constant(0.0, dtype=gy.dtype, shape=gy.shape)
        outer = [(branches[j][0], zero) for j in range(k)]
        m = self.ctx.recurrent(None, gy.shape, gy.dtype, gy.domain)
        if cond_k is se.TRUE:
            m.define(outer + [(None, gy)])
        else:
            m.define(outer + [(cond_k, gy), (None, zero)])
        return m

    def push(self, use: RecTensor, contrib: RecTensor, consumer: RecTensor):
        """Route a contribution (over the consumer's domain, shaped like the
        use) back to the used tensor, inverting the view index if any."""
        if isinstance(use.defn, IndexDef):
            base = use.defn.base
            if base not in self.core:
                return
            contrib = self.reindex(contrib, use.defn, consumer)
            target = base
        else:
            target = use
            if target not in self.core:
                return
            contrib = self.reduce_absent_dims(contrib, target)
        self.contribs[target].append(contrib)

    def reduce_absent_dims(self, g: RecTensor, target: RecTensor) -> RecTensor:
        extra = [s for s in g.domain if s not in target.domain]
        if not extra:
            return g
        bounds = self.ctx.bounds_map()
        comps = []
        for s in g.domain:
            comps.append(se.slc(0, bounds[s]) if s in extra else sym(s))
        view = g[se.tup(*comps)]
        return self.ctx.sum(view, dims=tuple(range(len(extra))))

    def reindex(self, g: RecTensor, view: IndexDef, consumer: RecTensor) -> RecTensor:
        """g flows through a view x[idx]; produce a contribution over
        x's domain (summing slice axes, guarding shifted reads)."""
        base = view.base
        comps = se.components(view.index)
        sink_dims = tuple(s for s in self.ctx.dim_order
                          if any(s in se.free_symbols(c) for c in comps))
        bounds = self.ctx.bounds_map()
        inv = se.invert_dependence(view.index, sink_dims, base.domain, bounds)

        slice_slots = [j for j, c in enumerate(comps) if c.kind == "slice"]
        if slice_slots:
            raise NonDifferentiableError(
                "slice views are only differentiable through sum/discounted_sum")

        # Scalar components: g (over consumer domain) may use dims not in the
        # view; sum those out first, then read g at the inverted index.
        g = self.reduce_like(g, sink_dims)
        read_comps = []
        guards: list[SymExpr] = []
        for s, e in zip(sink_dims, inv.exprs):
            read_comps.append(e)
            if e != sym(s):
                guards.append(se.ge(e, 0))
                guards.append(se.lt(e, bounds[s]))
        if inv.condition is not None:
            guards.append(inv.condition)
        gview = g[se.tup(*read_comps)] if read_comps else g
        guard = se.simplify(se.and_(*guards)) if guards else se.TRUE
        if guard is se.TRUE:
            out = gview
        elif guard is se.FALSE:
            out = self.zeros_like_shape(g.shape, g.dtype)
        else:
            m = self.ctx.recurrent(None, gview.shape, gview.dtype,
                                   self.ctx.canonical_domain(set(base.domain) | set(gview.domain)))
            zero = self.ctx.constant(0.0, dtype=gview.dtype, shape=gview.shape)
            m.define([(guard, gview), (None, zero)])
            out = m
        return self.reduce_absent_dims(out, base)

    def reduce_like(self, g: RecTensor, keep: tuple[Symbol, ...]) -> RecTensor:
        extra = [s for s in g.domain if s not in keep]
        if not extra:
            return g
        bounds = self.ctx.bounds_map()
        comps = [se.slc(0, bounds[s]) if s in extra else sym(s) for s in g.domain]
        view = g[se.tup(*comps)]
        return self.ctx.sum(view, dims=tuple(range(len(extra))))

    def zeros_like_shape(self, shape, dtype) -> RecTensor:
        return self.ctx.constant(0.0, dtype=dtype, shape=shape)

    # Reduction-over-slice: consumer y = sum/dsum(view(x), axis k over the
    # slice axis). Contribution: opposite-direction reduction over the
    # inverted slice.
    def slice_reduce_vjp(self, gy: RecTensor, y: RecTensor, view: IndexDef) -> RecTensor:
        d: OpDef = y.defn
        base = view.base
        comps = se.components(view.index)
        slice_slots = [j for j, c in enumerate(comps) if c.kind == "slice"]
        if len(slice_slots) != 1:
            raise NonDifferentiableError("only single-slice reductions are differentiable")
        j = slice_slots[0]
        axis = 0  # single slice -> leading axis of the view
        if d.kind == "sum":
            if d.params["dims"] != (axis,):
                raise NonDifferentiableError("slice reduction must reduce exactly the slice axis")
        else:
            if d.params["dim"] != axis:
                raise NonDifferentiableError("slice reduction must reduce exactly the slice axis")

        sink_dims = tuple(s for s in self.ctx.dim_order
                          if any(s in se.free_symbols(c) for c in comps))
        bounds = self.ctx.bounds_map()
        inv = se.invert_dependence(view.index, sink_dims, base.domain, bounds)

        # For discounted_sum the element weight is gamma^(position in slice),
        # position = source coord - slice lo; a unit-slope lo makes the pulled
        # back kernel a reversed discounted sum. Verify the slope.
        if d.kind == "discounted_sum":
            lo = comps[j].args[0]
            s_dim, coef, _ = _split_lo(lo, sink_dims)
            if s_dim is None or coef != 1:
                raise NonDifferentiableError(
                    "discounted_sum over a slice needs a unit-slope lower endpoint")

        gy2 = self.reduce_like(gy, sink_dims)
        guards = [] if inv.condition is None else [inv.condition]
        gview = gy2[se.tup(*inv.exprs)]
        n_slices = sum(1 for e in inv.exprs if e.kind == "slice")
        if n_slices == 0:
            # every source element is read by at most one sink point (e.g. a
            # full-range sum, whose sink domain is empty)
            if d.kind != "sum":
                raise NonDifferentiableError(
                    "discounted_sum needs a ranged inverse to order its weights")
            out = gview
        elif n_slices == 1:
            if d.kind == "sum":
                out = self.ctx.sum(gview, dims=0)
            else:
                out = self.ctx.discounted_sum(gview, d.params["gamma"], dim=0, reverse=True)
        else:
            raise NonDifferentiableError("inverted slice is not a single range")
        if guards:
            guard = se.simplify(se.and_(*guards))
            if guard is not se.TRUE:
                zero = self.ctx.constant(0.0, dtype=out.dtype, shape=out.shape)
                m = self.ctx.recurrent(None, out.shape, out.dtype, out.domain)
                m.define([(guard, out), (None, zero)])
                out = m
        return self.reduce_absent_dims(out, base)


def _split_lo(lo: SymExpr, sink_dims):
    try:
        from .symexpr import _split_affine
        return _split_affine(lo, sink_dims)
    except se.InversionError:
        return None, 0, lo


def _unbroadcast(gb: _GradBuilder, g: RecTensor, like: RecTensor) -> RecTensor:
    """Sum g down to like's concrete shape (inverse of broadcasting)."""
    gs, ls = g.shape, like.shape
    if gs == ls:
        return g
    extra = len(gs) - len(ls)
    dims = list(range(extra))
    for k, d in enumerate(ls):
        if d == 1 and gs[extra + k] != 1:
            dims.append(extra + k)
    out = gb.ctx.sum(g, dims=tuple(dims)) if dims else g
    if out.shape != ls:
        out = gb.ctx.reshape(out, ls)
    return out


def _vjp_add(gb, gy, y, slot):
    return _unbroadcast(gb, gy, y.defn.inputs[slot])


def _vjp_sub(gb, gy, y, slot):
    g = gy if slot == 0 else -gy
    return _unbroadcast(gb, g, y.defn.inputs[slot])


def _vjp_mul(gb, gy, y, slot):
    other = y.defn.inputs[1 - slot]
    return _unbroadcast(gb, gy * other, y.defn.inputs[slot])


def _vjp_div(gb, gy, y, slot):
    a, b = y.defn.inputs
    if slot == 0:
        return _unbroadcast(gb, gy / b, a)
    return _unbroadcast(gb, -(gy * a) / (b * b), b)


def _vjp_neg(gb, gy, y, slot):
    return -gy


def _vjp_exp(gb, gy, y, slot):
    return gy * y


def _vjp_log(gb, gy, y, slot):
    return gy / y.defn.inputs[0]


def _vjp_sqrt(gb, gy, y, slot):
    return gy / (y * 2.0)


def _vjp_tanh(gb, gy, y, slot):
    one = gb.ctx.constant(1.0, dtype=y.dtype)
    return gy * (one - y * y)


def _vjp_pow_const(gb, gy, y, slot):
    x = y.defn.inputs[0]
    c = y.defn.params["exponent"]
    return gy * (x ** (c - 1.0)) * c


def _vjp_matmul(gb, gy, y, slot):
    a, b = y.defn.inputs
    sa, sb = a.shape, b.shape
    if len(sa) == 1 and len(sb) == 2:
        # (n,) @ (n,m) -> (m,):  da = gy @ b^T ; db = outer(a, gy)
        if slot == 0:
            return gb.ctx.matmul(gy, gb.ctx.permute(b, (1, 0)))
        return gb.ctx.matmul(gb.ctx.unsqueeze(a, 1), gb.ctx.unsqueeze(gy, 0))
    if len(sa) == 2 and len(sb) == 2:
        if slot == 0:
            return gb.ctx.matmul(gy, gb.ctx.permute(b, (1, 0)))
        return gb.ctx.matmul(gb.ctx.permute(a, (1, 0)), gy)
    if len(sa) == 2 and len(sb) == 1:
        # (m,n) @ (n,) -> (m,):  da = outer(gy, b) ; db = a^T @ gy
        if slot == 0:
            return gb.ctx.matmul(gb.ctx.unsqueeze(gy, 1), gb.ctx.unsqueeze(b, 0))
        return gb.ctx.matmul(gb.ctx.permute(a, (1, 0)), gy)
    raise NonDifferentiableError(f"matmul gradient for shapes {sa} @ {sb} not supported")


def _vjp_sum(gb, gy, y, slot):
    x = y.defn.inputs[0]
    dims = y.defn.params["dims"]
    g = gy
    for d in dims:
        g = gb.ctx.unsqueeze(g, d)
    if any(not isinstance(s, int) for s in x.shape):
        raise NonDifferentiableError("sum gradient over symbolic extents")
    return gb.ctx.expand(g, x.shape)


def _vjp_cumsum(gb, gy, y, slot):
    p = y.defn.params
    return gb.ctx.cumsum(gy, dim=p["dim"], reverse=not p["reverse"])


def _vjp_discounted_sum(gb, gy, y, slot):
    raise NonDifferentiableError(
        "discounted_sum gradient is only defined through slice views")


def _vjp_expand(gb, gy, y, slot):
    return _unbroadcast(gb, gy, y.defn.inputs[0])


def _vjp_reshape(gb, gy, y, slot):
    return gb.ctx.reshape(gy, y.defn.inputs[0].shape)


def _vjp_permute(gb, gy, y, slot):
    order = y.defn.params["order"]
    inverse = tuple(order.index(k) for k in range(len(order)))
    return gb.ctx.permute(gy, inverse)


def _vjp_squeeze(gb, gy, y, slot):
    return gb.ctx.unsqueeze(gy, y.defn.params["dim"])


def _vjp_unsqueeze(gb, gy, y, slot):
    return gb.ctx.squeeze(gy, y.defn.params["dim"])


def _vjp_identity(gb, gy, y, slot):
    return gy


_VJP = {
    "add": _vjp_add, "sub": _vjp_sub, "mul": _vjp_mul, "div": _vjp_div,
    "neg": _vjp_neg, "exp": _vjp_exp, "log": _vjp_log, "tanh": _vjp_tanh,
    "sqrt": _vjp_sqrt, "pow_const": _vjp_pow_const, "matmul": _vjp_matmul,
    "sum": _vjp_sum, "cumsum": _vjp_cumsum, "discounted_sum": _vjp_discounted_sum,
    "expand": _vjp_expand, "reshape": _vjp_reshape, "permute": _vjp_permute,
    "squeeze": _vjp_squeeze, "unsqueeze": _vjp_unsqueeze, "identity": _vjp_identity,
}


def _backward(ctx: Context, loss: RecTensor, wrt: list[RecTensor]) -> dict[RecTensor, RecTensor]:
    return _GradBuilder(ctx, loss, wrt).run()
