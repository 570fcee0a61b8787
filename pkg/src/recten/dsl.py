"""Text format for recurrent-tensor programs, plus a JSON mirror.

A program is a flat statement list; both surfaces (the .rtl text and the
JSON form) carry the same statements, and one lowering path turns them into
a frontend Context. Definition right-hand sides stay raw text until
lowering, which keeps the mirror trivial and the grammar in one place.

    dims b:B, t:T;
    bounds B=4, T=dyn(done);
    udf step(f64[4], f64[2]) -> f64[4];
    input obs[b,t] : f32[16];
    rng eps[b,t] : f64[2];
    const lr = 0.01;
    rec x[b,t] : f64[4];
    x[b,0] = reset();
    x[b,t+1] = step(x[b,t], eps[b,t]);
    g[t] = dsum(r[t:T], 0.95);
    out g;
    grad l wrt w into gw;

An equation's left side picks the branch: a bare dim is unconstrained, a
constant pins it (t == c), and t+c shifts the whole right side by -c under
the condition t >= c.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import symexpr as se
from .frontend import Context, FrontendError, RecTensor


class DslError(Exception):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


# ---------------------------------------------------------------------------
# statements


@dataclass
class Stmt:
    kind: str
    payload: dict
    line: int = 0

    def to_json(self):
        return {"kind": self.kind, **self.payload}


@dataclass
class Program:
    stmts: list[Stmt] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"program": [s.to_json() for s in self.stmts]}, indent=2)

    @staticmethod
    def from_json(text: str) -> "Program":
        data = json.loads(text)
        out = Program()
        for item in data["program"]:
            item = dict(item)
            kind = item.pop("kind")
            out.stmts.append(Stmt(kind, item))
        return out


# ---------------------------------------------------------------------------
# parsing (.rtl -> statements)

_SIG_RE = re.compile(r"\s*(f64|f32|i64|bool)\s*\[([0-9,\s]*)\]\s*$")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


def _strip_comment(line: str) -> str:
    cut = line.find("#")
    return line if cut < 0 else line[:cut]


def _split_statements(text: str):
    """Yield (stmt_text, line_number); statements end in ';'."""
    buf = []
    start = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if line.strip() and start is None:
            start = ln
        buf.append(line)
        while ";" in line:
            pos = line.index(";")
            buf[-1] = line[:pos]
            stmt = " ".join(x.strip() for x in buf if x.strip())
            if stmt:
                yield stmt, start or ln
            line = line[pos + 1:]
            buf = [line]
            start = ln if line.strip() else None
    leftover = " ".join(x.strip() for x in buf if x.strip())
    if leftover:
        raise DslError(f"unterminated statement {leftover!r}", start)


def _parse_sig(text: str, ln: int):
    m = _SIG_RE.match(text)
    if not m:
        raise DslError(f"bad type signature {text!r}", ln)
    shape = tuple(int(x) for x in m.group(2).replace(" ", "").split(",") if x)
    return m.group(1), shape


def _parse_name_dims(text: str, ln: int):
    """'x[b,t]' -> ('x', ['b','t']); bare 'x' -> ('x', [])."""
    text = text.strip()
    if "[" in text:
        if not text.endswith("]"):
            raise DslError(f"bad declarator {text!r}", ln)
        name, inner = text[:-1].split("[", 1)
        dims = [d.strip() for d in inner.split(",") if d.strip()]
    else:
        name, dims = text, []
    if not _NAME_RE.match(name.strip()):
        raise DslError(f"bad name {name!r}", ln)
    return name.strip(), dims


def _split_top(text: str, sep: str):
    """Split on sep at bracket depth 0."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


_ASSIGN_RE = re.compile(r"(?<![=<>!])=(?!=)")


def _find_assign(text: str, ln: int) -> int:
    depth = 0
    for m in _ASSIGN_RE.finditer(text):
        depth = 0
        for ch in text[:m.start()]:
            if ch in "([":
                depth += 1
            elif ch in ")]":
                depth -= 1
        if depth == 0:
            return m.start()
    raise DslError("expected '=' in definition", ln)


def parse_rtl(text: str) -> Program:
    prog = Program()
    for stmt, ln in _split_statements(text):
        head = stmt.split(None, 1)[0]
        rest = stmt[len(head):].strip()
        if head == "dims":
            pairs = []
            for part in rest.split(","):
                if ":" not in part:
                    raise DslError(f"dims wants d:Bound, got {part!r}", ln)
                d, b = (x.strip() for x in part.split(":", 1))
                pairs.append([d, b])
            prog.stmts.append(Stmt("dims", {"pairs": pairs}, ln))
        elif head == "bounds":
            entries = []
            for part in rest.split(","):
                if "=" not in part:
                    raise DslError(f"bounds wants B=value, got {part!r}", ln)
                name, val = (x.strip() for x in part.split("=", 1))
                if val.startswith("dyn"):
                    driver = val[3:].strip()
                    if not (driver.startswith("(") and driver.endswith(")")):
                        raise DslError(f"dyn wants a driver name, got {val!r}", ln)
                    entries.append([name, {"dyn": driver[1:-1].strip()}])
                else:
                    entries.append([name, int(val)])
            prog.stmts.append(Stmt("bounds", {"entries": entries}, ln))
        elif head == "udf":
            m = re.match(r"(\w+)\s*\((.*)\)\s*->\s*(.*)$", rest)
            if not m:
                raise DslError(f"bad udf declaration {rest!r}", ln)
            ins = [[dt, list(shp)] for dt, shp in
                   (_parse_sig(p, ln) for p in _split_top(m.group(2), ",") if p.strip())]
            outs = [[dt, list(shp)] for dt, shp in
                    (_parse_sig(p, ln) for p in _split_top(m.group(3), ",") if p.strip())]
            if not outs:
                raise DslError("udf needs at least one output", ln)
            prog.stmts.append(Stmt("udf", {"name": m.group(1), "ins": ins, "outs": outs}, ln))
        elif head in ("input", "rng", "rec"):
            if ":" not in rest:
                raise DslError(f"{head} wants name[dims] : type", ln)
            decl, sig = rest.split(":", 1)
            name, dims = _parse_name_dims(decl, ln)
            dist = None
            if head == "rng":
                words = sig.split()
                if words and words[-1] in ("normal", "uniform"):
                    dist = words[-1]
                    sig = " ".join(words[:-1])
            dtype, shape = _parse_sig(sig, ln)
            payload = {"name": name, "dims": dims, "dtype": dtype, "shape": list(shape)}
            if head == "rng":
                payload["dist"] = dist or "normal"
            prog.stmts.append(Stmt(head, payload, ln))
        elif head == "const":
            pos = _find_assign(rest, ln)
            decl, val = rest[:pos].strip(), rest[pos + 1:].strip()
            if ":" in decl:
                name, sig = (x.strip() for x in decl.split(":", 1))
                dtype, shape = _parse_sig(sig, ln)
            else:
                name, dtype, shape = decl, "f64", ()
            prog.stmts.append(Stmt("const", {"name": name, "dtype": dtype,
                                             "shape": list(shape), "value": float(val)}, ln))
        elif head == "out":
            words = rest.split()
            if len(words) == 1:
                prog.stmts.append(Stmt("out", {"name": words[0], "as": words[0]}, ln))
            elif len(words) == 3 and words[1] == "as":
                prog.stmts.append(Stmt("out", {"name": words[0], "as": words[2]}, ln))
            else:
                raise DslError(f"out wants 'out name [as alias]', got {rest!r}", ln)
        elif head == "grad":
            m = re.match(r"(\w+)\s+wrt\s+(\w+)(?:\s+into\s+(\w+))?$", rest)
            if not m:
                raise DslError(f"grad wants 'loss wrt param [into target]', got {rest!r}", ln)
            prog.stmts.append(Stmt("grad", {"loss": m.group(1), "wrt": m.group(2),
                                            "into": m.group(3)}, ln))
        else:
            # an equation: lhs = rhs [if cond]
            pos = _find_assign(stmt, ln)
            lhs, rhs = stmt[:pos].strip(), stmt[pos + 1:].strip()
            cond = None
            m = re.search(r"\bif\b", rhs)
            if m:
                depth = 0
                for k, ch in enumerate(rhs):
                    if ch in "([":
                        depth += 1
                    elif ch in ")]":
                        depth -= 1
                    elif rhs[k:k + 2] == "if" and depth == 0 and \
                            (k == 0 or not rhs[k - 1].isalnum()) and \
                            not (rhs[k + 2:k + 3].isalnum() or rhs[k + 2:k + 3] == "_"):
                        cond = rhs[k + 2:].strip()
                        rhs = rhs[:k].strip()
                        break
            if "[" in lhs:
                if not lhs.endswith("]"):
                    raise DslError(f"bad left side {lhs!r}", ln)
                name = lhs[:lhs.index("[")].strip()
                pattern = [p.strip() for p in
                           _split_top(lhs[lhs.index("[") + 1:-1], ",")]
            else:
                name, pattern = lhs, []
            if not _NAME_RE.match(name):
                raise DslError(f"bad left side {lhs!r}", ln)
            prog.stmts.append(Stmt("def", {"name": name, "pattern": pattern,
                                           "rhs": rhs, "cond": cond}, ln))
    return prog


# ---------------------------------------------------------------------------
# synthetic user functions
#
# .rtl files carry signatures only; bodies are generated: bounded,
# deterministic in (inputs, rng), distinct per function name.


def make_udf_fn(name: str, out_shapes, out_dtypes):
    salt = zlib.crc32(name.encode()) % 997 / 997.0

    def fn(inputs, rng):
        base = salt
        for x in inputs:
            x = np.asarray(x, np.float64)
            base = base + float(x.mean()) if x.size else base
        outs = []
        for shp, dt in zip(out_shapes, out_dtypes):
            noise = rng.standard_normal(shp)
            if dt == "bool":
                outs.append(np.tanh(base) + noise > 0.8)
            elif dt == "i64":
                outs.append(np.asarray(np.floor(3 * np.tanh(base + noise)), np.int64))
            else:
                outs.append(np.asarray(np.tanh(base + 0.3 * noise), dt == "f32" and np.float32 or np.float64))
        return tuple(outs)

    return fn


# ---------------------------------------------------------------------------
# expression lowering


_TOKEN_RE = re.compile(r"""
    (?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+|\d+)
  | (?P<name>[A-Za-z_]\w*)
  | (?P<op>\*\*|==|!=|<=|>=|@|[-+*/(),<>%])
  | (?P<ws>\s+)
""", re.VERBOSE)


def _tokenize_expr(text: str, ln: int):
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            if text[pos] == "[":
                depth, k = 1, pos + 1
                while k < len(text) and depth:
                    if text[k] == "[":
                        depth += 1
                    elif text[k] == "]":
                        depth -= 1
                    k += 1
                if depth:
                    raise DslError(f"unbalanced '[' in {text!r}", ln)
                out.append(("index", text[pos + 1:k - 1]))
                pos = k
                continue
            raise DslError(f"bad character {text[pos]!r} in {text!r}", ln)
        pos = m.end()
        if m.lastgroup == "ws":
            continue
        out.append((m.lastgroup, m.group()))
    out.append(("end", ""))
    return out


UNARY_FNS = {"exp", "log", "tanh", "sqrt", "detach"}
CMP_FNS = {"eq", "ne", "lt", "le", "gt", "ge"}


class _ExprParser:
    """Right-hand sides: +,-,*,/,@,** with calls, refs and bracket indexes."""

    def __init__(self, lo: "_Lowering", text: str, ln: int, shift):
        self.lo = lo
        self.toks = _tokenize_expr(text, ln)
        self.ln = ln
        self.k = 0
        self.shift = shift  # dim substitution from a shifted left side

    def peek(self):
        return self.toks[self.k]

    def next(self):
        t = self.toks[self.k]
        self.k += 1
        return t

    def expect(self, val):
        t = self.next()
        if t[1] != val:
            raise DslError(f"expected {val!r}, found {t[1]!r}", self.ln)

    def parse(self) -> RecTensor:
        e = self.addsub()
        if self.peek()[0] != "end":
            raise DslError(f"trailing input near {self.peek()[1]!r}", self.ln)
        return e

    def addsub(self):
        e = self.muldiv()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            rhs = self.muldiv()
            e = e + rhs if op == "+" else e - rhs
        return e

    def muldiv(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/", "@"):
            op = self.next()[1]
            rhs = self.unary()
            e = {"*": lambda a, b: a * b, "/": lambda a, b: a / b,
                 "@": lambda a, b: a @ b}[op](e, rhs)
        return e

    def unary(self):
        if self.peek()[1] == "-":
            self.next()
            return -self.unary()
        return self.power()

    def power(self):
        e = self.atom()
        if self.peek()[1] == "**":
            self.next()
            t = self.next()
            if t[0] != "num":
                raise DslError("** wants a numeric literal exponent", self.ln)
            return e ** float(t[1])
        return e

    def atom(self):
        kind, val = self.next()
        if kind == "num":
            return self.lo.ctx.constant(float(val))
        if val == "(":
            e = self.addsub()
            self.expect(")")
            return e
        if kind != "name":
            raise DslError(f"unexpected {val!r}", self.ln)
        if self.peek()[1] == "(":
            return self.call(val)
        return self.ref(val)

    def ref(self, name):
        x = self.lo.tensor(name, self.ln)
        if self.peek()[0] == "index":
            raw = self.next()[1]
            idx = self.lo.parse_index(raw, self.ln, self.shift)
            comps = se.components(idx)
            if len(comps) == len(x.domain) and all(
                    c.kind == "sym" and c.value == d for c, d in zip(comps, x.domain)):
                return x  # identity index
            return x.index(idx)
        return x

    def call(self, fname):
        self.expect("(")
        if fname == "flag":
            raw = self.capture_args_raw()
            cond = self.lo.parse_cond(raw, self.ln, self.shift)
            return self.lo.flag(cond)
        args, nums = [], []
        while self.peek()[1] != ")":
            if self.peek()[0] == "num" and self.toks[self.k + 1][1] in (",", ")"):
                nums.append((len(args) + len(nums), float(self.next()[1])))
            else:
                args.append(self.addsub())
            if self.peek()[1] == ",":
                self.next()
        self.expect(")")
        return self.lo.apply(fname, args, nums, self.ln)

    def capture_args_raw(self):
        depth, parts = 1, []
        while depth:
            t = self.next()
            if t[0] == "end":
                raise DslError("unterminated call", self.ln)
            if t[1] == "(":
                depth += 1
            elif t[1] == ")":
                depth -= 1
                if not depth:
                    break
            parts.append(t[1] if t[0] != "index" else f"[{t[1]}]")
        return " ".join(parts)


# ---------------------------------------------------------------------------
# program lowering


class _Lowering:
    def __init__(self):
        self.ctx = Context()
        self.names: dict[str, RecTensor] = {}
        self.pending: dict[str, list] = {}  # rec name -> [(cond, tensor)]
        self.grad_targets: set[str] = set()
        self.dyn_drivers: list[tuple[str, str, int]] = []  # bound, driver, line
        self.outputs: list[tuple[str, str]] = []

    # -- name plumbing ------------------------------------------------------

    def tensor(self, name: str, ln: int) -> RecTensor:
        t = self.names.get(name)
        if t is None:
            raise DslError(f"unknown tensor {name!r}", ln)
        return t

    def register(self, name: str, t: RecTensor, ln: int):
        if name in self.names:
            raise DslError(f"{name!r} is already defined", ln)
        self.names[name] = t

    def rename(self, t: RecTensor, name: str):
        t.ctx._names.discard(t.name)
        t.name = name
        t.ctx._names.add(name)

    def dims_of(self, names, ln) -> tuple:
        out = []
        for nm in names:
            d = None
            for cand in self.ctx.dim_order:
                if cand.name == nm:
                    d = cand
            if d is None:
                raise DslError(f"unknown dim {nm!r}", ln)
            out.append(d)
        return tuple(out)

    def parse_index(self, raw: str, ln: int, shift):
        try:
            e = se.parse(raw, self.ctx.resolve_symbol)
        except se.SymExprError as exc:
            raise DslError(f"bad index {raw!r}: {exc}", ln)
        return se.substitute(e, shift) if shift else e

    def parse_cond(self, raw: str, ln: int, shift=None):
        try:
            e = se.parse(raw, self.ctx.resolve_symbol)
        except se.SymExprError as exc:
            raise DslError(f"bad condition {raw!r}: {exc}", ln)
        return se.substitute(e, shift) if shift else e

    def flag(self, cond) -> RecTensor:
        dims = self.ctx.canonical_domain(
            s for s in se.free_symbols(cond) if s.kind == se.LOOP)
        tv = self.ctx.constant(True, dtype="bool")
        fv = self.ctx.constant(False, dtype="bool")
        m = self.ctx.recurrent(None, (), "bool", dims)
        m.define([(cond, tv), (None, fv)])
        return m

    # -- function application -------------------------------------------------

    def apply(self, fname, args, nums, ln) -> RecTensor:
        nums_only = [v for _, v in nums]
        try:
            if fname in UNARY_FNS:
                (x,) = args
                return self.ctx.detach(x) if fname == "detach" else self.ctx.op(fname, [x])
            if fname in CMP_FNS:
                if len(args) == 2:
                    return self.ctx.cmp(fname, args[0], args[1])
                (x,) = args
                return self.ctx.cmp(fname, x, self.ctx.constant(nums_only[0], dtype=x.dtype))
            if fname == "where":
                return self.ctx.where(*args)
            if fname == "sum":
                (x,) = args
                return self.ctx.sum(x, tuple(int(v) for v in nums_only) or (0,))
            if fname == "mean":
                (x,) = args
                return self.ctx.mean(x, tuple(int(v) for v in nums_only) or (0,))
            if fname == "cumsum":
                (x,) = args
                return self.ctx.cumsum(x, int(nums_only[0]) if nums_only else 0)
            if fname == "dsum":
                (x,) = args
                return self.ctx.discounted_sum(x, nums_only[0],
                                               dim=int(nums_only[1]) if len(nums_only) > 1 else 0)
            if fname == "matmul":
                return self.ctx.matmul(*args)
            if fname in ("expand", "reshape"):
                (x,) = args
                return getattr(self.ctx, fname)(x, tuple(int(v) for v in nums_only))
            if fname == "permute":
                (x,) = args
                return self.ctx.permute(x, tuple(int(v) for v in nums_only))
            if fname in ("squeeze", "unsqueeze"):
                (x,) = args
                return getattr(self.ctx, fname)(x, int(nums_only[0]))
            if fname == "sumall":
                (x,) = args
                return self.sumall(x)
            if fname in self.ctx.udfs:
                outs = self.ctx.udf(fname, args)
                return outs[0]
        except (FrontendError, IndexError, ValueError) as exc:
            raise DslError(f"in {fname}(...): {exc}", ln)
        raise DslError(f"unknown function {fname!r}", ln)

    def sumall(self, x: RecTensor) -> RecTensor:
        """Reduce a tensor over its whole domain and payload to a scalar."""
        if x.domain:
            full = se.tup(*(se.slc(se.cint(0), se.sym(self.ctx.dim_bound[d]))
                            for d in x.domain))
            x = x.index(full)
        if x.shape:
            x = self.ctx.sum(x, tuple(range(len(x.shape))))
        return x

    # -- statements -----------------------------------------------------------

    def run(self, prog: Program) -> Context:
        for s in prog.stmts:
            getattr(self, f"st_{s.kind}", self.st_unknown)(s)
        self.finalize_pending(None)
        for bound_name, driver, ln in self.dyn_drivers:
            b = self.ctx.resolve_symbol(bound_name)
            dims = [d for d in self.ctx.dim_order if self.ctx.dim_bound[d] == b]
            if len(dims) != 1:
                raise DslError(f"dyn bound {bound_name} must govern exactly one dim", ln)
            self.ctx.set_symbol(b, dims[0], self.tensor(driver, ln))
        for name, alias in self.outputs:
            self.ctx.mark_output(self.tensor(name, 0), alias)
        return self.ctx

    def st_unknown(self, s: Stmt):
        raise DslError(f"unknown statement kind {s.kind!r}", s.line)

    def st_dims(self, s: Stmt):
        for d, b in s.payload["pairs"]:
            self.ctx.declare_dim(d, b)

    def st_bounds(self, s: Stmt):
        for name, val in s.payload["entries"]:
            b = self.ctx.resolve_symbol(name)
            if isinstance(val, dict):
                self.ctx.bind(b, "dyn")
                self.dyn_drivers.append((name, val["dyn"], s.line))
            else:
                self.ctx.bind(b, int(val))

    def st_udf(self, s: Stmt):
        p = s.payload
        outs = [tuple(o) for o in p["outs"]]
        shapes = [tuple(shp) for _, shp in outs]
        dtypes = [dt for dt, _ in outs]
        self.ctx.register_udf(p["name"], make_udf_fn(p["name"], shapes, dtypes),
                              shapes, dtypes)

    def st_input(self, s: Stmt):
        p = s.payload
        t = self.ctx.input(p["name"], tuple(p["shape"]), p["dtype"],
                           self.dims_of(p["dims"], s.line))
        self.register(p["name"], t, s.line)

    def st_rng(self, s: Stmt):
        p = s.payload
        t = self.ctx.rng(p["name"], tuple(p["shape"]), p["dtype"],
                         self.dims_of(p["dims"], s.line), p.get("dist", "normal"))
        self.register(p["name"], t, s.line)

    def st_const(self, s: Stmt):
        p = s.payload
        t = self.ctx.constant(p["value"], p["dtype"], tuple(p["shape"]), p["name"])
        self.register(p["name"], t, s.line)

    def st_rec(self, s: Stmt):
        p = s.payload
        t = self.ctx.recurrent(p["name"], tuple(p["shape"]), p["dtype"],
                               self.dims_of(p["dims"], s.line))
        self.register(p["name"], t, s.line)
        self.pending[p["name"]] = []

    def st_def(self, s: Stmt):
        p = s.payload
        name, ln = p["name"], s.line
        conds, shift = self.lhs_pattern(name, p["pattern"], ln)
        if p.get("cond"):
            conds.append(self.parse_cond(p["cond"], ln, shift))
        rhs = _ExprParser(self, p["rhs"], ln, shift).parse()
        if name in self.pending:
            cond = None
            if conds:
                cond = conds[0] if len(conds) == 1 else se.and_(*conds)
                cond = se.simplify(cond)
            self.pending[name].append((cond, rhs, ln))
            return
        if conds:
            raise DslError(f"{name!r} is not declared rec; conditions need rec", ln)
        if name in self.names:
            raise DslError(f"{name!r} is already defined", ln)
        if re.fullmatch(r"v\d+", rhs.name):
            self.rename(rhs, name)
            self.names[name] = rhs
        else:
            # a bare alias of an existing named tensor: wrap so both names work
            self.names[name] = self.ctx.op("identity", [rhs], name=name)

    def lhs_pattern(self, name, pattern, ln):
        """Branch condition and dim shift from the left-hand side."""
        conds, shift = [], {}
        if not pattern:
            return conds, shift
        target = self.names.get(name)
        if target is None or name not in self.pending:
            # pattern on a plain definition just documents the dims
            self.dims_of([p for p in pattern if _NAME_RE.match(p)], ln)
            return conds, shift
        if len(pattern) != len(target.domain):
            raise DslError(f"{name} has {len(target.domain)} dims", ln)
        for raw, d in zip(pattern, target.domain):
            e = self.parse_index(raw, ln, None)
            if e.kind == "sym" and e.value == d:
                continue
            if e.kind == "sym" and e.value.kind == se.LOOP:
                raise DslError(
                    f"left-side dims of {name} must appear in declared order", ln)
            aff = se.as_affine(e)
            if aff is not None and not any(s.kind == se.LOOP for s in aff[0]):
                conds.append(se.simplify(se.eq(se.sym(d), e)))
                continue
            if aff is not None and aff[0].get(d) == 1 and \
                    all(s == d or s.kind != se.LOOP for s in aff[0]):
                c = aff[1]
                if c > 0:
                    conds.append(se.simplify(se.ge(se.sym(d), se.cint(c))))
                elif c < 0:
                    bound = se.sym(self.ctx.dim_bound[d])
                    conds.append(se.simplify(
                        se.lt(se.sym(d), se.add(bound, se.cint(c)))))
                if c:
                    shift[d] = se.simplify(se.sub(se.sym(d), se.cint(c)))
                continue
            raise DslError(f"unsupported left-side index {raw!r}", ln)
        return conds, shift

    def st_out(self, s: Stmt):
        self.finalize_pending(s.line)
        self.outputs.append((s.payload["name"], s.payload["as"]))

    def st_grad(self, s: Stmt):
        p = s.payload
        self.finalize_pending(s.line)
        loss = self.tensor(p["loss"], s.line)
        wrt = self.tensor(p["wrt"], s.line)
        try:
            grads = self.ctx.backward(loss, [wrt])
        except FrontendError as exc:
            raise DslError(f"grad {p['loss']} wrt {p['wrt']}: {exc}", s.line)
        g = grads[wrt]
        if p.get("into"):
            tgt = self.tensor(p["into"], s.line)
            if tgt.defn is not None:
                raise DslError(f"grad target {p['into']} is already defined", s.line)
            if (tgt.domain, tgt.shape, tgt.dtype) != (g.domain, g.shape, g.dtype):
                raise DslError(
                    f"grad target {p['into']} is "
                    f"{tgt.dtype}{list(tgt.shape)} over {[d.name for d in tgt.domain]}, "
                    f"gradient is {g.dtype}{list(g.shape)} over {[d.name for d in g.domain]}",
                    s.line)
            tgt.define([(None, g)])
            self.grad_targets.add(p["into"])
            self.pending.pop(p["into"], None)
        else:
            self.outputs.append((g.name, f"grad_{p['wrt']}"))
            self.names[g.name] = g

    def finalize_pending(self, ln):
        """Complete every rec whose branches have accumulated. Runs before
        grads/outs and at end of program; untouched grad targets survive."""
        for name, branches in list(self.pending.items()):
            if not branches:
                continue
            t = self.names[name]
            try:
                t.define([(c, v) for c, v, _ in branches])
            except FrontendError as exc:
                raise DslError(f"defining {name}: {exc}", branches[-1][2])
            del self.pending[name]


def lower(prog: Program) -> Context:
    return _Lowering().run(prog)


def load_text(text: str) -> Context:
    return lower(parse_rtl(text))


def load_path(path: str) -> Context:
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json"):
        return lower(Program.from_json(text))
    return load_text(text)
