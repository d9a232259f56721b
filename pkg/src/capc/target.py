"""The capability target machine: data access only through capabilities,
ddc/stc registers banked per module, an abstract pcc and a trusted stack."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, NamedTuple, Optional, Tuple

from . import core
from .core import Capability, Fault, DATA, expect_cap, expect_int
from .sexp import ParseError, expect_list, expect_num, expect_sym, fail, read_all
from .syntax import (
    DEFAULT_NABLA, NEXT, STUCK, TERMINAL, Step, Layout, NoMain,
    IntLit, BinOp, Deref, Start, End, Offset, CapType, LimRange,
    Assign, Alloc, Call, Return, JumpIfZero, Exit,
    apply_binop, apply_getter, parse_cmd, print_cmd, parse_common_expr,
    print_common_expr, parse_part, print_part, parse_size, place_modules,
)
from .source import alloc_block, run, top_frame_size


class PccMentioned(Exception):
    pass


class ImageError(Exception):
    pass


@dataclass(frozen=True)
class GetDdc:
    pass


@dataclass(frozen=True)
class GetStc:
    pass


@dataclass(frozen=True)
class GetPcc:
    pass


@dataclass(frozen=True)
class Inc:
    cap: object
    delta: object


@dataclass(frozen=True)
class TFunction:
    fid: str
    params: Tuple[int, ...] = ()  # frame offsets of the parameters
    frame: int = 0
    body: Tuple = ()


@dataclass(frozen=True)
class TModule:
    mid: str
    functions: Tuple[TFunction, ...] = ()


@dataclass(frozen=True)
class TProgram:
    modules: Tuple[TModule, ...] = ()
    data: Tuple[Tuple[str, int, int], ...] = ()   # (mid, base, end)
    stack: Tuple[Tuple[str, int, int], ...] = ()
    part: Optional[FrozenSet[str]] = None

    def functions(self):
        for m in self.modules:
            for f in m.functions:
                yield m.mid, f

    def mids(self):
        return [m.mid for m in self.modules]

    def layout(self, nabla=DEFAULT_NABLA) -> Layout:
        return Layout({}, {m: (b, e) for m, b, e in self.data},
                      {m: (b, e) for m, b, e in self.stack}, nabla)


def image_from_layout(modules, lay: Layout, part=None) -> TProgram:
    data = tuple((m.mid, *lay.data[m.mid]) for m in modules)
    stack = tuple((m.mid, *lay.stack[m.mid]) for m in modules)
    return TProgram(tuple(modules), data, stack, part)


# -- parsing and printing ----------------------------------------------------

def parse_expr(node):
    e = parse_common_expr(node, parse_expr)
    if e is not None:
        return e
    if isinstance(node, str):
        fail(node, f"target code has no variables ({node})")
    expect_list(node, what="an expression")
    if not node:
        fail(node, "empty expression")
    head, args = node[0], node[1:]
    nullary = {"getddc": GetDdc, "getstc": GetStc, "getpcc": GetPcc}
    if head in nullary:
        if args:
            fail(node, f"{head} takes no operands")
        return nullary[head]()
    if head == "inc":
        if len(args) != 2:
            fail(node, "inc takes 2 operands")
        return Inc(parse_expr(args[0]), parse_expr(args[1]))
    fail(node, f"unknown expression form {head!r}")


def _parse_fun(node):
    expect_list(node, "fun")
    if len(node) < 2:
        fail(node, "fun needs a function id")
    fid = expect_sym(node[1], "function id")
    params, frame, body = (), None, None
    for item in node[2:]:
        expect_list(item, what="params, frame or body")
        head = item[0] if item else None
        if head == "params":
            params = tuple(parse_size(x, "parameter offset") for x in item[1:])
        elif head == "frame":
            if len(item) != 2:
                fail(item, "frame takes a size")
            frame = parse_size(item[1], "frame size")
        elif head == "body":
            body = tuple(parse_cmd(c, parse_expr) for c in item[1:])
        else:
            fail(item, "expected params, frame or body")
    if body is None:
        fail(node, f"function {fid} has no body")
    if frame is None:
        frame = max(params) + 1 if params else 0
    for off in params:
        if off >= frame:
            fail(node, f"parameter offset {off} outside frame of size {frame}")
    return TFunction(fid, params, frame, body)


def _parse_layout(node):
    data, stack = [], []
    for m in node[1:]:
        expect_list(m, "module")
        if len(m) != 4:
            fail(m, "layout entry is (module <mid> (data b e) (stack b e))")
        mid = expect_sym(m[1], "module id")
        for item, out, head in ((m[2], data, "data"), (m[3], stack, "stack")):
            expect_list(item, head)
            if len(item) != 3:
                fail(item, f"({head} base end)")
            b, e = expect_num(item[1]), expect_num(item[2])
            if e < b:
                fail(item, "region end precedes its base")
            out.append((mid, b, e))
    return tuple(data), tuple(stack)


def parse_target(text: str) -> TProgram:
    forms = read_all(text)
    data = stack = None
    mods, part = [], None
    for form in forms:
        expect_list(form, what="layout or program")
        head = form[0] if form else None
        if head == "layout":
            data, stack = _parse_layout(form)
        elif head == "program":
            for item in form[1:]:
                expect_list(item, what="a module")
                if item and item[0] == "part":
                    part = parse_part(item)
                    continue
                expect_list(item, "module")
                if len(item) < 2:
                    fail(item, "module needs a module id")
                mods.append(TModule(expect_sym(item[1], "module id"),
                                    tuple(_parse_fun(f) for f in item[2:])))
        else:
            fail(form, "expected (layout ...) or (program ...)")
    if data is None:
        raise ParseError("image has no (layout ...) header")
    prog = TProgram(tuple(mods), data, stack, part)
    validate_image(prog)
    return prog


def validate_image(p: TProgram):
    from .source import check_ids
    check_ids(p.modules)
    have = {m for m, _, _ in p.data}
    for m in p.modules:
        if m.mid not in have:
            raise ImageError(f"module {m.mid} missing from the layout header")
    regions = sorted((b, e) for _, b, e in p.data + p.stack if e > b)
    for (b1, e1), (b2, e2) in zip(regions, regions[1:]):
        if b2 < e1:
            raise ImageError("layout regions overlap")


def print_expr(e) -> str:
    s = print_common_expr(e, print_expr)
    if s is not None:
        return s
    if isinstance(e, GetDdc):
        return "(getddc)"
    if isinstance(e, GetStc):
        return "(getstc)"
    if isinstance(e, GetPcc):
        return "(getpcc)"
    if isinstance(e, Inc):
        return f"(inc {print_expr(e.cap)} {print_expr(e.delta)})"
    raise TypeError(f"not a target expression: {e!r}")


def print_target(p: TProgram) -> str:
    lines = ["(layout"]
    stack = {m: (b, e) for m, b, e in p.stack}
    for mid, b, e in p.data:
        sb, se = stack[mid]
        lines.append(f"  (module {mid} (data {b} {e}) (stack {sb} {se}))")
    lines[-1] += ")"
    lines.append("(program")
    if p.part is not None:
        lines.append("  " + print_part(p.part))
    for m in p.modules:
        lines.append(f"  (module {m.mid}")
        for f in m.functions:
            params = "".join(f" {o}" for o in f.params)
            lines.append(f"    (fun {f.fid} (params{params}) (frame {f.frame})")
            lines.append("      (body")
            for c in f.body:
                lines.append("        " + print_cmd(c, print_expr))
            lines[-1] += "))"
        lines[-1] += ")"
    lines[-1] += ")"
    return "\n".join(lines) + "\n"


# -- linking ----------------------------------------------------------------

def _mentions_pcc(e) -> bool:
    if isinstance(e, GetPcc):
        return True
    if not hasattr(e, "__dataclass_fields__"):
        return False
    return any(_mentions_pcc(getattr(e, f)) for f in e.__dataclass_fields__)


def _cmd_exprs(c):
    if isinstance(c, Call):
        return list(c.args)
    return [getattr(c, f) for f in c.__dataclass_fields__ if f != "fid"]


def link_check_pcc(ctx: TProgram) -> bool:
    """False iff some expression in ctx reads pcc."""
    return not any(_mentions_pcc(e) for _, f in ctx.functions() for c in f.body for e in _cmd_exprs(c))


def pcc_offenders(p: TProgram):
    return [(f.fid, i) for _, f in p.functions() for i, c in enumerate(f.body)
            if any(_mentions_pcc(e) for e in _cmd_exprs(c))]


def link_trg(ctx: TProgram, p: TProgram, check_pcc: bool = True) -> TProgram:
    if check_pcc and not link_check_pcc(ctx):
        raise PccMentioned("context reads pcc at " + ", ".join(f"{f}:{i}" for f, i in pcc_offenders(ctx)))
    from .source import check_ids
    mods = tuple(ctx.modules) + tuple(p.modules)
    check_ids(mods)
    sizes = []
    for img in (ctx, p):
        stack = {m: e - b for m, b, e in img.stack}
        sizes += [(m, e - b, stack[m]) for m, b, e in img.data]
    part = frozenset(p.mids())
    data, stack = place_modules(sizes, part)
    return TProgram(mods, tuple((m, *data[m]) for m, _, _ in sizes),
                    tuple((m, *stack[m]) for m, _, _ in sizes), part)


# -- semantics --------------------------------------------------------------

class TFrame(NamedTuple):
    ret_pcc: Tuple[str, int]
    saved_ddc: Capability
    saved_stc: Capability
    callee_mid: str
    saved_phi: int


class TargetState:
    __slots__ = ("mem", "nalloc", "stk", "ddc", "stc", "pcc", "mstc", "mddc", "phi")

    def __init__(self, mem, nalloc, stk, ddc, stc, pcc, mstc, mddc, phi):
        self.mem = mem
        self.nalloc = nalloc
        self.stk = stk
        self.ddc = ddc
        self.stc = stc
        self.pcc = pcc
        self.mstc = mstc
        self.mddc = mddc
        self.phi = phi

    @property
    def pc(self):
        return self.pcc

    def copy(self):
        return TargetState(dict(self.mem), self.nalloc, list(self.stk), self.ddc, self.stc,
                           self.pcc, dict(self.mstc), dict(self.mddc), dict(self.phi))

    def __eq__(self, other):
        return isinstance(other, TargetState) and all(
            getattr(self, k) == getattr(other, k) for k in self.__slots__)

    def __repr__(self):
        return f"TargetState(pcc={self.pcc}, nalloc={self.nalloc}, stk={len(self.stk)} frames)"


class TargetEnv:
    def __init__(self, p: TProgram, nabla: int = DEFAULT_NABLA, audit=None):
        self.program = p
        self.layout = p.layout(nabla)
        self.audit = audit
        self.funcs: Dict[str, TFunction] = {}
        self.mid_of: Dict[str, str] = {}
        for mid, f in p.functions():
            self.funcs[f.fid] = f
            self.mid_of[f.fid] = mid
        self.frame_size = {fid: f.frame for fid, f in self.funcs.items()}

    def body(self, fid):
        return self.funcs[fid].body


def _load(env, st, c):
    addr = core.check_access(st.mem, c)
    if env.audit is not None:
        env.audit.access("load", c, addr)
    return st.mem[addr]


def eval_expr_trg(env: TargetEnv, st: TargetState, e):
    t = type(e)
    if t is IntLit:
        return e.value
    if t is Deref:
        return _load(env, st, eval_expr_trg(env, st, e.expr))
    if t is Inc:
        c = expect_cap(eval_expr_trg(env, st, e.cap), "inc base")
        d = expect_int(eval_expr_trg(env, st, e.delta), "inc amount")
        return c.with_offset(c.offset + d)
    if t is GetDdc:
        return st.ddc
    if t is GetStc:
        return st.stc
    if t is BinOp:
        return apply_binop(e.op, eval_expr_trg(env, st, e.left), eval_expr_trg(env, st, e.right))
    if t is LimRange:
        return core.limrange(eval_expr_trg(env, st, e.cap), eval_expr_trg(env, st, e.lo),
                             eval_expr_trg(env, st, e.hi))
    if t is Start or t is End or t is Offset or t is CapType:
        return apply_getter(t, eval_expr_trg(env, st, e.expr))
    if t is GetPcc:
        raise Fault(core.PCC_READ, "pcc cannot be read")
    raise Fault(core.TYPE_ERROR, f"not a target expression: {e!r}")


def step_trg(env: TargetEnv, st: TargetState) -> Step:
    """Advance st by one command, in place."""
    fid, idx = st.pcc
    body = env.funcs[fid].body
    if idx >= len(body):
        return Step(STUCK, "fell off the end of " + fid)
    cmd = body[idx]
    t = type(cmd)
    ev = eval_expr_trg
    try:
        if t is Assign:
            c = ev(env, st, cmd.lhs)
            v = ev(env, st, cmd.rhs)
            addr = core.check_access(st.mem, c)
            if env.audit is not None:
                env.audit.access("store", c, addr)
                env.audit.write(addr, v)
            st.mem[addr] = v
            st.pcc = (fid, idx + 1)
            return Step(NEXT)
        if t is JumpIfZero:
            cv = expect_int(ev(env, st, cmd.cond), "jump condition")
            if cv != 0:
                st.pcc = (fid, idx + 1)
                return Step(NEXT)
            off = expect_int(ev(env, st, cmd.offset), "jump offset")
            if not 0 <= idx + off < len(body):
                return Step(STUCK, f"jump to {idx + off} outside {fid}")
            st.pcc = (fid, idx + off)
            return Step(NEXT)
        if t is Call:
            args = tuple(ev(env, st, a) for a in cmd.args)
            return _call(env, st, cmd.fid, args)
        if t is Return:
            if not st.stk:
                return Step(STUCK, "return with empty control stack")
            fr = st.stk.pop()
            st.phi[fr.callee_mid] = fr.saved_phi
            st.mstc[fr.callee_mid] = st.mstc[fr.callee_mid].with_offset(fr.saved_phi)
            st.ddc, st.stc = fr.saved_ddc, fr.saved_stc
            st.pcc = (fr.ret_pcc[0], fr.ret_pcc[1] + 1)
            return Step(NEXT)
        if t is Alloc:
            c = ev(env, st, cmd.lhs)
            size = ev(env, st, cmd.size)
            fresh = alloc_block(env, st, c, size)
            addr = core.check_access(st.mem, c)
            if env.audit is not None:
                env.audit.access("store", c, addr)
                env.audit.write(addr, fresh)
            st.mem[addr] = fresh
            st.pcc = (fid, idx + 1)
            return Step(NEXT)
        if t is Exit:
            return Step(TERMINAL)
    except Fault as f:
        return Step(STUCK, str(f))
    return Step(STUCK, f"unknown command {cmd!r}")


def _call(env, st, callee, args):
    f = env.funcs.get(callee)
    if f is None:
        return Step(STUCK, f"unknown function {callee}")
    if len(args) != len(f.params):
        return Step(STUCK, f"{callee} expects {len(f.params)} arguments, got {len(args)}")
    fid = st.pcc[0]
    cmid = env.mid_of[callee]
    base = st.phi[cmid] + top_frame_size(env, st.stk, fid, cmid)
    s_lo, s_hi = env.layout.stack[cmid]
    if s_lo + base + f.frame > s_hi:
        return Step(STUCK, f"stack overflow in module {cmid}")
    st.stk.append(TFrame(st.pcc, st.ddc, st.stc, cmid, st.phi[cmid]))
    st.phi[cmid] = base
    st.mstc[cmid] = st.mstc[cmid].with_offset(base)
    st.ddc = st.mddc[cmid]
    st.stc = st.mstc[cmid]
    frame = s_lo + base
    for a in range(frame, frame + f.frame):
        st.mem[a] = 0
    # arguments are bound through stc-derived capabilities
    for off, v in zip(f.params, args):
        core.store_in(st.mem, st.stc.with_offset(base + off), v)
    if env.audit is not None:
        for a in range(frame, frame + f.frame):
            env.audit.write(a, st.mem[a])
    st.pcc = (callee, 0)
    return Step(NEXT, args=args)


def init_trg(p: TProgram, nabla: int = DEFAULT_NABLA, audit=None):
    env = TargetEnv(p, nabla, audit)
    if "main" not in env.funcs:
        raise NoMain("image defines no main")
    lay = env.layout
    mem = {}
    for lo, hi in lay.initial_ranges():
        for a in range(lo, hi):
            mem[a] = 0
    mddc = {m: Capability(DATA, *lay.data[m], 0) for m in lay.data}
    mstc = {m: Capability(DATA, *lay.stack[m], 0) for m in lay.stack}
    main_mid = env.mid_of["main"]
    st = TargetState(mem, -1, [], mddc[main_mid], mstc[main_mid], ("main", 0),
                     mstc, mddc, {m: 0 for m in lay.data})
    return env, st


def converges_trg(p: TProgram, fuel: int, nabla: int = DEFAULT_NABLA):
    env, st = init_trg(p, nabla)
    return run(env, st, fuel, step_trg)[0]
