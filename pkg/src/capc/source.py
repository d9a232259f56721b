"""The source language: modules with private globals, per-module data
stacks, a trusted control stack and a shared heap growing downwards."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, NamedTuple, Optional, Tuple

from . import core
from .core import Capability, Fault, DATA, expect_cap, expect_int
from .sexp import expect_list, expect_sym, fail, read_all
from .syntax import (
    DEFAULT_NABLA, DEFAULT_STACK, CONVERGED, DIVERGED, FUEL_EXHAUSTED,
    NEXT, STUCK, TERMINAL, Step, Layout, NoMain,
    DuplicateFunction, DuplicateModule, DuplicateVariable,
    IntLit, BinOp, Deref, Start, End, Offset, CapType, LimRange,
    Assign, Alloc, Call, Return, JumpIfZero, Exit,
    apply_binop, apply_getter, parse_cmd, print_cmd, parse_common_expr,
    print_common_expr, parse_part, print_part, parse_size, place_modules,
)


@dataclass(frozen=True)
class Var:
    vid: str


@dataclass(frozen=True)
class Index:
    arr: object
    idx: object


@dataclass(frozen=True)
class AddrOf:
    vid: str


@dataclass(frozen=True)
class AddrOfIndex:
    arr: object
    idx: object


LVALUE_FORMS = (Var, Index, Deref)


@dataclass(frozen=True)
class SFunction:
    fid: str
    params: Tuple[Tuple[str, int], ...] = ()
    locals: Tuple[Tuple[str, int], ...] = ()
    body: Tuple = ()

    @property
    def frame_size(self):
        return sum(s for _, s in self.params) + sum(s for _, s in self.locals)


@dataclass(frozen=True)
class SModule:
    mid: str
    globals: Tuple[Tuple[str, int], ...] = ()
    functions: Tuple[SFunction, ...] = ()


@dataclass(frozen=True)
class SProgram:
    modules: Tuple[SModule, ...] = ()
    part: Optional[FrozenSet[str]] = None  # program-side modules of a linked program

    def module(self, mid):
        for m in self.modules:
            if m.mid == mid:
                return m
        raise KeyError(mid)

    def functions(self):
        for m in self.modules:
            for f in m.functions:
                yield m.mid, f

    def fids(self):
        return [f.fid for _, f in self.functions()]

    def mids(self):
        return [m.mid for m in self.modules]


# -- parsing and printing ----------------------------------------------------

def parse_expr(node):
    e = parse_common_expr(node, parse_expr)
    if e is not None:
        return e
    if isinstance(node, str):
        return Var(str(node))
    expect_list(node, what="an expression")
    if not node:
        fail(node, "empty expression")
    head, args = node[0], node[1:]
    if head == "addr":
        if len(args) != 1:
            fail(node, "addr takes a variable")
        return AddrOf(expect_sym(args[0], "variable"))
    if head in ("index", "addr-index"):
        if len(args) != 2:
            fail(node, f"{head} takes 2 operands")
        arr = parse_expr(args[0])
        if not isinstance(arr, LVALUE_FORMS):
            fail(args[0], f"{head} base must be a variable, index or deref")
        cls = Index if head == "index" else AddrOfIndex
        return cls(arr, parse_expr(args[1]))
    fail(node, f"unknown expression form {head!r}")


def _decls(node, head):
    expect_list(node, head)
    out = []
    for d in node[1:]:
        expect_list(d, what=f"a ({head[:-1] if head != 'globals' else 'global'} size) pair")
        if len(d) != 2:
            fail(d, "declaration needs a name and a size")
        out.append((expect_sym(d[0], "variable"), parse_size(d[1])))
    return tuple(out)


def _parse_fun(node):
    expect_list(node, "fun")
    if len(node) < 2:
        fail(node, "fun needs a function id")
    fid = expect_sym(node[1], "function id")
    params, locs, body = (), (), None
    for item in node[2:]:
        expect_list(item, what="params, locals or body")
        if item and item[0] == "params":
            params = _decls(item, "params")
        elif item and item[0] == "locals":
            locs = _decls(item, "locals")
        elif item and item[0] == "body":
            body = tuple(parse_cmd(c, parse_expr) for c in item[1:])
        else:
            fail(item, "expected params, locals or body")
    if body is None:
        fail(node, f"function {fid} has no body")
    return SFunction(fid, params, locs, body)


def _parse_module(node):
    expect_list(node, "module")
    if len(node) < 2 or not isinstance(node[1], str):
        fail(node, "module needs a module id")
    mid = str(node[1])
    globs, funs = (), []
    for item in node[2:]:
        expect_list(item, what="globals or fun")
        if item and item[0] == "globals":
            globs = _decls(item, "globals")
        elif item and item[0] == "fun":
            funs.append(_parse_fun(item))
        else:
            fail(item, "expected globals or fun")
    return SModule(mid, globs, tuple(funs))


def parse_source(text: str) -> SProgram:
    forms = read_all(text)
    if len(forms) == 1 and isinstance(forms[0], list) and forms[0] and forms[0][0] == "program":
        items = forms[0][1:]
    else:
        items = forms
    part = None
    mods = []
    for item in items:
        expect_list(item, what="a module")
        if item and item[0] == "part":
            part = parse_part(item)
        else:
            mods.append(_parse_module(item))
    return SProgram(tuple(mods), part)


def print_expr(e) -> str:
    s = print_common_expr(e, print_expr)
    if s is not None:
        return s
    if isinstance(e, Var):
        return e.vid
    if isinstance(e, AddrOf):
        return f"(addr {e.vid})"
    if isinstance(e, Index):
        return f"(index {print_expr(e.arr)} {print_expr(e.idx)})"
    if isinstance(e, AddrOfIndex):
        return f"(addr-index {print_expr(e.arr)} {print_expr(e.idx)})"
    raise TypeError(f"not a source expression: {e!r}")


def _print_decls(head, decls):
    return "(" + head + "".join(f" ({v} {n})" for v, n in decls) + ")"


def print_source(p: SProgram) -> str:
    lines = ["(program"]
    if p.part is not None:
        lines.append("  " + print_part(p.part))
    for m in p.modules:
        lines.append(f"  (module {m.mid} {_print_decls('globals', m.globals)}")
        for f in m.functions:
            lines.append(f"    (fun {f.fid} {_print_decls('params', f.params)} {_print_decls('locals', f.locals)}")
            lines.append("      (body")
            for c in f.body:
                lines.append("        " + print_cmd(c, print_expr))
            lines[-1] += "))"
        lines[-1] += ")"
    lines[-1] += ")"
    return "\n".join(lines) + "\n"


# -- layout -----------------------------------------------------------------

def check_ids(mods):
    seen_m, seen_f = set(), set()
    for m in mods:
        if m.mid in seen_m:
            raise DuplicateModule(m.mid)
        seen_m.add(m.mid)
        for f in m.functions:
            if f.fid in seen_f:
                raise DuplicateFunction(f.fid)
            seen_f.add(f.fid)


def _pack(decls, what):
    out, off = {}, 0
    for vid, size in decls:
        if vid in out:
            raise DuplicateVariable(f"{vid} in {what}")
        out[vid] = (off, off + size)
        off += size
    return out


def layout(p: SProgram, nabla: int = DEFAULT_NABLA, stack_size: int = DEFAULT_STACK) -> Layout:
    check_ids(p.modules)
    lay = Layout(nabla=nabla)
    sizes = []
    for m in p.modules:
        for vid, iv in _pack(m.globals, f"module {m.mid}").items():
            lay.beta[(vid, None, m.mid)] = iv
        for f in m.functions:
            for vid, iv in _pack(f.params + f.locals, f"function {f.fid}").items():
                lay.beta[(vid, f.fid, m.mid)] = iv
        sizes.append((m.mid, sum(s for _, s in m.globals), stack_size))
    lay.data, lay.stack = place_modules(sizes, p.part)
    return lay


# -- linking ----------------------------------------------------------------

def link_src(ctx: SProgram, p: SProgram) -> SProgram:
    mods = tuple(ctx.modules) + tuple(p.modules)
    check_ids(mods)
    return SProgram(mods, frozenset(p.mids()))


def is_whole(p: SProgram) -> bool:
    defined = set(p.fids())
    return all(c.fid in defined for _, f in p.functions() for c in f.body if isinstance(c, Call))


def unresolved_calls(p: SProgram):
    defined = set(p.fids())
    out = {}
    for _, f in p.functions():
        for c in f.body:
            if isinstance(c, Call) and c.fid not in defined:
                out.setdefault(c.fid, len(c.args))
    return out


# -- semantics --------------------------------------------------------------

class Frame(NamedTuple):
    ret_fid: str
    ret_idx: int
    caller_mid: str
    callee_mid: str
    saved_phi: int


class SourceState:
    __slots__ = ("mem", "phi", "pc", "stk", "nalloc")

    def __init__(self, mem, phi, pc, stk, nalloc):
        self.mem = mem
        self.phi = phi
        self.pc = pc
        self.stk = stk
        self.nalloc = nalloc

    def copy(self):
        return SourceState(dict(self.mem), dict(self.phi), self.pc, list(self.stk), self.nalloc)

    def __eq__(self, other):
        return isinstance(other, SourceState) and all(
            getattr(self, k) == getattr(other, k) for k in self.__slots__)

    def __repr__(self):
        return f"SourceState(pc={self.pc}, nalloc={self.nalloc}, stk={len(self.stk)} frames)"


class SourceEnv:
    """Everything the source semantics reads but never writes."""

    def __init__(self, p: SProgram, lay: Layout, audit=None):
        self.program = p
        self.layout = lay
        self.audit = audit
        self.funcs: Dict[str, SFunction] = {}
        self.mid_of: Dict[str, str] = {}
        self.local_slots: Dict[str, Dict[str, Tuple[int, int]]] = {}
        self.global_slots: Dict[str, Dict[str, Tuple[int, int]]] = {m.mid: {} for m in p.modules}
        for (vid, fid, mid), iv in lay.beta.items():
            if fid is None:
                self.global_slots[mid][vid] = iv
            else:
                self.local_slots.setdefault(fid, {})[vid] = iv
        for mid, f in p.functions():
            self.funcs[f.fid] = f
            self.mid_of[f.fid] = mid
            self.local_slots.setdefault(f.fid, {})
        self.frame_size = {fid: f.frame_size for fid, f in self.funcs.items()}
        self.param_slots = {fid: [self.local_slots[fid][v][0] for v, _ in f.params]
                            for fid, f in self.funcs.items()}

    def body(self, fid):
        return self.funcs[fid].body


def _load(env, st, c):
    addr = core.check_access(st.mem, c)
    if env.audit is not None:
        env.audit.access("load", c, addr)
    return st.mem[addr]


def _store(env, st, c, v):
    addr = core.check_access(st.mem, c)
    if env.audit is not None:
        env.audit.access("store", c, addr)
        env.audit.write(addr, v)
    st.mem[addr] = v


def var_cap(env, st, vid) -> Capability:
    fid = st.pc[0]
    mid = env.mid_of[fid]
    iv = env.local_slots[fid].get(vid)
    if iv is not None:
        base = env.layout.stack[mid][0] + st.phi[mid]
    else:
        iv = env.global_slots[mid].get(vid)
        if iv is None:
            raise Fault(core.TYPE_ERROR, f"unknown variable {vid} in {fid}")
        base = env.layout.data[mid][0]
    return Capability(DATA, base + iv[0], base + iv[1], 0)


def _lvalue_cap(env, st, e):
    t = type(e)
    if t is Var:
        return var_cap(env, st, e.vid)
    if t is Index:
        return _index_cap(env, st, e)
    if t is Deref:
        return expect_cap(eval_expr(env, st, e.expr), "address-of operand")
    raise Fault(core.TYPE_ERROR, f"cannot take the address of {e!r}")


def _index_cap(env, st, e):
    c = expect_cap(_lvalue_cap(env, st, e.arr), "indexed base")
    i = expect_int(eval_expr(env, st, e.idx), "index")
    return c.with_offset(c.offset + i)


def eval_expr(env: SourceEnv, st: SourceState, e):
    t = type(e)
    if t is IntLit:
        return e.value
    if t is Var:
        return _load(env, st, var_cap(env, st, e.vid))
    if t is BinOp:
        return apply_binop(e.op, eval_expr(env, st, e.left), eval_expr(env, st, e.right))
    if t is AddrOf:
        return var_cap(env, st, e.vid)
    if t is AddrOfIndex:
        return _index_cap(env, st, e)
    if t is Index:
        return _load(env, st, _index_cap(env, st, e))
    if t is Deref:
        return _load(env, st, eval_expr(env, st, e.expr))
    if t is Start or t is End or t is Offset or t is CapType:
        return apply_getter(t, eval_expr(env, st, e.expr))
    if t is LimRange:
        return core.limrange(eval_expr(env, st, e.cap), eval_expr(env, st, e.lo), eval_expr(env, st, e.hi))
    raise Fault(core.TYPE_ERROR, f"not a source expression: {e!r}")


def top_frame_size(env, stk, cur_fid, mid) -> int:
    """Size of the most recent active frame of module mid (0 if none)."""
    if env.mid_of[cur_fid] == mid:
        return env.frame_size[cur_fid]
    for fr in reversed(stk):
        fid = fr[0] if isinstance(fr[0], str) else fr[0][0]
        if env.mid_of[fid] == mid:
            return env.frame_size[fid]
    return 0


def alloc_block(env, st, lhs_cap, size):
    """Shared Alloc logic; checks everything before mutating."""
    core.check_access(st.mem, lhs_cap)
    size = expect_int(size, "allocation size")
    if size < 1:
        raise Fault(core.TYPE_ERROR, f"allocation size {size} must be positive")
    used = -1 - st.nalloc
    if used + size > env.layout.nabla:
        raise Fault("HeapExhausted", f"{used}+{size} > {env.layout.nabla}")
    lo, hi = st.nalloc - size + 1, st.nalloc + 1
    audit = env.audit
    for a in range(lo, hi):
        st.mem[a] = 0
        if audit is not None:
            audit.write(a, 0)
    if audit is not None:
        audit.mint(lo, hi)
    st.nalloc -= size
    return Capability(DATA, lo, hi, 0)


def step(env: SourceEnv, st: SourceState) -> Step:
    """Advance st by one command, in place."""
    fid, idx = st.pc
    body = env.funcs[fid].body
    if idx >= len(body):
        return Step(STUCK, "fell off the end of " + fid)
    cmd = body[idx]
    t = type(cmd)
    try:
        if t is Assign:
            c = eval_expr(env, st, cmd.lhs)
            v = eval_expr(env, st, cmd.rhs)
            _store(env, st, c, v)
            st.pc = (fid, idx + 1)
            return Step(NEXT)
        if t is JumpIfZero:
            cv = expect_int(eval_expr(env, st, cmd.cond), "jump condition")
            if cv != 0:
                st.pc = (fid, idx + 1)
                return Step(NEXT)
            off = expect_int(eval_expr(env, st, cmd.offset), "jump offset")
            if not 0 <= idx + off < len(body):
                return Step(STUCK, f"jump to {idx + off} outside {fid}")
            st.pc = (fid, idx + off)
            return Step(NEXT)
        if t is Call:
            args = tuple(eval_expr(env, st, a) for a in cmd.args)
            return _call(env, st, cmd.fid, args)
        if t is Return:
            if not st.stk:
                return Step(STUCK, "return with empty control stack")
            fr = st.stk.pop()
            st.phi[fr.callee_mid] = fr.saved_phi
            st.pc = (fr.ret_fid, fr.ret_idx + 1)
            return Step(NEXT)
        if t is Alloc:
            c = eval_expr(env, st, cmd.lhs)
            size = eval_expr(env, st, cmd.size)
            core.check_access(st.mem, c)
            fresh = alloc_block(env, st, c, size)
            _store(env, st, c, fresh)
            st.pc = (fid, idx + 1)
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
    fid, idx = st.pc
    mid = env.mid_of[fid]
    cmid = env.mid_of[callee]
    base = st.phi[cmid] + top_frame_size(env, st.stk, fid, cmid)
    s_lo, s_hi = env.layout.stack[cmid]
    size = env.frame_size[callee]
    if s_lo + base + size > s_hi:
        return Step(STUCK, f"stack overflow in module {cmid}")
    st.stk.append(Frame(fid, idx, mid, cmid, st.phi[cmid]))
    st.phi[cmid] = base
    frame = s_lo + base
    audit = env.audit
    for a in range(frame, frame + size):
        st.mem[a] = 0
    for off, v in zip(env.param_slots[callee], args):
        st.mem[frame + off] = v
    if audit is not None:
        for a in range(frame, frame + size):
            audit.write(a, st.mem[a])
    st.pc = (callee, 0)
    return Step(NEXT, args=args)


def init_src(p: SProgram, nabla: int = DEFAULT_NABLA, stack_size: int = DEFAULT_STACK, audit=None):
    lay = layout(p, nabla, stack_size)
    env = SourceEnv(p, lay, audit)
    if "main" not in env.funcs:
        raise NoMain("program defines no main")
    mem = {}
    for lo, hi in lay.initial_ranges():
        for a in range(lo, hi):
            mem[a] = 0
    st = SourceState(mem, {m.mid: 0 for m in p.modules}, ("main", 0), [], -1)
    return env, st


def run(env, st, fuel: int, stepper=step):
    """Run up to fuel steps. Returns (status, steps taken, last Step)."""
    n = 0
    res = Step(NEXT)
    while n < fuel:
        res = stepper(env, st)
        n += 1
        if res.status == TERMINAL:
            return CONVERGED, n, res
        if res.status == STUCK:
            return DIVERGED, n, res
    return FUEL_EXHAUSTED, n, res


def converges_src(p: SProgram, fuel: int, nabla: int = DEFAULT_NABLA, stack_size: int = DEFAULT_STACK):
    env, st = init_src(p, nabla, stack_size)
    return run(env, st, fuel)[0]
