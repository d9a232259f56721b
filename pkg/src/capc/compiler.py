"""Pointers-as-capabilities compilation from the source language to the
target machine. Every source pointer becomes a capability derived from
ddc (module globals) or stc (frame locals)."""

from __future__ import annotations

from typing import NamedTuple, Optional

from . import source as S
from . import target as T
from .syntax import (
    DEFAULT_NABLA, DEFAULT_STACK, IntLit, BinOp, Deref, Start, End, Offset, CapType,
    LimRange, Assign, Alloc, Call, Return, JumpIfZero, Exit, Layout,
)


class UnknownVariable(Exception):
    pass


class CompileError(Exception):
    pass


class CompileCtx(NamedTuple):
    fid: Optional[str]
    mid: str
    layout: Layout


def _plus(a, b):
    return BinOp("+", a, b)


def compile_addr_of(cc: CompileCtx, vid: str):
    lay = cc.layout
    iv = lay.beta.get((vid, cc.fid, cc.mid)) if cc.fid is not None else None
    if iv is not None:
        stc = T.GetStc()
        so = _plus(Start(stc), Offset(stc))
        return LimRange(stc, _plus(IntLit(iv[0]), so), _plus(IntLit(iv[1]), so))
    iv = lay.beta.get((vid, None, cc.mid))
    if iv is None:
        raise UnknownVariable(f"{vid} in {cc.fid or cc.mid}")
    ddc = T.GetDdc()
    return LimRange(ddc, _plus(Start(ddc), IntLit(iv[0])), _plus(Start(ddc), IntLit(iv[1])))


def _compile_lvalue(cc, e):
    if isinstance(e, S.Var):
        return compile_addr_of(cc, e.vid)
    if isinstance(e, S.Index):
        return T.Inc(_compile_lvalue(cc, e.arr), compile_expr(cc, e.idx))
    if isinstance(e, Deref):
        return compile_expr(cc, e.expr)
    raise CompileError(f"cannot take the address of {e!r}")


def compile_expr(cc: CompileCtx, e):
    t = type(e)
    if t is IntLit:
        return e
    if t is BinOp:
        return BinOp(e.op, compile_expr(cc, e.left), compile_expr(cc, e.right))
    if t is S.AddrOf:
        return compile_addr_of(cc, e.vid)
    if t is S.Var:
        return Deref(compile_addr_of(cc, e.vid))
    if t is S.AddrOfIndex:
        return T.Inc(_compile_lvalue(cc, e.arr), compile_expr(cc, e.idx))
    if t is S.Index:
        return Deref(T.Inc(_compile_lvalue(cc, e.arr), compile_expr(cc, e.idx)))
    if t is Deref or t is Start or t is End or t is Offset or t is CapType:
        return t(compile_expr(cc, e.expr))
    if t is LimRange:
        return LimRange(compile_expr(cc, e.cap), compile_expr(cc, e.lo), compile_expr(cc, e.hi))
    raise CompileError(f"not a source expression: {e!r}")


def compile_cmd(cc: CompileCtx, c):
    ce = lambda e: compile_expr(cc, e)
    t = type(c)
    if t is Assign:
        return Assign(ce(c.lhs), ce(c.rhs))
    if t is Alloc:
        return Alloc(ce(c.lhs), ce(c.size))
    if t is Call:
        return Call(c.fid, tuple(ce(a) for a in c.args))
    if t is JumpIfZero:
        return JumpIfZero(ce(c.cond), ce(c.offset))
    if t is Return or t is Exit:
        return c
    raise CompileError(f"not a command: {c!r}")


def compile_function(mid: str, f: S.SFunction, lay: Layout) -> T.TFunction:
    cc = CompileCtx(f.fid, mid, lay)
    params = tuple(lay.beta[(vid, f.fid, mid)][0] for vid, _ in f.params)
    return T.TFunction(f.fid, params, f.frame_size, tuple(compile_cmd(cc, c) for c in f.body))


def compile_module(m: S.SModule, lay: Layout) -> T.TModule:
    return T.TModule(m.mid, tuple(compile_function(m.mid, f, lay) for f in m.functions))


def compile_program(p: S.SProgram, lay: Optional[Layout] = None,
                    nabla: int = DEFAULT_NABLA, stack_size: int = DEFAULT_STACK) -> T.TProgram:
    if lay is None:
        lay = S.layout(p, nabla, stack_size)
    mods = tuple(compile_module(m, lay) for m in p.modules)
    return T.image_from_layout(mods, lay, p.part)
