"""Syntax shared by both languages: common expressions, commands, the
load-time layout, and step results."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Tuple

from . import core
from .core import Fault, expect_int
from .sexp import expect_list, expect_num, expect_sym, fail

DEFAULT_NABLA = 2 ** 20
DEFAULT_STACK = 256

BINOPS = ("+", "-", "*", "/", "mod", "=", "<", "<=")


class LayoutError(Exception):
    pass


class DuplicateModule(LayoutError):
    pass


class DuplicateFunction(LayoutError):
    pass


class DuplicateVariable(LayoutError):
    pass


class NoMain(Exception):
    pass


# -- expressions common to both languages ------------------------------------

@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Deref:
    expr: object


@dataclass(frozen=True)
class Start:
    expr: object


@dataclass(frozen=True)
class End:
    expr: object


@dataclass(frozen=True)
class Offset:
    expr: object


@dataclass(frozen=True)
class CapType:
    expr: object


@dataclass(frozen=True)
class LimRange:
    cap: object
    lo: object
    hi: object


GETTERS = {"start": Start, "end": End, "offset": Offset, "captype": CapType}
GETTER_NAMES = {v: k for k, v in GETTERS.items()}


def apply_binop(op: str, a, b) -> int:
    a = expect_int(a, f"left operand of {op}")
    b = expect_int(b, f"right operand of {op}")
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op in ("/", "mod"):
        if b == 0:
            raise Fault(core.ARITHMETIC, "division by zero")
        return a // b if op == "/" else a % b
    if op == "=":
        return int(a == b)
    if op == "<":
        return int(a < b)
    if op == "<=":
        return int(a <= b)
    raise Fault(core.TYPE_ERROR, f"unknown operator {op}")


def apply_getter(cls, v) -> int:
    c = core.expect_cap(v, "getter operand")
    if cls is Start:
        return c.start
    if cls is End:
        return c.end
    if cls is Offset:
        return c.offset
    return core.cap_type_code(c)


# -- commands ---------------------------------------------------------------

@dataclass(frozen=True)
class Assign:
    lhs: object
    rhs: object


@dataclass(frozen=True)
class Alloc:
    lhs: object
    size: object


@dataclass(frozen=True)
class Call:
    fid: str
    args: Tuple = ()


@dataclass(frozen=True)
class Return:
    pass


@dataclass(frozen=True)
class JumpIfZero:
    cond: object
    offset: object


@dataclass(frozen=True)
class Exit:
    pass


def parse_cmd(node, parse_expr):
    expect_list(node, what="a command")
    if not node:
        fail(node, "empty command")
    head = node[0]
    args = node[1:]

    def arity(n):
        if len(args) != n:
            fail(node, f"{head} takes {n} operand(s), got {len(args)}")

    if head == "assign":
        arity(2)
        return Assign(parse_expr(args[0]), parse_expr(args[1]))
    if head == "alloc":
        arity(2)
        return Alloc(parse_expr(args[0]), parse_expr(args[1]))
    if head == "call":
        if not args:
            fail(node, "call needs a function id")
        return Call(expect_sym(args[0], "function id"), tuple(parse_expr(a) for a in args[1:]))
    if head == "return":
        arity(0)
        return Return()
    if head == "jz":
        arity(2)
        return JumpIfZero(parse_expr(args[0]), parse_expr(args[1]))
    if head == "exit":
        arity(0)
        return Exit()
    fail(node, f"unknown command {head!r}")


def print_cmd(c, pe) -> str:
    if isinstance(c, Assign):
        return f"(assign {pe(c.lhs)} {pe(c.rhs)})"
    if isinstance(c, Alloc):
        return f"(alloc {pe(c.lhs)} {pe(c.size)})"
    if isinstance(c, Call):
        return "(call " + " ".join([c.fid] + [pe(a) for a in c.args]) + ")"
    if isinstance(c, Return):
        return "(return)"
    if isinstance(c, JumpIfZero):
        return f"(jz {pe(c.cond)} {pe(c.offset)})"
    if isinstance(c, Exit):
        return "(exit)"
    raise TypeError(f"not a command: {c!r}")


def parse_common_expr(node, parse_expr):
    """Parse the expression forms both languages share, or return None."""
    if isinstance(node, int):
        return IntLit(int(node))
    if not isinstance(node, list) or not node:
        return None
    head, args = node[0], node[1:]
    if head in BINOPS:
        if len(args) != 2:
            fail(node, f"{head} takes 2 operands")
        return BinOp(str(head), parse_expr(args[0]), parse_expr(args[1]))
    if head == "deref":
        if len(args) != 1:
            fail(node, "deref takes 1 operand")
        return Deref(parse_expr(args[0]))
    if head in GETTERS:
        if len(args) != 1:
            fail(node, f"{head} takes 1 operand")
        return GETTERS[head](parse_expr(args[0]))
    if head == "limrange":
        if len(args) != 3:
            fail(node, "limrange takes 3 operands")
        return LimRange(*(parse_expr(a) for a in args))
    return None


def print_common_expr(e, pe):
    if isinstance(e, IntLit):
        return str(e.value)
    if isinstance(e, BinOp):
        return f"({e.op} {pe(e.left)} {pe(e.right)})"
    if isinstance(e, Deref):
        return f"(deref {pe(e.expr)})"
    if type(e) in GETTER_NAMES:
        return f"({GETTER_NAMES[type(e)]} {pe(e.expr)})"
    if isinstance(e, LimRange):
        return f"(limrange {pe(e.cap)} {pe(e.lo)} {pe(e.hi)})"
    return None


def parse_part(node):
    """`(part M1 M2 ...)` marks the program side of a linked program."""
    return frozenset(expect_sym(x, "module id") for x in node[1:])


def print_part(mids) -> str:
    return "(part" + "".join(" " + m for m in sorted(mids)) + ")"


def parse_size(node, what="size"):
    n = expect_num(node, what)
    if n < 0:
        fail(node, f"{what} must be non-negative")
    return n


# -- layout -----------------------------------------------------------------

@dataclass
class Layout:
    beta: Dict[Tuple[str, Optional[str], str], Tuple[int, int]] = field(default_factory=dict)
    data: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    stack: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    nabla: int = DEFAULT_NABLA

    def static_addresses(self, mids):
        out = set()
        for m in mids:
            out.update(range(*self.data[m]))
            out.update(range(*self.stack[m]))
        return out

    def initial_ranges(self):
        return list(self.data.values()) + list(self.stack.values())


def place_modules(sizes, program_mids=None):
    """Assign data and stack regions.

    sizes is a list of (mid, data_cells, stack_cells) in declaration order.
    Program-side modules are placed first so that the program's addresses do
    not depend on the context it is linked with.
    """
    if program_mids:
        order = [s for s in sizes if s[0] in program_mids] + [s for s in sizes if s[0] not in program_mids]
    else:
        order = list(sizes)
    data, stack = {}, {}
    base = 0
    for mid, dsize, ssize in order:
        data[mid] = (base, base + dsize)
        stack[mid] = (base + dsize, base + dsize + ssize)
        base += dsize + ssize
    return data, stack


# -- stepping ---------------------------------------------------------------

NEXT = "next"
TERMINAL = "terminal"
STUCK = "stuck"


class Step(NamedTuple):
    status: str
    reason: str = ""
    args: Tuple = ()


CONVERGED = "converged"
DIVERGED = "diverged"
FUEL_EXHAUSTED = "fuel"


class Audit:
    """Observer for memory traffic, used by the safety and provenance audits.

    Interpreters call ``access`` for every capability-mediated load or store
    (after the check succeeded) and ``write`` for every memory mutation,
    trusted ones included.
    """

    def __init__(self):
        self.accesses = []
        self.writes = 0
        self.minted = []

    def access(self, kind, cap, addr):
        self.accesses.append((kind, cap, addr))

    def write(self, addr, value):
        self.writes += 1

    def mint(self, lo, hi):
        self.minted.append((lo, hi))
