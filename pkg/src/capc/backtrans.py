"""Trace-directed back-translation.

Given a trace α of some program p against an arbitrary target context, build
a source context that makes p produce exactly α again. The context keeps a
trace index, records every capability it is handed, and at each of its turns
replays allocations, shared-memory contents and the control action of the
corresponding position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Tuple

from .core import Capability, DATA
from .source import (
    SFunction, SModule, SProgram, Var, AddrOf, AddrOfIndex, Index, unresolved_calls,
)
from .syntax import (
    IntLit, BinOp, Deref, LimRange, Assign, Alloc, Call, Return, JumpIfZero, Exit,
)
from .trace import CALL_IN, CALL_OUT, RET_IN, RET_OUT, TICK, is_alternating

HELPER = "HelperBackTranslation"
MAIN_MODULE = "CtxMain"
IDX = "current_trace_idx"
READ_IDX = "readAndIncrementTraceIdx"
BUMP_IDX = "incrementTraceIdx"

STUCK_CMD = Assign(IntLit(0), IntLit(0))  # storing through an integer always faults
DIVERGE_CMD = JumpIfZero(IntLit(0), IntLit(0))


class BacktransUnsupported(Exception):
    def __init__(self, reason, position=None):
        super().__init__(reason if position is None else f"position {position}: {reason}")
        self.reason = reason
        self.position = position


class NonAlternating(Exception):
    pass


@dataclass
class PartInterface:
    exports: Dict[str, int]      # program functions the context may call
    imports: Dict[str, int]      # context functions the program calls
    mids: FrozenSet[str]
    has_main: bool = False

    def to_json(self):
        return json.dumps({"exports": self.exports, "imports": self.imports,
                           "mids": sorted(self.mids), "has_main": self.has_main}, sort_keys=True)

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        return PartInterface(dict(d["exports"]), dict(d["imports"]), frozenset(d["mids"]),
                             bool(d.get("has_main", "main" in d["exports"])))


def interface_of(p: SProgram, alpha=None) -> PartInterface:
    exports = {f.fid: len(f.params) for _, f in p.functions()}
    imports = unresolved_calls(p)
    for lab in alpha or ():
        if lab.kind == CALL_OUT:
            imports[lab.fid] = len(lab.args)
    return PartInterface(exports, imports, frozenset(p.mids()), "main" in exports)


# -- a tiny assembler for jump-based control flow ------------------------------

def assemble(items) -> Tuple:
    """items: commands, ("label", name), ("jz", cond, name) or ("goto", name)."""
    where, n = {}, 0
    for it in items:
        if isinstance(it, tuple) and it and it[0] == "label":
            where[it[1]] = n
        else:
            n += 1
    out = []
    for it in items:
        if isinstance(it, tuple) and it and it[0] == "label":
            continue
        if isinstance(it, tuple) and it and it[0] in ("jz", "goto"):
            cond = it[1] if it[0] == "jz" else IntLit(0)
            out.append(JumpIfZero(cond, IntLit(where[it[-1]] - len(out))))
        else:
            out.append(it)
    return tuple(out)


# -- capability provenance -----------------------------------------------------

class Provenance:
    """Capabilities the emulating context holds, in the order it got them."""

    def __init__(self):
        self.known: List[Tuple[Capability, str]] = []

    def add(self, cap, slot):
        self.known.append((cap, slot))

    def pointer_to(self, addr):
        for c, slot in self.known:
            if c.kind == DATA and c.start <= addr < c.end:
                n = addr - c.start - c.offset
                return Var(slot) if n == 0 else AddrOfIndex(Deref(Var(slot)), IntLit(n))
        return None

    def value(self, v):
        if type(v) is int:
            return IntLit(v)
        for c, slot in self.known:
            if c.kind == v.kind and c.start <= v.start and v.end <= c.end:
                if c == v:
                    return Var(slot)
                e = LimRange(Var(slot), IntLit(v.start), IntLit(v.end))
                return AddrOfIndex(Deref(e), IntLit(v.offset)) if v.offset else e
        return None


def _read_through(ptr):
    # ptr designates a cell; turn it into an expression loading that cell
    if isinstance(ptr, Var):
        return Deref(ptr)
    return Index(ptr.arr, ptr.idx)


@dataclass
class EmuPlan:
    alpha: list
    iface: PartInterface
    context: SProgram = None
    bodies: Dict[str, Tuple] = field(default_factory=dict)
    globals: List[Tuple[str, int]] = field(default_factory=list)
    arg_slots: Dict[Tuple[int, str, int], str] = field(default_factory=dict)
    snapshot_slots: Dict[Tuple[int, int], str] = field(default_factory=dict)
    alloc_slots: Dict[int, Tuple[str, Capability]] = field(default_factory=dict)
    call_resume: Dict[int, List[Tuple[str, int]]] = field(default_factory=dict)
    handler_of: Dict[str, str] = field(default_factory=dict)
    matching_call: Dict[int, int] = field(default_factory=dict)

    def size(self) -> int:
        return sum(len(b) for b in self.bodies.values())


def _match_returns(alpha):
    """Map each RetOut position to the CallIn position it returns from."""
    stack, match = [], {}
    for k, lab in enumerate(alpha):
        if lab.kind in (CALL_IN, CALL_OUT):
            stack.append(k)
        elif lab.kind in (RET_IN, RET_OUT):
            if not stack:
                raise NonAlternating(f"return at {k} without a matching call")
            c = stack.pop()
            if lab.kind == RET_OUT:
                match[k] = c
    return match


def plan(alpha, iface: PartInterface) -> EmuPlan:
    alpha = list(alpha)
    if not is_alternating(alpha):
        raise NonAlternating("trace is not alternating")
    ep = EmuPlan(alpha, iface)
    taken_f = set(iface.exports) | set(iface.imports)
    taken_m = set(iface.mids)
    for name in (HELPER, MAIN_MODULE):
        if name in taken_m:
            raise BacktransUnsupported(f"module name {name} is used by the program")

    if alpha:
        first = alpha[0]
        context_first = first.kind in (CALL_IN, RET_IN) or (first.kind == TICK and not iface.has_main)
        if context_first == iface.has_main:
            raise BacktransUnsupported("trace start does not match which side owns main")
    for lab in alpha:
        if lab.kind == CALL_IN and lab.fid not in iface.exports:
            raise BacktransUnsupported(f"call into unknown program function {lab.fid}")
        if lab.kind == CALL_OUT and lab.fid not in iface.imports:
            raise BacktransUnsupported(f"call to unexpected context function {lab.fid}")
    ep.matching_call = _match_returns(alpha)

    prov = Provenance()
    helpers: Dict[str, SFunction] = {}
    globs: List[Tuple[str, int]] = [(IDX, 1)]

    def helper(fid, params, body):
        if fid in taken_f:
            raise BacktransUnsupported(f"helper name {fid} clashes with a program function")
        helpers[fid] = SFunction(fid, tuple((p, 1) for p in params), (), tuple(body) + (Return(),))

    helper(READ_IDX, ["out"], [Assign(Var("out"), Var(IDX)),
                               Assign(AddrOf(IDX), BinOp("+", Var(IDX), IntLit(1)))])
    helper(BUMP_IDX, [], [Assign(AddrOf(IDX), BinOp("+", Var(IDX), IntLit(1)))])

    acts = {}  # position -> list of items for the control action
    snapshot_fn = {}
    prev_nalloc = -1
    for j, lab in enumerate(alpha):
        if lab.kind in (CALL_OUT, RET_OUT):
            if lab.kind == CALL_OUT:
                names = []
                for k, v in enumerate(lab.args):
                    slot = f"arg_store_{k}_{lab.fid}_{j}"
                    ep.arg_slots[(k, lab.fid, j)] = slot
                    globs.append((slot, 1))
                    names.append(f"a{k}")
                    if type(v) is Capability:
                        prov.add(v, slot)
                helper(f"saveArgs_{lab.fid}_{j}", names,
                       [Assign(AddrOf(ep.arg_slots[(k, lab.fid, j)]), Var(f"a{k}")) for k in range(len(names))])
            pending = [(a, v) for a, v in lab.mem if type(v) is Capability]
            reads = []
            while pending:
                rest = []
                for a, v in pending:
                    ptr = prov.pointer_to(a)
                    if ptr is None:
                        rest.append((a, v))
                        continue
                    slot = f"snapshot_{j}_{a}"
                    ep.snapshot_slots[(j, a)] = slot
                    globs.append((slot, 1))
                    reads.append(Assign(AddrOf(slot), _read_through(ptr)))
                    prov.add(v, slot)
                if len(rest) == len(pending):
                    raise BacktransUnsupported(
                        f"shared address {rest[0][0]} is not reachable from any observed capability", j)
                pending = rest
            if reads:
                helper(f"saveSnapshot_{j}", [], reads)
                snapshot_fn[j] = f"saveSnapshot_{j}"
            prev_nalloc = lab.nalloc
            continue
        if lab.kind == TICK and (alpha[j - 1].kind in (CALL_IN, RET_IN) if j else iface.has_main):
            continue  # the program exits; nothing for the context to do
        if lab.kind == TICK:
            acts[j] = [Call(BUMP_IDX), Exit()]
            continue
        items = [Call(BUMP_IDX)]
        delta = prev_nalloc - lab.nalloc
        if delta < 0:
            raise BacktransUnsupported("heap pointer moved backwards", j)
        if delta > 0:
            slot = f"alloc_block_{j}"
            block = Capability(DATA, lab.nalloc + 1, lab.nalloc + 1 + delta, 0)
            ep.alloc_slots[j] = (slot, block)
            globs.append((slot, 1))
            helper(f"doAllocations_{j}", [], [Alloc(AddrOf(slot), IntLit(delta))])
            prov.add(block, slot)
            items.append(Call(f"doAllocations_{j}"))
        writes = []
        for a, v in lab.mem:
            ptr = prov.pointer_to(a)
            if ptr is None:
                raise BacktransUnsupported(f"no observed capability authorizes writing shared address {a}", j)
            val = prov.value(v)
            if val is None:
                raise BacktransUnsupported(f"capability {v!r} stored at {a} was never observable by the context", j)
            writes.append(Assign(ptr, val))
        if writes:
            helper(f"mimicMemory_{j}", [], writes)
            items.append(Call(f"mimicMemory_{j}"))
        if lab.kind == RET_IN:
            items.append(Return())
        else:
            vals = []
            for k, v in enumerate(lab.args):
                val = prov.value(v)
                if val is None:
                    raise BacktransUnsupported(f"capability argument {v!r} was never observable by the context", j)
                vals.append(val)
            if any(not isinstance(v, IntLit) for v in vals):
                prep = [Assign(AddrOfIndex(Deref(Var("out")), IntLit(k)), v) for k, v in enumerate(vals)]
                helper(f"prepareCallIn_{j}", ["out"], prep)
                items.append(Call(f"prepareCallIn_{j}", (AddrOf("buf"),)))
                args = tuple(v if isinstance(v, IntLit) else Index(Var("buf"), IntLit(k))
                             for k, v in enumerate(vals))
            else:
                args = tuple(vals)
            items.append(("call-in", Call(lab.fid, args), j))
            items.append(("goto", "after"))
        acts[j] = items
        prev_nalloc = lab.nalloc

    callout_at = {}
    for j, lab in enumerate(alpha):
        if lab.kind == CALL_OUT:
            callout_at.setdefault(lab.fid, []).append(j)
    retouts = [j for j, lab in enumerate(alpha) if lab.kind == RET_OUT]
    max_args = max([len(l.args) for l in alpha if l.kind == CALL_IN] + [1])

    def act_label(k):
        return f"act_{k}" if k in acts else "act_end"

    def tail():
        items = [("label", "after"), Call(READ_IDX, (AddrOf("pos"),))]
        items += [("jz", BinOp("-", Var("pos"), IntLit(r)), f"ret_{r}") for r in retouts]
        items.append(STUCK_CMD)
        for r in retouts:
            items.append(("label", f"ret_{r}"))
            if r in snapshot_fn:
                items.append(Call(snapshot_fn[r]))
            items.append(("goto", act_label(r + 1)))
        for k in sorted(acts):
            items.append(("label", f"act_{k}"))
            items += acts[k]
        items += [("label", "act_end"), STUCK_CMD]
        return items

    def finish(fid, items):
        flat, calls = [], []
        for it in items:
            if isinstance(it, tuple) and it and it[0] == "call-in":
                calls.append((it[2], len([x for x in flat if not (isinstance(x, tuple) and x[0] == "label")])))
                flat.append(it[1])
            else:
                flat.append(it)
        body = assemble(flat)
        for k, idx in calls:
            ep.call_resume.setdefault(k, []).append((fid, idx + 1))
        ep.bodies[fid] = body
        return body

    locals_ = (("pos", 1), ("buf", max_args))
    modules = []
    for g, arity in sorted(iface.imports.items()):
        mid = f"Ctx_{g}"
        if mid in taken_m:
            raise BacktransUnsupported(f"module name {mid} is used by the program")
        ep.handler_of[g] = mid
        params = tuple((f"a{k}", 1) for k in range(arity))
        if g not in callout_at:
            body = (STUCK_CMD,)
            ep.bodies[g] = body
        else:
            items = [Call(READ_IDX, (AddrOf("pos"),))]
            items += [("jz", BinOp("-", Var("pos"), IntLit(j)), f"in_{j}") for j in callout_at[g]]
            items.append(STUCK_CMD)
            for j in callout_at[g]:
                items.append(("label", f"in_{j}"))
                items.append(Call(f"saveArgs_{g}_{j}", tuple(Var(f"a{k}") for k in range(arity))))
                if j in snapshot_fn:
                    items.append(Call(snapshot_fn[j]))
                items.append(("goto", act_label(j + 1)))
            body = finish(g, items + tail())
        modules.append(SModule(mid, (), (SFunction(g, params, locals_, body),)))

    if not iface.has_main:
        if not alpha:
            body = (DIVERGE_CMD,)
            ep.bodies["main"] = body
        else:
            body = finish("main", [("goto", act_label(0))] + tail())
        modules.append(SModule(MAIN_MODULE, (), (SFunction("main", (), locals_, body),)))

    for f in helpers.values():
        ep.bodies[f.fid] = f.body
    modules.append(SModule(HELPER, tuple(globs), tuple(helpers.values())))
    ep.globals = globs
    ep.context = SProgram(tuple(modules))
    return ep


def backtranslate(alpha, iface: PartInterface) -> SProgram:
    return plan(alpha, iface).context
