"""Labelled execution: border-crossing detection, shared-memory snapshots,
compression and the alternation check. Works for either language."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Set, Tuple

from .core import Capability, CODE, DATA, cap_footprint, reachable_closure
from .syntax import (
    CONVERGED, DIVERGED, FUEL_EXHAUSTED, STUCK, TERMINAL, Call, Return, Exit,
)

TAU = "tau"
TICK = "tick"
CALL_IN = "call_in"
CALL_OUT = "call_out"
RET_IN = "ret_in"
RET_OUT = "ret_out"

INPUTS = (CALL_IN, RET_IN)
OUTPUTS = (CALL_OUT, RET_OUT)


@dataclass(frozen=True)
class Label:
    kind: str
    fid: Optional[str] = None
    args: Tuple = ()
    mem: Tuple[Tuple[int, object], ...] = ()
    nalloc: Optional[int] = None

    @property
    def is_input(self):
        return self.kind in INPUTS

    @property
    def is_output(self):
        return self.kind in OUTPUTS

    def mem_dict(self):
        return dict(self.mem)

    def __repr__(self):
        if self.kind in (TAU, TICK):
            return "τ" if self.kind == TAU else "✓"
        mark = "?" if self.is_input else "!"
        head = f"call {self.fid} {list(self.args)}" if self.fid is not None else "ret"
        return f"{head}{mark} |mem|={len(self.mem)} nalloc={self.nalloc}"


TAU_LABEL = Label(TAU)
TICK_LABEL = Label(TICK)


def call_in(fid, args, mem, nalloc):
    return Label(CALL_IN, fid, tuple(args), tuple(sorted(mem.items())), nalloc)


def call_out(fid, args, mem, nalloc):
    return Label(CALL_OUT, fid, tuple(args), tuple(sorted(mem.items())), nalloc)


def ret_in(mem, nalloc):
    return Label(RET_IN, None, (), tuple(sorted(mem.items())), nalloc)


def ret_out(mem, nalloc):
    return Label(RET_OUT, None, (), tuple(sorted(mem.items())), nalloc)


# -- language adapters ---------------------------------------------------------

class Lang:
    """The few operations the trace machinery needs from an interpreter."""

    def __init__(self, name, init, step):
        self.name = name
        self.init = init
        self.step = step


def source_lang():
    from . import source
    return Lang("src", source.init_src, source.step)


def target_lang():
    from . import target
    return Lang("trg", target.init_trg, target.step_trg)


def lang_for(program):
    from .source import SProgram
    return source_lang() if isinstance(program, SProgram) else target_lang()


class TraceState:
    """A machine state extended with the shared set and an ownership partition."""

    def __init__(self, lang, env, st, part: FrozenSet[str], shared: Optional[Set[int]] = None):
        self.lang = lang
        self.env = env
        self.st = st
        self.part = frozenset(part)
        self.shared = set() if shared is None else shared
        self.done = None  # CONVERGED / DIVERGED once the run has ended
        self.reason = ""

    def in_program(self, fid=None) -> bool:
        return self.env.mid_of[fid or self.st.pc[0]] in self.part

    @property
    def side(self):
        return "program" if self.in_program() else "context"

    def next_command(self):
        fid, idx = self.st.pc
        body = self.env.body(fid)
        return body[idx] if idx < len(body) else None

    def next_is_border(self) -> bool:
        """Would the next step emit a non-τ label (assuming it succeeds)?"""
        cmd = self.next_command()
        if isinstance(cmd, Exit):
            return True
        if isinstance(cmd, Call):
            f = self.env.mid_of.get(cmd.fid)
            return f is not None and (f in self.part) != self.in_program()
        if isinstance(cmd, Return) and self.st.stk:
            ret = self.st.stk[-1][0]
            ret_fid = ret if isinstance(ret, str) else ret[0]
            return self.in_program(ret_fid) != self.in_program()
        return False

    def copy(self):
        t = TraceState(self.lang, self.env, self.st.copy(), self.part, set(self.shared))
        t.done, t.reason = self.done, self.reason
        return t


def _shared_mem(mem, shared):
    return {a: mem[a] for a in shared if a in mem}


def trace_step(ts: TraceState) -> Optional[Label]:
    """Take one step; return the emitted label, or None if the run got stuck.

    The state is advanced in place.
    """
    if ts.done == CONVERGED:
        return TICK_LABEL
    if ts.done is not None:
        return None
    cmd = ts.next_command()
    was_program = ts.in_program()
    res = ts.lang.step(ts.env, ts.st)
    if res.status == STUCK:
        ts.done, ts.reason = DIVERGED, res.reason
        return None
    if res.status == TERMINAL:
        ts.done = CONVERGED
        return TICK_LABEL
    now_program = ts.in_program()
    if was_program == now_program:
        return TAU_LABEL
    st = ts.st
    if isinstance(cmd, Call):
        shared = reachable_closure(ts.shared | cap_footprint(res.args), st.mem)
        ts.shared = shared
        make = call_in if now_program else call_out
        return make(cmd.fid, res.args, _shared_mem(st.mem, shared), st.nalloc)
    shared = reachable_closure(ts.shared, st.mem)
    ts.shared = shared
    make = ret_in if now_program else ret_out
    return make(_shared_mem(st.mem, shared), st.nalloc)


def compress(run: List[Label]) -> List[Label]:
    out = [l for l in run if l.kind != TAU]
    while len(out) >= 2 and out[-1].kind == TICK and out[-2].kind == TICK:
        out.pop()
    return out


def start(program, part, nabla=None, lang=None, audit=None) -> TraceState:
    lang = lang or lang_for(program)
    kw = {} if nabla is None else {"nabla": nabla}
    env, st = lang.init(program, audit=audit, **kw)
    return TraceState(lang, env, st, part)


def run_trace(ts: TraceState, fuel: int, on_step=None):
    """Run up to fuel steps collecting non-τ labels. Returns (trace, status)."""
    labels = []
    for _ in range(fuel):
        lab = trace_step(ts)
        if on_step is not None:
            on_step(ts, lab)
        if lab is None:
            return labels, DIVERGED
        if lab.kind != TAU:
            labels.append(lab)
        if lab.kind == TICK:
            return labels, CONVERGED
    return labels, FUEL_EXHAUSTED


def traces_of(whole, part, fuel: int, nabla=None, audit=None):
    """Compressed trace of the run of whole with the given program side."""
    part = frozenset(part) if part is not None else _default_part(whole)
    return run_trace(start(whole, part, nabla, audit=audit), fuel)[0]


def traces_with_status(whole, part, fuel: int, nabla=None, audit=None):
    part = frozenset(part) if part is not None else _default_part(whole)
    return run_trace(start(whole, part, nabla, audit=audit), fuel)


def _default_part(whole):
    if whole.part is not None:
        return whole.part
    mids = whole.mids()
    main_mid = next((m for m, f in whole.functions() if f.fid == "main"), None)
    rest = [m for m in mids if m != main_mid]
    return frozenset(rest or mids)


def is_alternating(alpha) -> bool:
    labels = list(alpha)
    while labels and labels[-1].kind == TICK:
        labels.pop()
    prev = None
    for l in labels:
        if l.kind not in INPUTS + OUTPUTS:
            return False
        d = l.is_input
        if prev is not None and d == prev:
            return False
        prev = d
    return True


# -- JSON -----------------------------------------------------------------------

def value_to_json(v):
    if type(v) is Capability:
        return {"cap": {"t": v.kind, "start": str(v.start), "end": str(v.end), "off": str(v.offset)}}
    return {"int": str(v)}


def value_from_json(d):
    if "int" in d:
        return int(d["int"])
    c = d["cap"]
    if c["t"] not in (CODE, DATA):
        raise ValueError(f"bad capability tag {c['t']!r}")
    return Capability(c["t"], int(c["start"]), int(c["end"]), int(c["off"]))


def label_to_json(l: Label):
    d = {"kind": l.kind}
    if l.kind == TICK:
        return d
    if l.fid is not None:
        d["fid"] = l.fid
        d["args"] = [value_to_json(v) for v in l.args]
    d["mem"] = [[str(a), value_to_json(v)] for a, v in l.mem]
    d["nalloc"] = str(l.nalloc)
    return d


def label_from_json(d) -> Label:
    kind = d["kind"]
    if kind == TICK:
        return TICK_LABEL
    if kind not in INPUTS + OUTPUTS:
        raise ValueError(f"unknown label kind {kind!r}")
    mem = tuple(sorted((int(a), value_from_json(v)) for a, v in d["mem"]))
    args = tuple(value_from_json(v) for v in d.get("args", []))
    return Label(kind, d.get("fid"), args, mem, int(d["nalloc"]))


def trace_to_json(alpha) -> str:
    return json.dumps({"labels": [label_to_json(l) for l in alpha]}, sort_keys=True)


def trace_from_json(text: str):
    return [label_from_json(d) for d in json.loads(text)["labels"]]
