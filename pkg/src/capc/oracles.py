"""Executable checks: the source/target cross relation, strong and weak
similarity between target runs, emulation invariants of back-translated
contexts, and the difftest / replay / three-run drivers built on them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from . import backtrans as BT
from . import source as S
from . import target as T
from .compiler import compile_program
from .core import Capability, DATA, reachable_closure
from .syntax import CONVERGED, DIVERGED, FUEL_EXHAUSTED, STUCK, Audit
from .trace import (
    TAU, TICK, INPUTS, OUTPUTS, TraceState, is_alternating, run_trace, source_lang,
    start, target_lang, trace_step, trace_to_json,
)


@dataclass
class Report:
    case: str
    verdict: str  # "pass", "fail" or "unsupported"
    clause: Optional[str] = None
    position: Optional[int] = None
    detail: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.verdict == "pass"

    def to_dict(self):
        d = {"case": self.case, "verdict": self.verdict, "clause": self.clause, "position": self.position}
        if self.detail:
            d["detail"] = self.detail
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# -- cross relation -------------------------------------------------------------

def cross_relation_failure(s_s: S.SourceState, s_t: T.TargetState, env_t: T.TargetEnv) -> Optional[str]:
    if s_s.pc != s_t.pcc:
        return f"pc {s_s.pc} vs pcc {s_t.pcc}"
    if s_s.nalloc != s_t.nalloc:
        return f"nalloc {s_s.nalloc} vs {s_t.nalloc}"
    if s_s.phi != s_t.phi:
        return "module stack pointers differ"
    if s_s.mem != s_t.mem:
        diff = sorted(a for a in set(s_s.mem) | set(s_t.mem) if s_s.mem.get(a, None) != s_t.mem.get(a, None))
        return f"memories differ at {diff[:5]}"
    lay = env_t.layout
    for m, (b, e) in lay.data.items():
        if s_t.mddc[m] != Capability(DATA, b, e, 0):
            return f"mddc of {m} altered"
        sb, se = lay.stack[m]
        if s_t.mstc[m] != Capability(DATA, sb, se, s_t.phi[m]):
            return f"mstc of {m} out of step with its stack pointer"
    mid = env_t.mid_of[s_t.pcc[0]]
    if s_t.ddc != s_t.mddc[mid] or s_t.stc != s_t.mstc[mid]:
        return f"ddc/stc do not belong to the running module {mid}"
    if len(s_s.stk) != len(s_t.stk):
        return "control stacks differ in depth"
    view = dict(s_s.phi)
    for k in range(len(s_s.stk) - 1, -1, -1):
        fs, ft = s_s.stk[k], s_t.stk[k]
        if (fs.ret_fid, fs.ret_idx) != ft.ret_pcc or fs.callee_mid != ft.callee_mid \
                or fs.saved_phi != ft.saved_phi:
            return f"control frame {k} misaligned"
        view[fs.callee_mid] = fs.saved_phi
        sb, se = lay.stack[fs.caller_mid]
        if ft.saved_ddc != s_t.mddc[fs.caller_mid] or \
                ft.saved_stc != Capability(DATA, sb, se, view[fs.caller_mid]):
            return f"control frame {k} saved registers misaligned"
    return None


def check_cross_relation(s_s, s_t, env_t) -> bool:
    return cross_relation_failure(s_s, s_t, env_t) is None


# -- similarity -----------------------------------------------------------------

def _owned(env, fid, part):
    return env.mid_of[fid] in part


def _frame_view(env, fr, part):
    into_part = fr.callee_mid in part
    return (fr.ret_pcc, fr.saved_ddc, fr.saved_stc, into_part, fr.saved_phi if into_part else None)


def _program_frames(ts):
    env, part = ts.env, ts.part
    return [(k, _frame_view(env, fr, part)) for k, fr in enumerate(ts.st.stk) if _owned(env, fr.ret_pcc[0], part)]


def stack_correspondence(t1: TraceState, t2: TraceState):
    """The index map between program-pushed frames, or None if none exists."""
    a, b = _program_frames(t1), _program_frames(t2)
    if len(a) != len(b):
        return None
    mapping = {}
    for (i, va), (j, vb) in zip(a, b):
        if va != vb:
            return None
        mapping[i] = j
    for i, j in mapping.items():
        if (i + 1 in mapping) != (j + 1 in mapping.values()):
            return None
        if i + 1 in mapping and mapping[i + 1] != j + 1:
            return None
    return mapping


def _private_reachable(ts, shared):
    mem = ts.st.mem
    roots = ts.env.layout.static_addresses(ts.part) - shared
    seen = set(roots)
    work = list(seen)
    while work:
        v = mem.get(work.pop())
        if type(v) is Capability:
            for a in range(v.start, v.end):
                if a not in seen and a not in shared:
                    seen.add(a)
                    work.append(a)
    return seen


def weak_similarity_failure(t1: TraceState, t2: TraceState) -> Optional[str]:
    if t1.shared != t2.shared:
        return "shared sets differ"
    part = t1.part
    for m in part:
        if t1.st.phi[m] != t2.st.phi[m]:
            return f"stack pointer of program module {m} differs"
    if stack_correspondence(t1, t2) is None:
        return "no stack correspondence between program frames"
    r1 = _private_reachable(t1, t1.shared)
    r2 = _private_reachable(t2, t2.shared)
    if r1 != r2:
        return "private reachable regions differ"
    m1, m2 = t1.st.mem, t2.st.mem
    for a in r1:
        if m1.get(a) != m2.get(a):
            return f"private cell {a} differs"
    return None


def strong_similarity_failure(t1: TraceState, t2: TraceState) -> Optional[str]:
    why = weak_similarity_failure(t1, t2)
    if why:
        return why
    if t1.st.nalloc != t2.st.nalloc:
        return "heap pointers differ"
    p1, p2 = t1.in_program(), t2.in_program()
    if p1 != p2:
        return "one run is in the program, the other in the context"
    if p1 and t1.st.pcc != t2.st.pcc:
        return f"program counters differ: {t1.st.pcc} vs {t2.st.pcc}"
    s1, s2 = t1.st.stk, t2.st.stk
    if bool(s1) != bool(s2):
        return "one control stack is empty"
    if s1:
        top1 = _owned(t1.env, s1[-1].ret_pcc[0], t1.part)
        top2 = _owned(t2.env, s2[-1].ret_pcc[0], t2.part)
        if top1 != top2:
            return "top frames are not in correspondence"
    static = t1.env.layout.static_addresses(t1.part)
    r1 = reachable_closure(static, t1.st.mem)
    r2 = reachable_closure(static, t2.st.mem)
    if r1 != r2:
        return "reachable regions differ"
    m1, m2 = t1.st.mem, t2.st.mem
    for a in r1:
        if m1.get(a) != m2.get(a):
            return f"reachable cell {a} differs"
    return None


def check_weak_similarity(t1, t2) -> bool:
    return weak_similarity_failure(t1, t2) is None


def check_strong_similarity(t1, t2) -> bool:
    return strong_similarity_failure(t1, t2) is None


# -- emulation invariants -------------------------------------------------------

def _global(env: S.SourceEnv, st, vid):
    lo, _ = env.layout.beta[(vid, None, BT.HELPER)]
    return st.mem[env.layout.data[BT.HELPER][0] + lo]


def emulation_invariant_failure(env: S.SourceEnv, st: S.SourceState, ep: BT.EmuPlan, i: int) -> Optional[str]:
    alpha = ep.alpha
    if i >= len(alpha) or alpha[i].kind in OUTPUTS:
        return None
    if alpha[i].kind == TICK and (alpha[i - 1].kind in INPUTS if i else ep.iface.has_main):
        return None
    fid, idx = st.pc
    if i == 0:
        allowed = [("main", 0)]
    else:
        prev = alpha[i - 1]
        if prev.kind == "call_out":
            allowed = [(prev.fid, 0)]
        else:
            allowed = ep.call_resume.get(ep.matching_call.get(i - 1), [])
    if (fid, idx) not in allowed:
        return f"emulating context resumes at {fid}:{idx}, expected one of {allowed}"
    gen = ep.bodies.get(fid)
    if gen is None or tuple(env.funcs[fid].body[idx:]) != tuple(gen[idx:]):
        return f"upcoming commands of {fid} differ from the generated code"
    want_idx = i - 1 if i else 0
    if _global(env, st, BT.IDX) != want_idx:
        return f"current_trace_idx is {_global(env, st, BT.IDX)}, expected {want_idx}"
    for (k, g, j), slot in ep.arg_slots.items():
        if j < i - 1 and _global(env, st, slot) != alpha[j].args[k]:
            return f"{slot} does not hold argument {k} of position {j}"
    for (j, a), slot in ep.snapshot_slots.items():
        if j < i - 1 and _global(env, st, slot) != alpha[j].mem_dict()[a]:
            return f"{slot} does not hold the snapshot of address {a}"
    for k, (slot, block) in ep.alloc_slots.items():
        if k < i and _global(env, st, slot) != block:
            return f"{slot} does not hold the block allocated at position {k}"
    return None


def check_emulation_invariants(env, st, ep, i) -> bool:
    return emulation_invariant_failure(env, st, ep, i) is None


# -- drivers ---------------------------------------------------------------------

def _part_of(p, part):
    if part is not None:
        return frozenset(part)
    from .trace import _default_part
    return _default_part(p)


def difftest_whole(p: S.SProgram, fuel: int, part=None, case="difftest", cross=True, nabla=None) -> Report:
    """Run p and its compilation side by side; compare statuses and traces."""
    part = _part_of(p, part)
    if p.part is None:
        p = S.SProgram(p.modules, part)
    img = compile_program(p) if nabla is None else compile_program(p, nabla=nabla)
    ts = start(p, part, nabla, source_lang())
    tt = start(img, part, nabla, target_lang())
    la, lb = [], []
    status = FUEL_EXHAUSTED
    for n in range(fuel):
        a = trace_step(ts)
        b = trace_step(tt)
        if (a is None) != (b is None) or (a is not None and a != b):
            return Report(case, "fail", "trace-parity", n, f"source {a!r} vs target {b!r}")
        if a is None:
            status = DIVERGED
            break
        if a.kind != TAU:
            la.append(a)
            lb.append(b)
        if a.kind == TICK:
            status = CONVERGED
            break
        if cross:
            why = cross_relation_failure(ts.st, tt.st, tt.env)
            if why:
                return Report(case, "fail", "cross-relation", n, why)
    if not is_alternating(la):
        return Report(case, "fail", "alternation", None, repr(la))
    if trace_to_json(la) != trace_to_json(lb):
        return Report(case, "fail", "trace-parity", None, "serialized traces differ")
    return Report(case, "pass", extra={"status": status, "trace": la, "steps": n + 1})


def replay_check(alpha, p: S.SProgram, fuel: int, case="replay", invariants=True) -> Report:
    """Back-translate alpha against p and check the replay reproduces it exactly."""
    try:
        ep = BT.plan(alpha, BT.interface_of(p, alpha))
    except BT.BacktransUnsupported as e:
        return Report(case, "unsupported", "backtranslation", e.position, e.reason)
    except BT.NonAlternating as e:
        return Report(case, "fail", "alternation", None, str(e))
    whole = S.link_src(ep.context, p)
    ts = start(whole, frozenset(p.mids()), lang=source_lang())
    got = []
    bad = []

    def watch(t, lab):
        if lab is not None and lab.kind != TAU:
            got.append(lab)
            if invariants and lab.kind in OUTPUTS:
                why = emulation_invariant_failure(t.env, t.st, ep, len(got))
                if why and not bad:
                    bad.append((len(got), why))

    if invariants and alpha and not ep.iface.has_main:
        why = emulation_invariant_failure(ts.env, ts.st, ep, 0)
        if why:
            return Report(case, "fail", "emulation-invariants", 0, why)
    run_trace(ts, fuel, watch)
    if bad:
        return Report(case, "fail", "emulation-invariants", bad[0][0], bad[0][1])
    if got != list(alpha):
        pos = next((k for k, (x, y) in enumerate(zip(got, alpha)) if x != y), min(len(got), len(alpha)))
        return Report(case, "fail", "trace-equality", pos, f"replayed {got[pos:pos + 1]} vs {list(alpha)[pos:pos + 1]}")
    return Report(case, "pass", extra={"size": ep.size(), "alpha": len(alpha)})


class _Pair:
    """The emulating source run and its compilation (the mediator), in lock-step."""

    def __init__(self, e: TraceState, m: TraceState):
        self.e, self.m = e, m

    def step(self):
        le = trace_step(self.e)
        lm = trace_step(self.m)
        return le, lm


def tricl_check(ctx_t: T.TProgram, p: S.SProgram, fuel: int, case="tricl") -> Report:
    """Given, emulating and mediator runs checked against each other per border."""
    part = frozenset(p.mids())
    try:
        given_img = T.link_trg(ctx_t, compile_program(p))
    except T.PccMentioned as e:
        return Report(case, "fail", "link-check", None, str(e))
    alpha, _ = run_trace(start(given_img, part, lang=target_lang()), fuel)
    if not is_alternating(alpha):
        return Report(case, "fail", "alternation", None, repr(alpha))
    try:
        ep = BT.plan(alpha, BT.interface_of(p, alpha))
    except BT.BacktransUnsupported as e:
        return Report(case, "unsupported", "backtranslation", e.position, e.reason)
    emu = S.link_src(ep.context, p)
    g = start(given_img, part, lang=target_lang())
    e = start(emu, part, lang=source_lang())
    m = start(compile_program(emu), part, lang=target_lang())
    pair = _Pair(e, m)
    budget = {"g": fuel, "m": 2 * fuel + 100 * (len(alpha) + 1) + sum(len(l.mem) for l in alpha) * 4}

    def fail(clause, pos, why):
        return Report(case, "fail", clause, pos, why)

    why = cross_relation_failure(e.st, m.st, m.env)
    if why:
        return fail("cross-relation", 0, why)
    i = 0
    phase = "program" if g.in_program() else "context"
    while True:
        if budget["g"] <= 0 or budget["m"] <= 0:
            return Report(case, "pass", detail="fuel exhausted", extra={"alpha": alpha, "position": i})
        if phase == "program":
            why = strong_similarity_failure(m, g)
            if why:
                return fail("strong-similarity", i, why)
            lg = trace_step(g)
            le, lm = pair.step()
            budget["g"] -= 1
            budget["m"] -= 1
            why = cross_relation_failure(e.st, m.st, m.env) if lm is not None else None
            if why:
                return fail("cross-relation", i, why)
            if lg is None:
                if lm is not None or le is not None:
                    return fail("lock-step", i, "given run stuck, mediator went on")
                break
            if lm is None or lg.kind != lm.kind or (lg.kind != TAU and lg != lm) or lm != le:
                return fail("lock-step", i, f"given {lg!r} vs mediator {lm!r}")
            if lg.kind == TAU:
                continue
            if i >= len(alpha) or lg != alpha[i]:
                return fail("label-agreement", i, repr(lg))
            i += 1
            if lg.kind == TICK:
                break
            why = weak_similarity_failure(m, g)
            if why:
                return fail("weakening", i - 1, why)
            phase = "context"
            continue
        # context phase
        why = emulation_invariant_failure(e.env, e.st, ep, i)
        if why:
            return fail("emulation-invariants", i, why)
        why = weak_similarity_failure(m, g)
        if why:
            return fail("weak-similarity", i, why)
        while g.done is None and not g.next_is_border() and budget["g"] > 0:
            lab = trace_step(g)
            budget["g"] -= 1
            if lab is None:
                break
            why = weak_similarity_failure(m, g)
            if why:
                return fail("option-simulation", i, "given step: " + why)
        while m.done is None and not m.next_is_border() and budget["m"] > 0:
            le, lm = pair.step()
            budget["m"] -= 1
            if lm is None:
                break
            why = cross_relation_failure(e.st, m.st, m.env)
            if why:
                return fail("cross-relation", i, why)
            why = weak_similarity_failure(m, g)
            if why:
                return fail("option-simulation", i, "mediator step: " + why)
        if budget["g"] <= 0 or budget["m"] <= 0:
            continue
        lg = trace_step(g) if g.done is None else None
        if lg is None:
            # the given context stopped producing labels; so must the mediator
            while budget["m"] > 0:
                le, lm = pair.step()
                budget["m"] -= 1
                if lm is None:
                    break
                if lm.kind != TAU:
                    return fail("no-trace-added", i, f"mediator emitted {lm!r} after the given run stopped")
            break
        budget["g"] -= 1
        le, lm = pair.step()
        budget["m"] -= 1
        if lm is None or lm != lg or le != lm:
            return fail("label-agreement", i, f"given {lg!r} vs mediator {lm!r} vs emulating {le!r}")
        if i >= len(alpha) or lg != alpha[i]:
            return fail("label-agreement", i, repr(lg))
        why = cross_relation_failure(e.st, m.st, m.env)
        if why:
            return fail("cross-relation", i, why)
        i += 1
        if lg.kind == TICK:
            break
        why = strong_similarity_failure(m, g)
        if why:
            return fail("strengthening", i - 1, why)
        phase = "program"
    if i != len(alpha):
        return fail("label-agreement", i, f"only {i} of {len(alpha)} labels reproduced")
    return Report(case, "pass", extra={"alpha": alpha, "size": ep.size()})


# -- audits ----------------------------------------------------------------------

class SafetyAudit(Audit):
    """Collects spatial-safety and provenance violations during a run.

    Every successful access must be through a data capability whose bounds
    contain the address; every stored capability must lie inside the initial
    image or some allocated block; a stuck step must not have written memory.
    """

    def __init__(self, initial_ranges):
        super().__init__()
        self.ranges = list(initial_ranges)
        self.violations = []
        self.accesses_seen = 0
        self.caps_seen = 0

    def access(self, kind, cap, addr):
        self.accesses_seen += 1
        if cap.kind != DATA or not (cap.start <= addr < cap.end) or addr != cap.start + cap.offset:
            self.violations.append(f"{kind} at {addr} through {cap!r}")

    def write(self, addr, value):
        self.writes += 1
        if type(value) is Capability:
            self.check_cap(value)

    def mint(self, lo, hi):
        self.ranges.append((lo, hi))

    def check_cap(self, c):
        self.caps_seen += 1
        if not any(lo <= c.start and c.end <= hi for lo, hi in self.ranges):
            self.violations.append(f"capability {c!r} outside every minted range")


def audited_run(program, part, fuel, lang=None):
    """Run with a SafetyAudit attached; returns (audit, trace, status)."""
    from .trace import lang_for
    lang = lang or lang_for(program)
    probe = start(program, part, lang=lang)
    audit = SafetyAudit(probe.env.layout.initial_ranges())
    ts = start(program, part, lang=lang, audit=audit)
    before = [0]

    def watch(t, lab):
        if lab is None and audit.writes != before[0]:
            audit.violations.append("stuck step wrote memory: " + t.reason)
        before[0] = audit.writes
        if lab is not None:
            for v in lab.args:
                if type(v) is Capability:
                    audit.check_cap(v)
            for _, v in lab.mem:
                if type(v) is Capability:
                    audit.check_cap(v)
        if type(getattr(t.st, "ddc", None)) is Capability:
            audit.check_cap(t.st.ddc)
            audit.check_cap(t.st.stc)

    alpha, status = run_trace(ts, fuel, watch)
    return audit, alpha, status


def stuck_step_is_pure(program, fuel, lang=None) -> Optional[bool]:
    """If the run gets stuck, does the faulting step leave the state untouched?

    Returns None when the run does not get stuck within fuel.
    """
    from .trace import lang_for
    from .syntax import NEXT
    lang = lang or lang_for(program)
    env, st = lang.init(program)
    for _ in range(fuel):
        before = st.copy()
        res = lang.step(env, st)
        if res.status == STUCK:
            return st == before
        if res.status != NEXT:
            return None
    return None
