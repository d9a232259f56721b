import dataclasses

import pytest

from capc import backtrans as BT, corpus, oracles as O, source as S, target as T
from capc.compiler import compile_program
from capc.fuzz import pair_corpus
from capc.syntax import Assign, IntLit
from capc.trace import OUTPUTS, TAU, start, trace_step, traces_of


@pytest.fixture
def golden_img(listing_main, stub):
    return T.link_trg(stub, compile_program(listing_main))


def after_first_output(img):
    ts = start(img, {"Main"})
    while True:
        lab = trace_step(ts)
        if lab.kind in OUTPUTS:
            return ts


def test_weak_similarity_examples(golden_img):
    t1 = after_first_output(golden_img)
    t2 = t1.copy()
    assert O.check_weak_similarity(t1, t2)
    t2.st.mem[0] = 77  # shared: iobuffer[0]
    assert O.check_weak_similarity(t1, t2)
    t3 = t1.copy()
    t3.st.mem[512] = 1  # Main.secret, private and reachable
    assert not O.check_weak_similarity(t1, t3)


def test_strong_similarity_examples(golden_img):
    t1 = after_first_output(golden_img)
    t2 = t1.copy()
    assert O.check_strong_similarity(t1, t2)
    t2.st.mem[0] = 77
    assert not O.check_strong_similarity(t1, t2)
    t3 = t1.copy()
    net_stack = t3.env.layout.stack["Networking"][0]
    t3.st.mem[net_stack + 100] = 5  # context-private
    assert O.check_strong_similarity(t1, t3)


def test_similarity_reflexive_symmetric_and_strong_implies_weak(golden_img):
    base = after_first_output(golden_img)
    variants = [base.copy() for _ in range(4)]
    variants[1].st.mem[3] = 1
    variants[2].st.mem[512] = 9
    variants[3].st.mem[golden_img.layout().stack["Networking"][0]] = 4
    for a in variants:
        assert O.check_weak_similarity(a, a) and O.check_strong_similarity(a, a)
        for b in variants:
            assert O.check_weak_similarity(a, b) == O.check_weak_similarity(b, a)
            assert O.check_strong_similarity(a, b) == O.check_strong_similarity(b, a)
            if O.check_strong_similarity(a, b):
                assert O.check_weak_similarity(a, b)


def test_weak_similarity_survives_one_sided_context_steps(golden_img):
    # option simulation: only one run moves while the context executes
    t1 = after_first_output(golden_img)
    t2 = t1.copy()
    for _ in range(200):
        assert trace_step(t2).kind == TAU
        assert O.check_weak_similarity(t1, t2)


def test_stack_frames_must_correspond(golden_img):
    t1 = after_first_output(golden_img)
    t2 = t1.copy()
    fr = t2.st.stk[-1]
    t2.st.stk[-1] = fr._replace(ret_pcc=(fr.ret_pcc[0], fr.ret_pcc[1] + 1))
    assert not O.check_weak_similarity(t1, t2)


def replay_states(alpha, p):
    """Source states of the emulating run right at each input border."""
    ep = BT.plan(alpha, BT.interface_of(p, alpha))
    ts = start(S.link_src(ep.context, p), frozenset(p.mids()))
    states = {}
    n = 0
    if not ep.iface.has_main:
        states[0] = ts.copy()
    for _ in range(1_000_000):
        lab = trace_step(ts)
        if lab is None or lab.kind == "tick":
            break
        if lab.kind != TAU:
            n += 1
            if lab.kind in OUTPUTS:
                states[n] = ts.copy()
    return ep, states


def test_emulation_invariants_hold_on_replay(golden_img, listing_main):
    alpha = traces_of(golden_img, {"Main"}, 100_000)
    ep, states = replay_states(alpha, listing_main)
    assert states
    for i, ts in states.items():
        assert O.check_emulation_invariants(ts.env, ts.st, ep, i)


def test_emulation_invariants_detect_corruption(golden_img, listing_main):
    alpha = traces_of(golden_img, {"Main"}, 100_000)
    ep, states = replay_states(alpha, listing_main)
    ts = states[1]
    lo, _ = ts.env.layout.beta[("current_trace_idx", None, BT.HELPER)]
    ts.st.mem[ts.env.layout.data[BT.HELPER][0] + lo] += 1
    assert not O.check_emulation_invariants(ts.env, ts.st, ep, 1)


def test_emulation_invariants_vacuous_at_outputs(golden_img, listing_main):
    alpha = traces_of(golden_img, {"Main"}, 100_000)
    ep, states = replay_states(alpha, listing_main)
    ts = states[1]
    ts.st.pc = ("send_rcv", 3)  # nonsense, but position 0 is an output
    assert O.check_emulation_invariants(ts.env, ts.st, ep, 0)


def test_emulation_invariants_on_pair_corpus():
    for case in pair_corpus(3, 10):
        img = T.link_trg(case.context, compile_program(case.program))
        alpha = traces_of(img, case.program.mids(), 10_000)
        try:
            ep, states = replay_states(alpha, case.program)
        except BT.BacktransUnsupported:
            continue
        for i, ts in states.items():
            assert O.check_emulation_invariants(ts.env, ts.st, ep, i), case.name


def test_difftest_and_replay_on_golden(whole_main, golden_img, listing_main):
    assert O.difftest_whole(whole_main, 10_000).ok
    alpha = traces_of(golden_img, {"Main"}, 100_000)
    assert O.replay_check(alpha, listing_main, 1_000_000).ok


def test_replay_against_a_different_program_fails(golden_img, listing_main):
    alpha = traces_of(golden_img, {"Main"}, 100_000)
    other = S.parse_source(S.print_source(listing_main).replace("4242", "4243"))
    rep = O.replay_check(alpha, other, 1_000_000)
    assert rep.verdict == "fail" and rep.clause == "trace-equality" and rep.position == 0


def test_difftest_catches_a_miscompilation(whole_main, monkeypatch):
    real = O.compile_program

    def off_by_one(p, *a, **kw):
        img = real(p, *a, **kw)
        mods = []
        for m in img.modules:
            funs = []
            for f in m.functions:
                body = tuple(Assign(c.lhs, IntLit(4243)) if isinstance(c, Assign) and c.rhs == IntLit(4242) else c
                             for c in f.body)
                funs.append(dataclasses.replace(f, body=body))
            mods.append(dataclasses.replace(m, functions=tuple(funs)))
        return dataclasses.replace(img, modules=tuple(mods))

    monkeypatch.setattr(O, "compile_program", off_by_one)
    rep = O.difftest_whole(whole_main, 10_000)
    assert rep.verdict == "fail" and rep.clause == "cross-relation"


def test_tricl_golden(stub, listing_main):
    rep = O.tricl_check(stub, listing_main, 100_000)
    assert rep.ok, rep.to_json()


def test_tricl_tolerates_private_garbage(listing_main):
    garbage = T.parse_target("""
(layout (module Networking (data 0 4) (stack 4 260)))
(program (module Networking
  (fun send_rcv (params 0) (frame 2)
    (body (assign (getddc) 17) (assign (inc (getddc) 3) (getstc)) (assign (inc (getstc) 1) -5)
          (assign (deref (inc (getstc) 0)) 9) (return)))))""")
    rep = O.tricl_check(garbage, listing_main, 100_000)
    assert rep.ok, rep.to_json()


def test_tricl_rejects_pcc_reading_context(listing_main):
    rep = O.tricl_check(corpus.load_target("evil_pcc.cap"), listing_main, 1000)
    assert rep.verdict == "fail" and rep.clause == "link-check"


def test_tricl_on_pair_corpus():
    for case in pair_corpus(21, 10):
        rep = O.tricl_check(case.context, case.program, 10_000, case=case.name)
        assert rep.verdict in ("pass", "unsupported"), rep.to_json()


def test_report_json_shape():
    rep = O.Report("c", "fail", "strong-similarity", 2)
    assert rep.to_json() == '{"case": "c", "clause": "strong-similarity", "position": 2, "verdict": "fail"}'


def test_safety_audit_clean_on_golden(golden_img):
    audit, alpha, status = O.audited_run(golden_img, {"Main"}, 100_000)
    assert audit.violations == [] and audit.accesses_seen > 0 and status == "converged"


def test_safety_audit_flags_forged_capability(golden_img):
    from capc.core import Capability, DATA
    audit = O.SafetyAudit([(0, 10)])
    audit.check_cap(Capability(DATA, 5, 20, 0))
    assert audit.violations
