import pytest
from hypothesis import given, settings, strategies as st

from capc import source as S, target as T
from capc.compiler import compile_program
from capc.core import Capability, DATA
from capc.fuzz import pair_corpus
from capc.trace import (
    CALL_IN, CALL_OUT, RET_IN, RET_OUT, TAU, TICK, TAU_LABEL, TICK_LABEL,
    call_in, call_out, compress, is_alternating, ret_in, ret_out, run_trace, start,
    trace_from_json, trace_step, trace_to_json, traces_of, label_to_json,
)


def golden_image(listing_main, stub):
    return T.link_trg(stub, compile_program(listing_main))


def test_golden_trace(listing_main, stub):
    img = golden_image(listing_main, stub)
    sigma = img.layout().data["Main"][0]
    alpha = traces_of(img, {"Main"}, 100_000)
    assert [l.kind for l in alpha] == [CALL_OUT, RET_IN, TICK]
    out, back = alpha[0], alpha[1]
    assert out.fid == "send_rcv"
    assert out.args == (Capability(DATA, sigma, sigma + 512, 0),)
    assert out.nalloc == -1 and back.nalloc == -1
    sent = out.mem_dict()
    assert set(sent) == set(range(sigma, sigma + 512))
    assert sent[sigma + 42] == 4242 and sum(1 for v in sent.values() if v != 0) == 1
    assert back.mem_dict() == {a: 0 for a in range(sigma, sigma + 512)}


def test_source_and_target_traces_agree(whole_main):
    part = {"Main"}
    assert traces_of(whole_main, part, 100_000) == traces_of(compile_program(whole_main), part, 100_000)


def test_whole_trace_golden_in_source(listing_main):
    from capc import corpus
    linked = S.link_src(corpus.load_source("networking.imp"), listing_main)
    src = traces_of(linked, None, 100_000)
    assert [l.kind for l in src] == [CALL_OUT, RET_IN, TICK]


def test_compress_examples():
    co = call_out("f", [], {}, -1)
    ri = ret_in({}, -1)
    assert compress([TAU_LABEL, TAU_LABEL, co, TAU_LABEL, ri]) == [co, ri]
    assert compress([TAU_LABEL, TAU_LABEL]) == []
    assert compress([co, TICK_LABEL, TICK_LABEL]) == [co, TICK_LABEL]


def test_alternation_examples():
    ci = call_in("f", [3], {}, -1)
    assert is_alternating([ci, ret_out({}, -1), TICK_LABEL])
    assert not is_alternating([ci, ci])
    assert is_alternating([])
    assert not is_alternating([call_out("g", [], {}, -1), ret_out({}, -1)])


def call_into_program():
    return S.parse_source("""
(module Ctx (globals) (fun main (params) (locals) (body (call helper) (call f 3) (exit)))
                     (fun helper (params) (locals) (body (return))))
(module Prog (globals (seen 1)) (fun f (params (x 1)) (locals) (body (assign (addr seen) x) (return))))""")


def test_call_into_program_trace():
    alpha = traces_of(call_into_program(), {"Prog"}, 100)
    assert [l.kind for l in alpha] == [CALL_IN, RET_OUT, TICK]
    assert alpha[0].args == (3,) and alpha[0].mem == ()
    assert is_alternating(alpha)


def test_internal_context_call_is_tau():
    ts = start(call_into_program(), {"Prog"})
    assert trace_step(ts) == TAU_LABEL  # main -> helper, both in Ctx
    assert trace_step(ts) == TAU_LABEL


def test_shared_set_monotone_and_alternation_on_corpus():
    for case in pair_corpus(11, 15):
        img = T.link_trg(case.context, compile_program(case.program))
        ts = start(img, frozenset(case.program.mids()))
        prev = set()
        labels = []
        for _ in range(10_000):
            lab = trace_step(ts)
            if lab is None:
                break
            assert prev <= ts.shared
            prev = set(ts.shared)
            if lab.kind != TAU:
                labels.append(lab)
            if lab.kind == TICK:
                break
        assert is_alternating(labels)


def test_traces_are_deterministic(listing_main, stub):
    img = golden_image(listing_main, stub)
    assert trace_to_json(traces_of(img, {"Main"}, 100_000)) == trace_to_json(traces_of(img, {"Main"}, 100_000))


def test_json_round_trip(listing_main, stub):
    alpha = traces_of(golden_image(listing_main, stub), {"Main"}, 100_000)
    text = trace_to_json(alpha)
    assert trace_from_json(text) == alpha
    assert label_to_json(alpha[0])["args"][0] == {"cap": {"t": "data", "start": "0", "end": "512", "off": "0"}}


def test_json_rejects_unknown_kind():
    with pytest.raises(ValueError):
        trace_from_json('{"labels": [{"kind": "jump"}]}')


def test_stuck_run_ends_trace():
    p = S.parse_source("""
(module Ctx (globals) (fun main (params) (locals) (body (call f) (exit))))
(module Prog (globals) (fun f (params) (locals) (body (assign 0 0) (return))))""")
    alpha, status = run_trace(start(p, {"Prog"}), 100)
    assert [l.kind for l in alpha] == [CALL_IN] and status == "diverged"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_paired_traces_alternate(seed):
    for case in pair_corpus(seed, 1):
        img = T.link_trg(case.context, compile_program(case.program))
        assert is_alternating(traces_of(img, case.program.mids(), 10_000))
