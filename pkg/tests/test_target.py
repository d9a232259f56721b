import pytest

from capc import corpus, target as T
from capc.core import Capability, DATA, Fault, RANGE_NOT_CONTAINED
from capc.sexp import ParseError
from capc.syntax import CONVERGED, DIVERGED, FUEL_EXHAUSTED, IntLit, LimRange, NEXT, STUCK, TERMINAL


def image(body, data=0, extra=""):
    return T.parse_target(f"""
(layout (module M (data 0 {data}) (stack {data} {data + 16})))
(program (module M (fun main (params) (frame 2) (body {body})) {extra}))""")


def test_inc_moves_offset_only():
    env, st = T.init_trg(image("(exit)"))
    st.ddc = Capability(DATA, 100, 110, 4)
    assert T.eval_expr_trg(env, st, T.Inc(T.GetDdc(), IntLit(-2))) == Capability(DATA, 100, 110, 2)
    # out of bounds is fine until use
    assert T.eval_expr_trg(env, st, T.Inc(T.GetDdc(), IntLit(50))).offset == 54


def test_limrange_examples():
    env, st = T.init_trg(image("(exit)"))
    st.ddc = Capability(DATA, 0, 10, 7)
    with pytest.raises(Fault) as e:
        T.eval_expr_trg(env, st, LimRange(T.GetDdc(), IntLit(2), IntLit(12)))
    assert e.value.kind == RANGE_NOT_CONTAINED
    st.ddc = Capability(DATA, 0, 512, 0)
    assert T.eval_expr_trg(env, st, LimRange(T.GetDdc(), IntLit(0), IntLit(512))) == Capability(DATA, 0, 512, 0)


def test_store_through_ddc():
    p = image("(assign (getddc) (getstc)) (exit)", data=1)
    env, st = T.init_trg(p)
    assert T.step_trg(env, st).status == NEXT
    assert st.mem[0] == Capability(DATA, 1, 17, 0)
    assert T.step_trg(env, st).status == TERMINAL
    assert T.converges_trg(p, 10) == CONVERGED


@pytest.mark.parametrize("body,status", [("(exit)", CONVERGED), ("(jz 0 0)", FUEL_EXHAUSTED), ("(return)", DIVERGED)])
def test_converges(body, status):
    assert T.converges_trg(image(body), 100) == status


def test_store_outside_ddc_is_stuck():
    env, st = T.init_trg(image("(assign (inc (getddc) 1) 5) (exit)", data=1))
    before = st.copy()
    assert T.step_trg(env, st).status == STUCK
    assert st == before


def test_call_swaps_registers_and_return_restores():
    src = """
(layout (module A (data 0 1) (stack 1 9)) (module B (data 9 11) (stack 11 19)))
(program
  (module A (fun main (params) (frame 0) (body (call g 5) (exit))))
  (module B (fun g (params 1) (frame 2) (body (assign (getddc) (deref (inc (getstc) 1))) (return)))))"""
    env, st = T.init_trg(T.parse_target(src))
    T.step_trg(env, st)
    assert st.ddc == Capability(DATA, 9, 11, 0)
    assert st.stc == Capability(DATA, 11, 19, 0)
    assert st.mem[12] == 5
    T.step_trg(env, st)
    assert st.mem[9] == 5
    T.step_trg(env, st)
    assert st.ddc == Capability(DATA, 0, 1, 0) and st.stc == Capability(DATA, 1, 9, 0)
    assert st.pcc == ("main", 1)


def test_stale_capability_of_other_module_is_bounded():
    src = """
(layout (module A (data 0 2) (stack 2 4)) (module B (data 4 5) (stack 5 7)))
(program
  (module A (fun main (params) (frame 0) (body (call g (getddc)) (exit))))
  (module B (fun g (params 0) (frame 1)
    (body (assign (deref (inc (getstc) 0)) 1)
          (assign (inc (deref (inc (getstc) 0)) 1) 2)
          (assign (inc (deref (inc (getstc) 0)) 2) 3)
          (return)))))"""
    env, st = T.init_trg(T.parse_target(src))
    statuses = [T.step_trg(env, st).status for _ in range(4)]
    assert statuses == [NEXT, NEXT, NEXT, STUCK]
    assert (st.mem[0], st.mem[1], st.mem[4]) == (1, 2, 0)


def test_pcc_check(stub):
    assert T.link_check_pcc(stub)
    evil = corpus.load_target("evil_pcc.cap")
    assert not T.link_check_pcc(evil)
    assert T.pcc_offenders(evil) == [("send_rcv", 0)]
    with pytest.raises(T.PccMentioned):
        T.link_trg(evil, stub)


def test_reading_pcc_at_runtime_faults():
    env, st = T.init_trg(image("(assign (getddc) (getpcc)) (exit)", data=1))
    assert T.step_trg(env, st).status == STUCK


def test_round_trip(stub):
    text = T.print_target(stub)
    assert T.parse_target(text) == stub
    assert T.print_target(T.parse_target(text)) == text


def test_bad_layout_rejected():
    with pytest.raises((T.ImageError, ParseError)):
        T.parse_target("(layout (module M (data 0 4) (stack 2 6))) (program (module M))")
    with pytest.raises((T.ImageError, ParseError)):
        T.parse_target("(layout) (program (module M (fun main (params) (frame 0) (body (exit)))))")


def test_link_places_program_first(listing_main, stub):
    from capc.compiler import compile_program
    img = T.link_trg(stub, compile_program(listing_main))
    lay = img.layout()
    assert lay.data["Main"] == (0, 514)
    assert lay.data["Networking"][0] == lay.stack["Main"][1]
    assert img.part == frozenset({"Main"})
