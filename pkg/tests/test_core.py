import pytest
from hypothesis import given, strategies as st

from capc.core import (
    Capability, CODE, DATA, Fault, NOT_DATA_CAP, OUT_OF_BOUNDS, RANGE_NOT_CONTAINED, TYPE_ERROR, UNMAPPED,
    mem_load, mem_store, reachable_closure, limrange, cap_footprint, check_access,
)


def d(s, e, o=0):
    return Capability(DATA, s, e, o)


@pytest.mark.parametrize("cap,ok", [(d(0, 4, 1), True), (d(1, 2, 1), False), (d(5, 6, -1), False)])
def test_in_bounds(cap, ok):
    assert cap.in_bounds() is ok


def test_load_examples():
    m = {5: 42}
    assert mem_load(m, d(5, 6)) == 42
    with pytest.raises(Fault) as e:
        mem_load(m, d(5, 6, 1))
    assert e.value.kind == OUT_OF_BOUNDS
    with pytest.raises(Fault) as e:
        mem_load(m, Capability(CODE, 5, 6, 0))
    assert e.value.kind == NOT_DATA_CAP


def test_load_through_integer_is_a_type_error():
    with pytest.raises(Fault) as e:
        mem_load({0: 1}, 0)
    assert e.value.kind == TYPE_ERROR


def test_unmapped_cell():
    with pytest.raises(Fault) as e:
        mem_load({}, d(3, 4))
    assert e.value.kind == UNMAPPED


def test_store_examples():
    m = {0: 1}
    assert mem_store(m, d(0, 1), 9) == {0: 9}
    assert m == {0: 1}  # functional
    with pytest.raises(Fault):
        mem_store(m, d(0, 1, 1), 9)
    assert mem_store(m, d(0, 1), d(0, 1)) == {0: d(0, 1)}


def test_closure_examples():
    assert reachable_closure({0}, {0: 3}) == {0}
    assert reachable_closure({0}, {0: d(10, 12), 10: 1, 11: 2}) == {0, 10, 11}
    assert reachable_closure({0}, {0: d(1, 2), 1: d(0, 1)}) == {0, 1}


def test_limrange():
    assert limrange(d(0, 512), 0, 512) == d(0, 512)
    assert limrange(d(0, 10, 7), 2, 5) == d(2, 5, 0)
    with pytest.raises(Fault) as e:
        limrange(d(0, 10, 7), 2, 12)
    assert e.value.kind == RANGE_NOT_CONTAINED
    with pytest.raises(Fault):
        limrange(d(0, 10), 5, 4)


def test_footprint():
    assert cap_footprint([3, d(4, 6), d(10, 11, 5)]) == {4, 5, 10}


caps = st.builds(d, st.integers(-8, 8), st.integers(-8, 16), st.integers(-4, 12))
values = st.one_of(st.integers(-5, 5), caps)
memories = st.dictionaries(st.integers(-8, 16), values, max_size=12)


@given(st.sets(st.integers(-8, 16), max_size=4), st.sets(st.integers(-8, 16), max_size=4), memories)
def test_closure_monotone_and_idempotent(r1, r2, m):
    c = reachable_closure(r1, m)
    assert reachable_closure(c, m) == c
    assert c <= reachable_closure(r1 | r2, m)


@given(memories, caps, values)
def test_load_after_store(m, c, v):
    try:
        m2 = mem_store(m, c, v)
    except Fault:
        return
    assert mem_load(m2, c) == v


@given(caps, st.integers(-10, 20), st.integers(-10, 20))
def test_limrange_never_widens(c, lo, hi):
    try:
        n = limrange(c, lo, hi)
    except Fault:
        return
    assert c.start <= n.start <= n.end <= c.end


def test_check_access_returns_address():
    assert check_access({7: 0}, d(5, 9, 2)) == 7
