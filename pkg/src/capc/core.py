"""Values, capabilities, memory and the reachability closure.

A Value is either a plain Python ``int`` or a :class:`Capability`.  Memory
is a dict mapping integer addresses to values; an address is mapped iff it
is a key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Set, Union

CODE = "code"
DATA = "data"


@dataclass(frozen=True, slots=True)
class Capability:
    kind: str  # CODE or DATA
    start: int
    end: int
    offset: int

    @property
    def address(self) -> int:
        return self.start + self.offset

    def in_bounds(self) -> bool:
        return self.start <= self.start + self.offset < self.end

    def with_offset(self, offset: int) -> "Capability":
        return Capability(self.kind, self.start, self.end, offset)

    def __repr__(self):
        tag = "δ" if self.kind == DATA else "κ"
        return f"({tag},{self.start},{self.end},{self.offset})"


Value = Union[int, Capability]
Memory = Dict[int, Value]


class Fault(Exception):
    """A failed machine check. The interpreters turn every Fault into Stuck."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


# fault kinds
NOT_DATA_CAP = "NotDataCap"
OUT_OF_BOUNDS = "OutOfBounds"
UNMAPPED = "Unmapped"
TYPE_ERROR = "TypeError"
PCC_READ = "PccRead"
RANGE_NOT_CONTAINED = "RangeNotContained"
ARITHMETIC = "Arithmetic"


def is_cap(v) -> bool:
    return type(v) is Capability


def is_int(v) -> bool:
    return type(v) is int


def expect_int(v, what="operand") -> int:
    if type(v) is not int:
        raise Fault(TYPE_ERROR, f"{what} must be an integer, got {v!r}")
    return v


def expect_cap(v, what="operand") -> Capability:
    if type(v) is not Capability:
        raise Fault(TYPE_ERROR, f"{what} must be a capability, got {v!r}")
    return v


def check_access(mem: Memory, c) -> int:
    """Validate a data access through c and return the address it denotes."""
    if type(c) is not Capability:
        raise Fault(TYPE_ERROR, f"access through non-capability {c!r}")
    if c.kind != DATA:
        raise Fault(NOT_DATA_CAP, repr(c))
    addr = c.start + c.offset
    if not (c.start <= addr < c.end):
        raise Fault(OUT_OF_BOUNDS, repr(c))
    if addr not in mem:
        raise Fault(UNMAPPED, str(addr))
    return addr


def mem_load(m: Memory, c) -> Value:
    return m[check_access(m, c)]


def mem_store(m: Memory, c, v: Value) -> Memory:
    """Functional store: returns a new memory, m is left untouched."""
    addr = check_access(m, c)
    out = dict(m)
    out[addr] = v
    return out


def store_in(m: Memory, c, v: Value) -> int:
    """In-place store used by the interpreters. Returns the written address."""
    addr = check_access(m, c)
    m[addr] = v
    return addr


def limrange(c, lo, hi) -> Capability:
    c = expect_cap(c, "limrange base")
    lo = expect_int(lo, "limrange lower bound")
    hi = expect_int(hi, "limrange upper bound")
    if not (c.start <= lo <= hi <= c.end):
        raise Fault(RANGE_NOT_CONTAINED, f"[{lo},{hi}) not within [{c.start},{c.end})")
    return Capability(c.kind, lo, hi, 0)


def cap_type_code(c) -> int:
    """Integer encoding of a capability tag: data is 1, code is 0."""
    return 1 if expect_cap(c).kind == DATA else 0


def reachable_closure(roots: Iterable[int], m: Memory) -> Set[int]:
    """Least superset of roots closed under following capabilities in m."""
    seen = set(roots)
    work = list(seen)
    while work:
        v = m.get(work.pop())
        if type(v) is Capability:
            for a in range(v.start, v.end):
                if a not in seen:
                    seen.add(a)
                    work.append(a)
    return seen


def cap_footprint(values: Iterable[Value]) -> Set[int]:
    """All addresses covered by the capabilities among values."""
    out: Set[int] = set()
    for v in values:
        if type(v) is Capability:
            out.update(range(v.start, v.end))
    return out


def format_value(v: Value) -> str:
    return repr(v) if is_cap(v) else str(v)
