"""Bundled example programs and the branch_on_secret fixtures."""

from __future__ import annotations

from importlib import resources

from . import source as S
from . import target as T
from .syntax import IntLit, BinOp, Deref, Start, End, Assign, Call, Exit, LimRange


def read_text(name: str) -> str:
    return resources.files(__package__).joinpath("corpus", name).read_text()


def load_source(name: str) -> S.SProgram:
    return S.parse_source(read_text(name))


def load_target(name: str) -> T.TProgram:
    return T.parse_target(read_text(name))


def listing_main() -> S.SProgram:
    return load_source("main_module.imp")


def networking_stub() -> T.TProgram:
    return load_target("networking_stub.cap")


# The program only reads through one of two pointers after checking their
# addresses are equal, so a bounds-blind observer learns nothing from it.
# With bounds visible, the choice of pointer leaks the secret bit. Index -1
# is used because with the fixture capabilities index 1 fails for both.
def branch_on_secret(secret: int) -> S.SProgram:
    text = f"""
(module Prog
  (globals (secret 1) (result 1))
  (fun branch_on_secret (params (p 1) (q 1)) (locals)
    (body
      (assign (addr secret) {secret})
      (jz (- (+ (start p) (offset p)) (+ (start q) (offset q))) 2)
      (return)
      (jz secret 3)
      (assign (addr result) (index (deref p) -1))
      (return)
      (assign (addr result) (index (deref q) -1))
      (return))))
"""
    return S.parse_source(text)


def branch_context_target() -> T.TProgram:
    """Target context passing (d,a,a+2,1) and (d,a+1,a+2,0): one address, two bound sets."""
    blk = Deref(T.Inc(T.GetStc(), IntLit(0)))
    body = (
        Assign(T.Inc(T.GetStc(), IntLit(0)), T.GetDdc()),
        Call("branch_on_secret", (T.Inc(blk, IntLit(1)),
                       LimRange(blk, BinOp("+", Start(blk), IntLit(1)), End(blk)))),
        Exit(),
    )
    f = T.TFunction("main", (), 1, body)
    return T.TProgram((T.TModule("Ctx", (f,)),), (("Ctx", 0, 2),), (("Ctx", 0, 256),))


def branch_context_source() -> S.SProgram:
    """The same two pointers built in the source language with start/end."""
    text = """
(module Ctx
  (globals (pair 2))
  (fun main (params) (locals)
    (body
      (call branch_on_secret (addr-index pair 1) (limrange (addr pair) (+ (start (addr pair)) 1) (end (addr pair))))
      (exit))))
"""
    return S.parse_source(text)
