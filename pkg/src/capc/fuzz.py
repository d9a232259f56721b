"""Random program generation, shrinking and fuzz campaigns.

Generated programs are type-directed (integers vs. pointers to integer
arrays) so most runs make progress, but they still hit out-of-bounds
indices, division by zero and tag errors often enough to exercise the
stuck paths of both interpreters.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

from . import oracles as O
from . import source as S
from . import target as T
from .compiler import compile_program
from .syntax import (
    IntLit, BinOp, Deref, Start, End, Offset, CapType, LimRange,
    Assign, Alloc, Call, Return, JumpIfZero, Exit,
)
from .trace import run_trace, start, target_lang, is_alternating

INT, PTR = "int", "ptr"
ARITH = ("+", "-", "*", "+", "-")
ALL_OPS = ("+", "-", "*", "/", "mod", "=", "<", "<=")


@dataclass
class Scope:
    ints: List[str] = field(default_factory=list)
    arrays: Dict[str, int] = field(default_factory=dict)
    ptrs: List[str] = field(default_factory=list)


class ExprGen:
    def __init__(self, rng: random.Random, oob=0.02):
        self.rng = rng
        self.oob = oob

    def index(self, n):
        if self.rng.random() < self.oob:
            return self.rng.choice([n, n + 1, -1])
        return self.rng.randrange(n)

    def int_expr(self, sc: Scope, depth=2):
        r = self.rng
        opts = ["lit", "lit"]
        if sc.ints:
            opts += ["var", "var"]
        if sc.arrays:
            opts.append("elem")
        if sc.ptrs:
            opts += ["deref", "getter"]
        if depth > 0:
            opts += ["bin", "bin"]
        k = r.choice(opts)
        if k == "lit":
            return IntLit(r.randint(-2, 9))
        if k == "var":
            return S.Var(r.choice(sc.ints))
        if k == "elem":
            a = r.choice(sorted(sc.arrays))
            return S.Index(S.Var(a), IntLit(self.index(sc.arrays[a])))
        if k == "deref":
            p = S.Var(r.choice(sc.ptrs))
            if r.random() < 0.5:
                return Deref(p)
            return S.Index(Deref(p), IntLit(r.choice([0, 0, 0, 1])))
        if k == "getter":
            return r.choice([Start, End, Offset, CapType])(S.Var(r.choice(sc.ptrs)))
        op = r.choice(ARITH) if r.random() < 0.9 else r.choice(ALL_OPS)
        return BinOp(op, self.int_expr(sc, depth - 1), self.int_expr(sc, depth - 1))

    def ptr_expr(self, sc: Scope):
        r = self.rng
        opts = []
        if sc.ints:
            opts.append("addr")
        if sc.arrays:
            opts += ["arr", "elem"]
        if sc.ptrs:
            opts += ["ptr", "ptr", "narrow"]
        k = r.choice(opts)
        if k == "addr":
            return S.AddrOf(r.choice(sc.ints))
        if k == "arr":
            return S.AddrOf(r.choice(sorted(sc.arrays)))
        if k == "elem":
            a = r.choice(sorted(sc.arrays))
            return S.AddrOfIndex(S.Var(a), IntLit(r.randrange(sc.arrays[a])))
        v = S.Var(r.choice(sc.ptrs))
        if k == "ptr":
            return v
        return LimRange(v, BinOp("+", Start(v), IntLit(r.choice([0, 0, 1]))), End(v))

    def has_storage(self, sc):
        return bool(sc.ints or sc.arrays)


@dataclass
class FunSig:
    fid: str
    mid: str
    kinds: tuple


def _fun_scope(globs, params, locs):
    sc = Scope()
    for name, kind, n in list(globs) + list(params) + list(locs):
        if kind == PTR:
            sc.ptrs.append(name)
        elif n == 1:
            sc.ints.append(name)
        else:
            sc.arrays[name] = n
    return sc


class WholeGen:
    """Whole source programs: up to 3 modules, an acyclic call graph."""

    def __init__(self, rng, max_modules=3, max_cmds=40):
        self.rng = rng
        self.eg = ExprGen(rng)
        self.max_modules = max_modules
        self.max_cmds = max_cmds

    def program(self) -> S.SProgram:
        r = self.rng
        mids = [f"M{k}" for k in range(r.randint(1, self.max_modules))]
        nfun = r.randint(1, 5)
        sigs = [FunSig("main", mids[0], ())]
        for k in range(1, nfun):
            sigs.append(FunSig(f"f{k}", r.choice(mids), tuple(r.choice([INT, INT, PTR]) for _ in range(r.randint(0, 2)))))
        globs = {m: [(f"{m.lower()}g{j}", INT, r.choice([1, 1, 2, 3])) for j in range(r.randint(0, 3))] for m in mids}
        budget = self.max_cmds
        funs = {m: [] for m in mids}
        for k, sig in enumerate(sigs):
            share = max(2, budget // (len(sigs) - k)) if k < len(sigs) - 1 else budget
            n = min(budget, r.randint(2, max(2, share)))
            budget -= n
            funs[sig.mid].append(self.function(sig, globs[sig.mid], sigs[k + 1:], n))
        mods = tuple(S.SModule(m, tuple((g, n) for g, _, n in globs[m]), tuple(funs[m])) for m in mids)
        return S.SProgram(mods)

    def function(self, sig: FunSig, globs, callees, n_cmds) -> S.SFunction:
        r = self.rng
        params = [(f"p{j}", kind, 1) for j, kind in enumerate(sig.kinds)]
        locs = [(f"l{j}", INT, r.choice([1, 1, 2, 4])) for j in range(r.randint(0, 3))]
        if r.random() < 0.5:
            locs.append(("q", PTR, 1))
        counter = None
        if n_cmds >= 6 and r.random() < 0.4:
            counter = "c"
            locs.append((counter, INT, 1))
        sc = _fun_scope(globs, params, [l for l in locs if l[0] != counter])
        body = []
        if "q" in sc.ptrs:
            # pointer locals start out as integers; point them at something
            target = _storage_expr(r, sc)
            if target is None:
                sc.ptrs.remove("q")
            else:
                body.append(Assign(S.AddrOf("q"), target))
        last = Exit() if sig.fid == "main" else Return()
        while len(body) < n_cmds - 1:
            if counter and len(body) + 4 <= n_cmds - 1 and r.random() < 0.3:
                body += [Assign(S.AddrOf(counter), IntLit(r.randint(1, 4))),
                         JumpIfZero(S.Var(counter), IntLit(3)),
                         Assign(S.AddrOf(counter), BinOp("-", S.Var(counter), IntLit(1))),
                         JumpIfZero(IntLit(0), IntLit(-2))]
                counter = None
                continue
            body.append(self.command(sc, callees))
        body = body[: max(0, n_cmds - 1)]
        body.append(last)
        # give forward jumps their offsets now that the length is known
        out = []
        for i, c in enumerate(body):
            if isinstance(c, JumpIfZero) and isinstance(c.offset, IntLit) and c.offset.value == 0:
                out.append(JumpIfZero(c.cond, IntLit(r.randint(1, min(3, len(body) - 1 - i)) if i < len(body) - 1 else 1)))
            else:
                out.append(c)
        return S.SFunction(sig.fid, tuple((p, 1) for p, _, _ in params), tuple((l, n) for l, _, n in locs), tuple(out))

    def command(self, sc, callees):
        r, eg = self.rng, self.eg
        opts = ["assign", "assign", "assign", "jump"]
        if sc.ptrs:
            opts += ["store", "repoint", "alloc"]
        if callees:
            opts += ["call", "call"]
        k = r.choice(opts)
        if k == "assign" and eg.has_storage(sc):
            names = sc.ints + sorted(sc.arrays)
            v = r.choice(names)
            lhs = S.AddrOf(v) if v in sc.ints else S.AddrOfIndex(S.Var(v), IntLit(eg.index(sc.arrays[v])))
            return Assign(lhs, eg.int_expr(sc))
        if k == "store":
            p = S.Var(r.choice(sc.ptrs))
            lhs = p if r.random() < 0.6 else S.AddrOfIndex(Deref(p), IntLit(r.choice([0, 1])))
            return Assign(lhs, eg.int_expr(sc))
        if k == "repoint":
            return Assign(S.AddrOf(r.choice(sc.ptrs)), eg.ptr_expr(sc))
        if k == "alloc":
            return Alloc(S.AddrOf(r.choice(sc.ptrs)), IntLit(r.choice([1, 2, 3, 0]) if r.random() < 0.1 else r.randint(1, 3)))
        if k == "call":
            f = r.choice(callees)
            args = []
            for kind in f.kinds:
                if kind == PTR and (sc.ptrs or eg.has_storage(sc)):
                    args.append(eg.ptr_expr(sc))
                else:
                    args.append(eg.int_expr(sc, 1))
            return Call(f.fid, tuple(args))
        # placeholder offset 0 is filled in once the body length is known
        return JumpIfZero(eg.int_expr(sc, 1), IntLit(0))


def _storage_expr(r, sc):
    if sc.arrays and (not sc.ints or r.random() < 0.5):
        return S.AddrOf(r.choice(sorted(sc.arrays)))
    if sc.ints:
        return S.AddrOf(r.choice(sc.ints))
    return None


# -- partial programs and their contexts ------------------------------------------

@dataclass
class PairCase:
    name: str
    program: S.SProgram
    context_src: Optional[S.SProgram]
    context: T.TProgram
    leak: bool = False


class PairGen:
    """A partial program Prog plus a context Ctx that drives it."""

    def __init__(self, rng):
        self.rng = rng
        self.eg = ExprGen(rng, oob=0.02)

    def case(self, name) -> PairCase:
        r = self.rng
        exports = [FunSig(f"e{k}", "Prog", tuple(r.choice([INT, PTR, PTR]) for _ in range(r.randint(0, 2))))
                   for k in range(r.randint(1, 2))]
        imports = [FunSig(f"cb{k}", "Ctx", tuple(r.choice([INT, PTR]) for _ in range(r.randint(0, 2))))
                   for k in range(r.randint(0, 2))]
        pglobs = [("gbuf", INT, r.randint(2, 4)), ("gn", INT, 1)]
        pfuns = [self.exported(sig, pglobs, imports) for sig in exports]
        prog = S.SProgram((S.SModule("Prog", tuple((g, n) for g, _, n in pglobs), tuple(pfuns)),))
        leak = r.random() < 0.06
        ctx = self.context(exports, imports, leak)
        return PairCase(name, prog, ctx, compile_program(ctx), leak)

    def exported(self, sig, globs, imports):
        r, eg = self.rng, self.eg
        params = [(f"a{j}", kind, 1) for j, kind in enumerate(sig.kinds)]
        sc = _fun_scope(globs, params, [("t", INT, 1)])
        body = []
        for _ in range(r.randint(1, 4)):
            if sc.ptrs and r.random() < 0.5:
                p = S.Var(r.choice(sc.ptrs))
                body.append(r.choice([Assign(p, eg.int_expr(sc, 1)),
                                      Assign(S.AddrOf("t"), Deref(p)),
                                      Assign(S.AddrOfIndex(S.Var("gbuf"), IntLit(0)), End(p))]))
            else:
                body.append(Assign(S.AddrOf(r.choice(["gn", "t"])), eg.int_expr(sc, 1)))
        if imports and r.random() < 0.7:
            f = r.choice(imports)
            args = tuple(r.choice([S.AddrOf("gbuf"), S.AddrOfIndex(S.Var("gbuf"), IntLit(1)), S.AddrOf("gn")])
                         if kind == PTR else eg.int_expr(sc, 1) for kind in f.kinds)
            body.append(Call(f.fid, args))
            if r.random() < 0.6:
                body.append(Assign(S.AddrOf("t"), S.Index(S.Var("gbuf"), IntLit(0))))
        if r.random() < 0.3:
            body.append(JumpIfZero(BinOp("=", S.Var("gn"), IntLit(r.randint(0, 3))), IntLit(2)))
            body.append(Assign(S.AddrOf("gn"), BinOp("+", S.Var("gn"), IntLit(1))))
        body.append(Return())
        return S.SFunction(sig.fid, tuple((p, 1) for p, _, _ in params), (("t", 1),), tuple(body))

    def context(self, exports, imports, leak):
        r = self.rng
        nblk = 2
        globs = [(f"b{k}", 1) for k in range(nblk)] + [("x", 1), ("own", 2)]
        main = []
        for k in range(nblk):
            if r.random() < 0.8:
                main.append(Alloc(S.AddrOf(f"b{k}"), IntLit(r.randint(1, 3))))
                main.append(Assign(S.Var(f"b{k}"), IntLit(r.randint(0, 9))))
            else:
                main.append(Assign(S.AddrOf(f"b{k}"), S.AddrOf("x")) if leak else
                            Alloc(S.AddrOf(f"b{k}"), IntLit(1)))
        for _ in range(r.randint(1, 3)):
            f = r.choice(exports)
            args = []
            for kind in f.kinds:
                if kind == INT:
                    args.append(r.choice([IntLit(r.randint(0, 5)), S.Var("x")]))
                    continue
                b = S.Var(f"b{r.randrange(nblk)}")
                args.append(r.choice([b, b, LimRange(b, Start(b), BinOp("+", Start(b), IntLit(1))),
                                      S.AddrOfIndex(Deref(b), IntLit(0))]))
            if leak and r.random() < 0.5:
                args = [S.AddrOf("own") if isinstance(a, S.Var) and a.vid.startswith("b") else a for a in args]
            main.append(Call(f.fid, tuple(args)))
            if r.random() < 0.5:
                main.append(Assign(S.AddrOf("x"), Deref(S.Var("b0"))))
            if r.random() < 0.2:
                main.append(JumpIfZero(S.Var("x"), IntLit(2)))
                main.append(Assign(S.AddrOf("x"), IntLit(7)))
        main.append(Exit())
        funs = [S.SFunction("main", (), (), tuple(main))]
        for sig in imports:
            funs.append(self.callback(sig))
        return S.SProgram((S.SModule("Ctx", tuple(globs), tuple(funs)),))

    def callback(self, sig):
        r = self.rng
        params = tuple((f"a{j}", 1) for j in range(len(sig.kinds)))
        body = []
        for j, kind in enumerate(sig.kinds):
            if kind != PTR:
                body.append(Assign(S.AddrOf("x"), S.Var(f"a{j}")))
                continue
            a = S.Var(f"a{j}")
            body.append(r.choice([Assign(a, IntLit(r.randint(0, 9))),
                                  Assign(S.AddrOf("x"), Deref(a)),
                                  Assign(a, S.Var("b1"))]))
        if r.random() < 0.3:
            body.append(Alloc(S.AddrOf("b1"), IntLit(r.randint(1, 2))))
        body.append(Return())
        return S.SFunction(sig.fid, params, (), tuple(body))


def pair_corpus(seed, n, max_len=12, fuel=10_000):
    """n (context, program) pairs whose target traces have at most max_len labels."""
    rng = random.Random(seed)
    gen = PairGen(rng)
    out = []
    tries = 0
    while len(out) < n and tries < 20 * n:
        tries += 1
        case = gen.case(f"pair{len(out)}")
        img = T.link_trg(case.context, compile_program(case.program))
        alpha, _ = run_trace(start(img, frozenset(case.program.mids()), lang=target_lang()), fuel)
        if 0 < len(alpha) <= max_len:
            out.append(case)
    return out


# -- adversarial send_rcv contexts ------------------------------------------------

def _slot(k):
    return T.Inc(T.GetStc(), IntLit(k))


def _buf():
    return Deref(_slot(0))


class NetworkGen:
    """Target-level send_rcv implementations that poke at the buffer they are given."""

    def __init__(self, rng):
        self.rng = rng

    def context(self) -> T.TProgram:
        r = self.rng
        body = []
        for _ in range(r.randint(1, 8)):
            body.extend(self.action())
        body.append(Return())
        nglob = r.randint(0, 3)
        f = T.TFunction("send_rcv", (0,), 4, tuple(body))
        return T.TProgram((T.TModule("Networking", (f,)),), (("Networking", 0, nglob),), (("Networking", 0, 256),))

    def action(self):
        r = self.rng
        k = r.choice(["write", "write", "read", "fill", "store-cap", "widen", "under", "alloc",
                      "ddc", "call", "shrink"])
        idx = r.choice([0, 1, 42, 511, r.randrange(512), 512, 513, -1])
        if k == "write":
            return [Assign(T.Inc(_buf(), IntLit(idx)), IntLit(r.randint(-5, 5000)))]
        if k == "read":
            return [Assign(_slot(1), Deref(T.Inc(_buf(), IntLit(idx))))]
        if k == "fill":
            n = r.choice([3, 16, 512])
            return [Assign(_slot(1), IntLit(0)),
                    JumpIfZero(BinOp("-", Deref(_slot(1)), IntLit(n)), IntLit(4)),
                    Assign(T.Inc(_buf(), Deref(_slot(1))), IntLit(r.randint(0, 9))),
                    Assign(_slot(1), BinOp("+", Deref(_slot(1)), IntLit(1))),
                    JumpIfZero(IntLit(0), IntLit(-3))]
        if k == "store-cap":
            return [Assign(T.Inc(_buf(), IntLit(idx)), r.choice([_buf(), T.GetStc(), T.Inc(_buf(), IntLit(2))]))]
        if k == "widen":
            return [Assign(_slot(2), LimRange(_buf(), BinOp("-", Start(_buf()), IntLit(r.randint(1, 3))), End(_buf())))]
        if k == "under":
            return [Assign(T.Inc(_buf(), IntLit(-r.randint(1, 3))), IntLit(9))]
        if k == "alloc":
            return [Alloc(_slot(2), IntLit(r.randint(1, 4))),
                    Assign(T.Inc(_buf(), IntLit(r.randrange(512))), Deref(_slot(2)))]
        if k == "ddc":
            return [Assign(_slot(3), T.GetDdc()),
                    Assign(T.Inc(_buf(), IntLit(r.randrange(512))), T.GetDdc())]
        if k == "call":
            return [Call(r.choice(["read_secret", "decrypt"]), ())]
        return [Assign(_slot(2), LimRange(_buf(), BinOp("+", Start(_buf()), IntLit(1)), End(_buf()))),
                Assign(_slot(0), Deref(_slot(2)))]


# -- shrinking ------------------------------------------------------------------

def _drop_command(p: S.SProgram, mi, fi, ci):
    m = p.modules[mi]
    f = m.functions[fi]
    body = f.body[:ci] + f.body[ci + 1:]
    funs = m.functions[:fi] + (replace(f, body=body),) + m.functions[fi + 1:]
    mods = p.modules[:mi] + (replace(m, functions=funs),) + p.modules[mi + 1:]
    return replace(p, modules=mods)


def shrink_program(p: S.SProgram, still_fails, max_rounds=200) -> S.SProgram:
    """Greedily drop commands while still_fails keeps returning True."""
    rounds = 0
    changed = True
    while changed and rounds < max_rounds:
        changed = False
        for mi, m in enumerate(p.modules):
            for fi, f in enumerate(m.functions):
                for ci in range(len(f.body) - 1, -1, -1):
                    if len(f.body) <= 1:
                        break
                    cand = _drop_command(p, mi, fi, ci)
                    rounds += 1
                    try:
                        bad = still_fails(cand)
                    except Exception:
                        bad = False
                    if bad:
                        p, changed = cand, True
                        break
                if changed:
                    break
            if changed:
                break
    return p


# -- campaigns ------------------------------------------------------------------

def secret_violations(ctx_t: T.TProgram, main: S.SProgram, fuel=10_000):
    """Check the secret of Main stays out of every label. Returns a list of problems."""
    img = T.link_trg(ctx_t, compile_program(main))
    ts = start(img, frozenset(main.mids()), lang=target_lang())
    lo, _ = S.layout(main).beta[("secret", None, "Main")]
    addr = ts.env.layout.data["Main"][0] + lo
    problems = []
    first = []

    def watch(t, lab):
        if lab is None or lab.kind in ("tau", "tick"):
            return
        if addr in t.shared:
            problems.append(f"secret address {addr} entered the shared set")
        if addr in lab.mem_dict():
            problems.append(f"secret address {addr} appears in a label")
        if not first:
            first.append(t.st.mem[addr])
        elif t.st.mem[addr] != first[0]:
            problems.append("secret changed between labels")

    alpha, _ = run_trace(ts, fuel, watch)
    if not is_alternating(alpha):
        problems.append("trace is not alternating")
    return problems


def run_campaign(mode, seed, cases, fuel=10_000, shrink=True):
    rng = random.Random(seed)
    results = {"mode": mode, "seed": seed, "cases": cases, "passed": 0, "failed": 0, "unsupported": 0, "failures": []}
    if mode == "difftest":
        gen = WholeGen(rng)
        for k in range(cases):
            p = gen.program()
            rep = O.difftest_whole(p, fuel, case=f"case{k}")
            _tally(results, rep)
            if not rep.ok:
                small = shrink_program(p, lambda q: not O.difftest_whole(q, fuel).ok) if shrink else p
                results["failures"].append({"case": rep.case, "report": rep.to_dict(), "program": S.print_source(small)})
    elif mode == "replay":
        for case in pair_corpus(seed, cases, fuel=fuel):
            img = T.link_trg(case.context, compile_program(case.program))
            alpha, _ = run_trace(start(img, frozenset(case.program.mids()), lang=target_lang()), fuel)
            rep = O.replay_check(alpha, case.program, 20 * fuel, case=case.name)
            _tally(results, rep)
            if rep.verdict == "fail":
                results["failures"].append({"case": rep.case, "report": rep.to_dict(),
                                            "program": S.print_source(case.program),
                                            "context": T.print_target(case.context)})
    elif mode == "secret":
        from .corpus import load_source
        main = load_source("main_module.imp")
        gen = NetworkGen(rng)
        for k in range(cases):
            ctx = gen.context()
            problems = secret_violations(ctx, main, fuel)
            rep = O.Report(f"case{k}", "fail" if problems else "pass", "secret-isolation" if problems else None,
                           detail="; ".join(problems[:3]))
            _tally(results, rep)
            if problems:
                results["failures"].append({"case": rep.case, "report": rep.to_dict(), "context": T.print_target(ctx)})
    else:
        raise ValueError(f"unknown fuzz mode {mode!r}")
    return results


def _tally(results, rep):
    key = {"pass": "passed", "fail": "failed"}.get(rep.verdict, "unsupported")
    results[key] += 1
