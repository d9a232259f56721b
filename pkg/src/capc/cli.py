"""capc: parse, compile, run, trace, back-translate and check programs.

Exit codes: 0 on success or a passing verdict, 1 on a failing verdict,
2 on usage, parse or layout errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import backtrans as BT
from . import oracles as O
from . import source as S
from . import target as T
from .compiler import compile_program, CompileError, UnknownVariable
from .sexp import ParseError
from .syntax import DEFAULT_NABLA, LayoutError, NoMain
from .trace import run_trace, source_lang, start, target_lang, trace_from_json, trace_to_json

DEFAULT_FUEL = 10_000


class UsageError(Exception):
    pass


def _read(path):
    try:
        return Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}")


def _is_target_text(text):
    for line in text.splitlines():
        line = line.split(";", 1)[0].strip()
        if line:
            return line.startswith("(layout")
    return False


def load_program(path):
    text = _read(path)
    return T.parse_target(text) if _is_target_text(text) else S.parse_source(text)


def load_source(path) -> S.SProgram:
    p = load_program(path)
    if not isinstance(p, S.SProgram):
        raise UsageError(f"{path} is a target image, expected a source program")
    return p


def load_target(path) -> T.TProgram:
    p = load_program(path)
    if not isinstance(p, T.TProgram):
        raise UsageError(f"{path} is a source program, expected a target image")
    return p


def _emit(args, text):
    if getattr(args, "output", None):
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _positive(s):
    n = int(s)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return n


def _parts(s):
    return frozenset(x.strip() for x in s.split(",") if x.strip())


# -- commands ---------------------------------------------------------------------

def cmd_parse(args):
    try:
        p = load_program(args.file)
    except ParseError as e:
        print(f"{args.file}:{e}", file=sys.stderr)
        return 1
    sys.stdout.write(S.print_source(p) if isinstance(p, S.SProgram) else T.print_target(p))
    return 0


def _state_summary(st):
    return {"pc": list(st.pc), "nalloc": st.nalloc, "stack_depth": len(st.stk),
            "nonzero_cells": sum(1 for v in st.mem.values() if v != 0)}


def _run(args, program, lang):
    env, st = lang.init(program, nabla=args.nabla)
    status, n, res = S.run(env, st, args.fuel, lang.step)
    out = {"status": status, "steps": n, **_state_summary(st)}
    if res.reason:
        out["reason"] = res.reason
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        print(f"{status} after {n} steps" + (f" ({res.reason})" if res.reason else ""))
        print(f"pc {st.pc[0]}:{st.pc[1]}  nalloc {st.nalloc}  stack depth {len(st.stk)}")
    return 0


def cmd_run_src(args):
    return _run(args, load_source(args.file), source_lang())


def cmd_run_trg(args):
    return _run(args, load_target(args.file), target_lang())


def cmd_compile(args):
    p = load_source(args.file)
    _emit(args, T.print_target(compile_program(p, nabla=args.nabla)))
    return 0


def cmd_check_link(args):
    img = load_target(args.file)
    bad = T.pcc_offenders(img)
    if args.json:
        print(json.dumps({"verdict": "reject" if bad else "accept",
                          "offenders": [f"{f}:{i}" for f, i in bad]}, sort_keys=True))
    elif bad:
        print("reject: pcc read at " + ", ".join(f"{f}:{i}" for f, i in bad))
    else:
        print("accept")
    return 1 if bad else 0


def cmd_link(args):
    ctx, prog = load_target(args.context), load_program(args.program)
    if isinstance(prog, S.SProgram):
        prog = compile_program(prog)
    try:
        img = T.link_trg(ctx, prog)
    except T.PccMentioned as e:
        print(f"link rejected: {e}", file=sys.stderr)
        return 1
    _emit(args, T.print_target(img))
    return 0


def cmd_trace(args):
    p = load_source(args.file) if args.lang == "src" else load_target(args.file)
    part = args.part
    if part is None:
        from .trace import _default_part
        part = _default_part(p)
    unknown = set(part) - set(p.mids())
    if unknown:
        raise UsageError(f"--part names unknown modules: {', '.join(sorted(unknown))}")
    lang = source_lang() if args.lang == "src" else target_lang()
    alpha, status = run_trace(start(p, part, args.nabla, lang), args.fuel)
    _emit(args, trace_to_json(alpha))
    if args.output:
        print(f"{len(alpha)} labels, run {status}", file=sys.stderr)
    return 0


def _load_trace(path):
    try:
        return trace_from_json(_read(path))
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"{path}: malformed trace: {e}")


def cmd_backtranslate(args):
    alpha = _load_trace(args.trace)
    text = _read(args.iface)
    if text.lstrip().startswith("{"):
        iface = BT.PartInterface.from_json(text)
    else:
        iface = BT.interface_of(load_source(args.iface), alpha)
    try:
        ctx = BT.backtranslate(alpha, iface)
    except (BT.BacktransUnsupported, BT.NonAlternating) as e:
        print(f"cannot back-translate: {e}", file=sys.stderr)
        return 1
    _emit(args, S.print_source(ctx))
    return 0


def _report(rep):
    print(rep.to_json())
    return 0 if rep.ok else 1


def cmd_difftest(args):
    p = load_source(args.file)
    return _report(O.difftest_whole(p, args.fuel, part=args.part, case=Path(args.file).name))


def cmd_replay(args):
    alpha = _load_trace(args.trace)
    p = load_source(args.program)
    return _report(O.replay_check(alpha, p, args.fuel, case=Path(args.trace).name))


def cmd_tricl(args):
    ctx = load_target(args.context)
    p = load_source(args.program)
    return _report(O.tricl_check(ctx, p, args.fuel, case=Path(args.context).name))


def cmd_fuzz(args):
    from .fuzz import run_campaign
    seed = args.seed
    env = os.environ.get("CAPC_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise UsageError(f"CAPC_SEED must be an integer, got {env!r}")
    res = run_campaign(args.mode, seed, args.cases, args.fuel, shrink=not args.no_shrink)
    if args.json:
        print(json.dumps(res, sort_keys=True))
    else:
        print(f"{args.mode} seed {seed}: {res['passed']} passed, {res['failed']} failed, "
              f"{res['unsupported']} unsupported of {res['cases']}")
        for f in res["failures"]:
            print(json.dumps(f["report"], sort_keys=True))
            if "program" in f:
                print(f["program"])
    return 1 if res["failed"] else 0


# -- argument parsing -------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="capc", description=__doc__.split("\n")[0])
    ap.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
        return sp

    def fuel(sp, default=DEFAULT_FUEL):
        sp.add_argument("--fuel", type=_positive, default=default, help=f"step budget (default {default})")

    def nabla(sp):
        sp.add_argument("--nabla", type=_positive, default=DEFAULT_NABLA, help="allocation limit")

    sp = cmd("parse", cmd_parse, "print the canonical form of a program")
    sp.add_argument("file")

    for name, fn in (("run-src", cmd_run_src), ("run-trg", cmd_run_trg)):
        sp = cmd(name, fn, f"run a whole {'source program' if name == 'run-src' else 'target image'}")
        sp.add_argument("file")
        fuel(sp)
        nabla(sp)

    sp = cmd("compile", cmd_compile, "compile a source program to a target image")
    sp.add_argument("file")
    sp.add_argument("-o", "--output")
    nabla(sp)

    sp = cmd("check-link", cmd_check_link, "reject images whose code reads pcc")
    sp.add_argument("file")

    sp = cmd("link", cmd_link, "link a target context with a program (source programs are compiled first)")
    sp.add_argument("context")
    sp.add_argument("program")
    sp.add_argument("-o", "--output")

    sp = cmd("trace", cmd_trace, "record the trace of a whole program")
    sp.add_argument("lang", choices=["src", "trg"])
    sp.add_argument("file")
    sp.add_argument("--part", type=_parts, help="comma-separated program-side modules")
    sp.add_argument("-o", "--output")
    fuel(sp)
    nabla(sp)

    sp = cmd("backtranslate", cmd_backtranslate, "build a source context that replays a trace")
    sp.add_argument("trace")
    sp.add_argument("--iface", required=True, help="the partial program (.imp) or its interface as JSON")
    sp.add_argument("-o", "--output")

    sp = cmd("difftest", cmd_difftest, "compare a whole program with its compilation")
    sp.add_argument("file")
    sp.add_argument("--part", type=_parts)
    fuel(sp)

    sp = cmd("replay", cmd_replay, "check the back-translation of a trace replays it")
    sp.add_argument("trace")
    sp.add_argument("program")
    fuel(sp, 1_000_000)

    sp = cmd("tricl", cmd_tricl, "three-run simulation check of a target context against a program")
    sp.add_argument("context")
    sp.add_argument("program")
    fuel(sp, 100_000)

    sp = cmd("fuzz", cmd_fuzz, "run a fuzz campaign")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cases", type=_positive, default=100)
    sp.add_argument("--mode", choices=["difftest", "replay", "secret"], default="difftest")
    sp.add_argument("--no-shrink", action="store_true")
    fuel(sp)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"capc: {e}", file=sys.stderr)
    except ParseError as e:
        print(f"capc: parse error: {e}", file=sys.stderr)
    except (LayoutError, NoMain, T.ImageError, CompileError, UnknownVariable) as e:
        print(f"capc: {type(e).__name__}: {e}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
