"""Command line: ``rdisasm disasm | facts | diff | stretch``.

Exit codes: 0 success, 1 input error, 2 pipeline assertion, 3 config error,
4 diff found FP/FN/WS locations.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as config_mod
from .emit import AsmProgram, UnresolvedLabel, print_asm, stretch, write_outputs
from .facts import IntegrityError, ParseError, dump_facts, load_facts
from .frontend_elf import FrontendError, extract_facts
from .groundtruth import GroundTruthMismatch, diff_ground_truth, read_truth
from .pipeline import run_pipeline
from .relfix import RelfixError
from .symbolization import read_report, write_report

log = logging.getLogger("rdisasm")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_PIPELINE = 2
EXIT_CONFIG = 3
EXIT_DIFF = 4


class InputError(Exception):
    pass


def _load_input(path: str, from_facts: bool):
    if from_facts or os.path.isdir(path):
        return load_facts(path)
    return extract_facts(path)


def _config(args) -> config_mod.PipelineConfig:
    cfg = config_mod.load(getattr(args, "config", None) or args.global_config)
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
        cfg.validate()
    return cfg


def cmd_disasm(args) -> int:
    cfg = _config(args)
    fb = _load_input(args.input, args.from_facts)
    result = run_pipeline(fb, cfg)
    if args.dump_relations:
        result.dump_relations(args.dump_relations)
    if args.report:
        write_report(args.report, fb, result.symbols)
    if args.output or args.asm_db:
        prog = print_asm(fb, result.layout, result.symbols)
        if args.stretch:
            prog = stretch(prog)
        if args.output:
            write_outputs(prog, args.output, args.asm_db)
        else:
            _write_db(prog, args.asm_db)
    if args.figures:
        from .plots import render_figures

        render_figures(result, args.figures)
    log.info("timings: %s", ", ".join("%s=%.3fs" % kv for kv in result.timings.items()))
    return EXIT_OK


def _write_db(prog: AsmProgram, path: str) -> None:
    with open(path, "w") as f:
        f.write(prog.to_json())


def cmd_facts(args) -> int:
    fb = extract_facts(args.elf)
    dump_facts(fb, args.output)
    print("%s: %d instructions, %d relations written to %s" % (
        args.elf, len(fb["instruction"]), len(fb.relations()), args.output))
    return EXIT_OK


def cmd_diff(args) -> int:
    try:
        report = read_report(args.report)
    except (OSError, ValueError) as e:
        raise InputError("cannot read report %s: %s" % (args.report, e)) from None
    sections, truth = read_truth(args.twin)
    res = diff_ground_truth(report, sections, truth)
    if args.output:
        with open(args.output, "w") as f:
            f.write(res.table())
    else:
        for row in res.rows:
            print("0x%x\t%s\t%s\t%s\t%s" % row)
    print(res.summary())
    return EXIT_OK if res.clean else EXIT_DIFF


def cmd_stretch(args) -> int:
    try:
        with open(args.asm_db) as f:
            prog = AsmProgram.from_json(f.read())
    except (OSError, ValueError, TypeError, KeyError) as e:
        raise InputError("cannot read assembly database %s: %s" % (args.asm_db, e)) from None
    write_outputs(stretch(prog), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdisasm", description="Reassembleable disassembler for x64 ELF.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--print-config", action="store_true",
                    help="print the effective configuration and exit")
    ap.add_argument("--config", dest="global_config", help="key=value configuration file")
    sub = ap.add_subparsers(dest="command")

    d = sub.add_parser("disasm", help="disassemble a binary or a facts directory")
    d.add_argument("input")
    d.add_argument("-o", "--output", help="assembly output file")
    d.add_argument("--report", help="symbolization report file")
    d.add_argument("--dump-relations", metavar="DIR", help="write derived relations here")
    d.add_argument("--from-facts", action="store_true", help="treat input as a facts directory")
    d.add_argument("--config", help="key=value configuration file")
    d.add_argument("--jobs", type=int, help="worker count for rule evaluation")
    d.add_argument("--asm-db", metavar="FILE", help="write the assembly database (input of stretch)")
    d.add_argument("--stretch", action="store_true", help="apply the stretch transform before printing")
    d.add_argument("--figures", metavar="DIR", help="render summary figures as PNG files")
    d.set_defaults(func=cmd_disasm)

    f = sub.add_parser("facts", help="extract the fact directory of an ELF binary")
    f.add_argument("elf")
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_facts)

    g = sub.add_parser("diff", help="score a report against an --emit-relocs twin binary")
    g.add_argument("report")
    g.add_argument("twin")
    g.add_argument("-o", "--output", help="write the per-location table here")
    g.set_defaults(func=cmd_diff)

    s = sub.add_parser("stretch", help="stretch an assembly database and print it")
    s.add_argument("asm_db")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_stretch)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config:
            sys.stdout.write(config_mod.load(args.global_config).dump())
            return EXIT_OK
        if not args.command:
            ap.print_usage(sys.stderr)
            return EXIT_INPUT
        return args.func(args)
    except config_mod.ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except (FrontendError, ParseError, IntegrityError, GroundTruthMismatch, InputError, OSError) as e:
        print("input error: %s: %s" % (type(e).__name__, e), file=sys.stderr)
        return EXIT_INPUT
    except (UnresolvedLabel, RelfixError, AssertionError) as e:
        print("pipeline error: %s: %s" % (type(e).__name__, e), file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
