"""Command-line front end: asm, run, bench, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus
from .asm import AsmError, assemble
from .bench import (ConfigError, Mode, config_from_dict, format_summary, load_config,
                    read_report, run_matrix, unmet_thresholds, write_report)
from .bench.config import PLUGIN_FACTORIES
from .engine import EngineAbort, run_instrumented
from .image import ImageError, Image, load_image, write_image
from .plugins import GROUPS, Logger, Tracer
from .vm.machine import RunLimitError
from .vm.reference import ReferenceRun

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _csv(text: str | None) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()


def _load_program(path: str) -> Image:
    p = Path(path)
    if p.suffix == ".s":
        return assemble(p.read_text(encoding="utf-8"), p.name)
    return load_image(p.read_bytes())


def cmd_asm(args) -> int:
    if args.corpus:
        out = Path(args.corpus)
        out.mkdir(parents=True, exist_ok=True)
        for name in corpus.names():
            (out / f"{name}.gimg").write_bytes(write_image(corpus.load(name)))
        print(f"assembled {len(corpus.names())} programs into {out}")
        return EXIT_OK
    if not args.source or not args.output:
        raise UsageError("asm needs <in.s> -o <out.gimg> or --corpus DIR")
    src = Path(args.source).read_text(encoding="utf-8")
    Path(args.output).write_bytes(write_image(assemble(src, args.source)))
    return EXIT_OK


def _run_mode(args) -> Mode:
    plugins = _csv(args.plugins)
    groups = _csv(args.shield_groups)
    if groups and "shield" not in plugins:
        plugins += ("shield",)
    if "shield" in plugins and not groups:
        groups = GROUPS
    mode = Mode("cli", plugins=plugins, groups=groups, api_hook_mode=args.api_hook_mode,
                link_blocks=args.link)
    try:
        mode.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from None
    return mode


def cmd_run(args) -> int:
    img = _load_program(args.image)
    if not args.dbi and (args.plugins or args.shield_groups or args.link):
        raise UsageError("--plugins, --shield-groups and --link need --dbi")
    log_fh = None
    try:
        if not args.dbi:
            if args.instr_log:
                log_fh = open(args.instr_log, "w", encoding="ascii")
            trace = ReferenceRun(img, name=Path(args.image).stem, instr_log=log_fh).run()
        else:
            mode = _run_mode(args)
            plugins = mode.build_plugins()
            logger = None
            if args.instr_log:
                names = {p.name for p in plugins}
                for need in ("instrctl", "apictl"):
                    if PLUGIN_FACTORIES[need].name not in names:
                        plugins.append(PLUGIN_FACTORIES[need]())
                logger = next((p for p in plugins if isinstance(p, Logger)), None)
                if logger is None:
                    logger = Logger()
                    plugins.append(logger)
                plugins.append(Tracer(api=False))
            out = run_instrumented(img, plugins, mode.engine_config(),
                                   name=Path(args.image).stem)
            trace = out.trace
            if logger is not None:
                # drop the logger sequence number; native lines also end in the cycle count
                Path(args.instr_log).write_text(
                    "".join(line.split(" ", 1)[1] + "\n" for line in logger.lines("instr")),
                    encoding="ascii")
    except (EngineAbort, RunLimitError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if log_fh is not None:
            log_fh.close()
    sys.stdout.buffer.write(trace.output)
    sys.stdout.flush()
    if args.trace:
        Path(args.trace).write_bytes(trace.to_bytes())
    print(f"exit {trace.exit_code}, {trace.cycles} cycles", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.jobs:
        cfg.jobs = args.jobs
    report = args.report or cfg.report
    if not report:
        raise UsageError("bench needs --report or a report path in the config")
    doc = run_matrix(cfg)
    write_report(doc, report)
    print(format_summary(doc))
    unmet = unmet_thresholds(doc, cfg)
    for line in unmet:
        print(f"threshold unmet: {line}", file=sys.stderr)
    return EXIT_FAIL if unmet else EXIT_OK


def cmd_report(args) -> int:
    doc = read_report(args.summary)
    print(format_summary(doc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dbishield",
                                 description="G32 toolchain, DBI engine and transparency bench")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("asm", help="assemble a program")
    p.add_argument("source", nargs="?")
    p.add_argument("-o", "--output")
    p.add_argument("--corpus", metavar="DIR", help="assemble the whole corpus into DIR")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("run", help="run an image natively or under the engine")
    p.add_argument("image", help=".gimg image or .s source")
    p.add_argument("--dbi", action="store_true")
    p.add_argument("--plugins", help=f"comma list of {','.join(PLUGIN_FACTORIES)}")
    p.add_argument("--shield-groups", help=f"comma list of {','.join(GROUPS)}")
    p.add_argument("--api-hook-mode", choices=("dbi", "detour"), default="dbi")
    p.add_argument("--link", action="store_true", help="enable block linking")
    p.add_argument("--trace", help="write the observable trace as JSON")
    p.add_argument("--instr-log", help="write an instruction log (tid pc mnemonic [cycles])")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run the test x mode matrix")
    p.add_argument("--config")
    p.add_argument("--report")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="print the rate table of a report")
    p.add_argument("--summary", required=True, metavar="REPORT")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"dbishield {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, AsmError, ImageError, json.JSONDecodeError) as e:
        print(f"dbishield {args.command}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
