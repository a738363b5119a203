"""Command line front end.

Subcommands: asm, run, fuzz, analyze, harden, oracle, gadgets.

Exit codes: 0 success; 1 usage, configuration, or input problems
(including an analyze invocation that could only read part of its trace
files); 2 the program crashed architecturally under run; 3 violations
were found and --strict was given.

Options can come from a config file of key=value lines (--config);
explicit command line flags win over the file, the file wins over
defaults.  The fuzzing seed additionally falls back to the SVM_SEED
environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .analyze import (
    DEFAULT_MIN_TRIGGERS,
    DEFAULT_WHITELIST_MIN_INPUTS,
    aggregate,
    build_whitelist,
    load_trace,
    merge,
    read_whitelist,
    render_report,
    write_whitelist,
)
from .artifacts import read_json, sasm_with_header, write_lines
from .engine import SpecConfig, full_order_stats, run_with_exposure
from .fuzzing import FuzzConfig, fuzz_loop
from .gadgets import GadgetError, builtin_gadget, gadget_ids
from .harden import HardenError, fence_pass, slh_pass
from .isa import AsmError, parse_program, emit_text
from .machine import ExecImage, MemLayout
from .oracle import OracleError, enumerate_paths

OK = 0
E_USAGE = 1
E_CRASH = 2
E_VIOLATIONS = 3

_CONFIG_KEYS = {
    "window": int, "stride": int, "max_order": int, "order_base": int,
    "identity": str, "runs": int, "seed": int, "workers": int,
    "max_len": int, "min_triggers": int, "whitelist_min": int,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to status 2
        self.print_usage(sys.stderr)
        self.exit(E_USAGE, f"{self.prog}: error: {message}\n")


class CliError(Exception):
    def __init__(self, message: str, code: int = E_USAGE):
        super().__init__(message)
        self.code = code


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    out = {}
    for ln in p.read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if "=" not in ln:
            raise CliError(f"bad config line (want key=value): {ln!r}")
        key, _, value = ln.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise CliError(f"unknown config key: {key}")
        try:
            out[key] = _CONFIG_KEYS[key](value.strip())
        except ValueError:
            raise CliError(f"bad value for {key}: {value.strip()!r}")
    return out


def _setting(args, cfg: dict, key: str, default):
    cli = getattr(args, key, None)
    if cli is not None:
        return cli
    if key in cfg:
        return cfg[key]
    if key == "seed":
        env = os.environ.get("SVM_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise CliError(f"SVM_SEED is not an integer: {env!r}")
    return default


def _spec_config(args, cfg: dict, simulate: bool = True) -> SpecConfig:
    try:
        return SpecConfig(
            window=_setting(args, cfg, "window", 250),
            stride=_setting(args, cfg, "stride", 50),
            max_order=_setting(args, cfg, "max_order", 6),
            order_base=_setting(args, cfg, "order_base", 4),
            simulate=simulate,
            identity=_setting(args, cfg, "identity", "offset"),
        )
    except ValueError as e:
        raise CliError(str(e))


def _load_program(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"program file not found: {path}")
    try:
        return parse_program(p.read_text(encoding="utf-8"))
    except AsmError as e:
        lines = [f"{path}:{d.line}: {d.message}" for d in e.diagnostics]
        raise CliError("assembly errors:\n" + "\n".join(lines))


def _input_bytes(args) -> bytes:
    if getattr(args, "input", None) is not None and getattr(args, "input_file", None):
        raise CliError("give either --input or --input-file, not both")
    if getattr(args, "input", None) is not None:
        s = args.input.replace(" ", "")
        try:
            return bytes.fromhex(s) if s else b""
        except ValueError:
            raise CliError(f"--input is not valid hex: {args.input!r}")
    if getattr(args, "input_file", None):
        p = Path(args.input_file)
        if not p.is_file():
            raise CliError(f"input file not found: {args.input_file}")
        return p.read_bytes()
    return b""


# -- subcommands ------------------------------------------------------------

def _cmd_asm(args) -> int:
    program = _load_program(args.file)
    text = emit_text(program)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.print_layout:
        lay = MemLayout()
        image = ExecImage(program)
        print(f"scratch  [0x{lay.scratch_base:x}, 0x{lay.scratch_base + lay.scratch_size:x})")
        print(f"static   [0x{lay.static_base:x}, 0x{lay.static_base + len(program.data):x})")
        print(f"stack    [0x{lay.stack_lo:x}, 0x{lay.stack_hi:x})")
        print(f"heap     [0x{lay.heap_base:x}, 0x{lay.heap_ceiling:x}) redzone {lay.redzone}")
        print("blocks:")
        for start, length, fn, label in image.blocks:
            print(f"  {fn}:{label}  start={start} len={length}")
    return OK


def _cmd_run(args) -> int:
    cfg = _read_config(args.config)
    program = _load_program(args.file)
    data = _input_bytes(args)
    spec = _spec_config(args, cfg, simulate=not args.no_simulate)
    stats = full_order_stats(program, spec)
    trace = run_with_exposure(program, data, spec, stats)
    res = trace.result
    records = trace.deduped(spec.identity)
    if args.json:
        doc = {
            "halted": res.halted,
            "steps": res.steps,
            "fault": res.fault.kind if res.fault else None,
            "regs": list(res.regs),
            "edges": len(trace.edges),
            "spec_steps": trace.spec_steps,
            "records": [r.to_wire() for r in records],
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        state = "halted" if res.halted else (
            f"fault: {res.fault.kind}" if res.fault else "stopped")
        print(f"{state} after {res.steps} steps "
              f"({trace.spec_steps} speculative), {len(records)} violations")
        for r in records:
            print(f"  {r.kind} at {r.offending} order={r.order} "
                  f"identity={r.identity(spec.identity)} via {list(r.branches)}")
    if res.fault is not None:
        return E_CRASH
    if records and args.strict:
        return E_VIOLATIONS
    return OK


def _cmd_fuzz(args) -> int:
    cfg = _read_config(args.config)
    program = _load_program(args.file)
    spec = _spec_config(args, cfg)
    try:
        fuzz_cfg = FuzzConfig(
            runs=_setting(args, cfg, "runs", 1000),
            seed=_setting(args, cfg, "seed", 0),
            workers=_setting(args, cfg, "workers", 1),
            max_len=_setting(args, cfg, "max_len", 64),
            identity=spec.identity,
            spec=spec,
        )
    except ValueError as e:
        raise CliError(str(e))
    result = fuzz_loop(program, fuzz_cfg, out_dir=args.out)
    print(f"runs={result.runs} (attempts={result.attempts}) "
          f"corpus={len(result.corpus)} edges={len(result.edges)} "
          f"violations={len(result.keys)} crashes={len(result.crashes)} "
          f"wall={result.wall_seconds:.2f}s")
    if result.keys and args.strict:
        return E_VIOLATIONS
    return OK


def _cmd_analyze(args) -> int:
    cfg = _read_config(args.config)
    findings: dict = {}
    partial = False
    for path in args.traces:
        try:
            _, records = load_trace(path)
        except (OSError, json.JSONDecodeError) as e:
            print(f"warning: cannot read trace {path}: {e}", file=sys.stderr)
            partial = True
            continue
        findings = merge(findings, aggregate(records, args.identity or "offset"))
    min_triggers = _setting(args, cfg, "min_triggers", DEFAULT_MIN_TRIGGERS)
    lines = render_report(findings, min_triggers)
    if args.out:
        write_lines(args.out, {"file": "report", "min_triggers": min_triggers},
                    lines)
    else:
        for ln in lines:
            print(ln)
        if not lines:
            print("no findings")
    if args.whitelist_out:
        if not args.stats:
            raise CliError("--whitelist-out needs --stats (branch_stats.json)")
        _, doc = read_json(args.stats)
        counts = doc.get("counts", {})
        wl_min = _setting(args, cfg, "whitelist_min", DEFAULT_WHITELIST_MIN_INPUTS)
        wl = build_whitelist(findings, counts, wl_min)
        write_whitelist(args.whitelist_out, wl, {"min_inputs": wl_min})
        print(f"whitelisted {len(wl)} branches", file=sys.stderr)
    if partial:
        return E_USAGE
    if findings and args.strict:
        return E_VIOLATIONS
    return OK


def _cmd_harden(args) -> int:
    program = _load_program(args.file)
    whitelist = set()
    if args.whitelist:
        if not Path(args.whitelist).is_file():
            raise CliError(f"whitelist file not found: {args.whitelist}")
        whitelist = read_whitelist(args.whitelist)
    try:
        result = (fence_pass if args.mode == "fence" else slh_pass)(program, whitelist)
    except HardenError as e:
        raise CliError(str(e))
    meta = {"file": "sasm", "hardening": args.mode, "summary": result.summary}
    text = sasm_with_header(meta, emit_text(result.program))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.map:
        Path(args.map).write_text(
            json.dumps({"_meta": {"file": "branch-map"}, "map": result.branch_map},
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(result.summary, sort_keys=True), file=sys.stderr)
    return OK


def _cmd_oracle(args) -> int:
    cfg = _read_config(args.config)
    program = _load_program(args.file)
    data = _input_bytes(args)
    try:
        outcome = enumerate_paths(
            program, data,
            max_order=_setting(args, cfg, "max_order", 1),
            window=_setting(args, cfg, "window", 250),
            stride=_setting(args, cfg, "stride", 50),
            identity=args.identity or "offset",
            script_limit=args.limit,
        )
    except OracleError as e:
        raise CliError(str(e))
    if args.json:
        doc = {
            "scripts": len(outcome.scripts),
            "records": [r.to_wire() for r in outcome.records],
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(f"{len(outcome.scripts)} speculative paths, "
              f"{len(outcome.keys)} distinct violations")
        for r in outcome.records:
            print(f"  {r.kind} at {r.offending} order={r.order} "
                  f"identity={r.identity(args.identity or 'offset')} "
                  f"via {list(r.branches)}")
    if outcome.keys and args.strict:
        return E_VIOLATIONS
    return OK


def _cmd_gadgets(args) -> int:
    if args.emit is not None:
        try:
            g = builtin_gadget(args.emit)
        except GadgetError as e:
            raise CliError(str(e))
        if args.output:
            Path(args.output).write_text(g.source, encoding="utf-8")
        else:
            sys.stdout.write(g.source)
        return OK
    if args.dir:
        out = Path(args.dir)
        out.mkdir(parents=True, exist_ok=True)
        for gid in gadget_ids():
            g = builtin_gadget(gid)
            (out / f"g{gid:02d}_{g.name}.sasm").write_text(g.source, encoding="utf-8")
        print(f"wrote {len(gadget_ids())} gadgets to {out}")
        return OK
    for gid in gadget_ids():
        g = builtin_gadget(gid)
        print(f"{gid:3d} {g.name:24s} trigger={g.trigger.hex() or '-':10s} "
              f"safe={g.safe.hex() or '-':8s} expects {g.expected.kind} "
              f"at {g.expected.offending} order>={g.expected.min_order}")
    return OK


# -- wiring -------------------------------------------------------------------

def _add_spec_flags(p: _Parser) -> None:
    p.add_argument("--window", type=int, default=None,
                   help="speculation window in instructions")
    p.add_argument("--stride", type=int, default=None,
                   help="window accounting chunk size")
    p.add_argument("--max-order", dest="max_order", type=int, default=None,
                   help="maximum nesting order")
    p.add_argument("--order-base", dest="order_base", type=int, default=None,
                   help="base of the nesting order schedule")
    p.add_argument("--identity", choices=["offset", "raw"], default=None,
                   help="violation identity mode")
    p.add_argument("--config", default=None, help="key=value config file")


def _add_input_flags(p: _Parser) -> None:
    p.add_argument("--input", default=None, help="input bytes as hex")
    p.add_argument("--input-file", dest="input_file", default=None,
                   help="file with raw input bytes")


def build_parser() -> _Parser:
    top = _Parser(prog="svm", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("asm", parents=[], help="parse, validate, and emit canonical assembly")
    p.add_argument("file")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--print-layout", action="store_true", dest="print_layout")
    p.set_defaults(fn=_cmd_asm)

    p = sub.add_parser("run", help="run one input with speculation exposure")
    p.add_argument("file")
    _add_input_flags(p)
    _add_spec_flags(p)
    p.add_argument("--no-simulate", action="store_true", dest="no_simulate",
                   help="plain architectural run")
    p.add_argument("--strict", action="store_true",
                   help="exit 3 when violations are found")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("fuzz", help="coverage-guided fuzzing with exposure")
    p.add_argument("file")
    p.add_argument("--out", default=None, help="artifact directory")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    _add_spec_flags(p)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(fn=_cmd_fuzz)

    p = sub.add_parser("analyze", help="aggregate traces into findings and a whitelist")
    p.add_argument("traces", nargs="+")
    p.add_argument("--stats", default=None, help="branch_stats.json from fuzzing")
    p.add_argument("--min-triggers", dest="min_triggers", type=int, default=None)
    p.add_argument("--whitelist-min", dest="whitelist_min", type=int, default=None)
    p.add_argument("--whitelist-out", dest="whitelist_out", default=None)
    p.add_argument("--out", default=None, help="report file")
    p.add_argument("--identity", choices=["offset", "raw"], default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("harden", help="insert fences or address masking")
    p.add_argument("file")
    p.add_argument("--mode", choices=["fence", "slh"], required=True)
    p.add_argument("--whitelist", default=None)
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--map", default=None, help="write branch id map as JSON")
    p.set_defaults(fn=_cmd_harden)

    p = sub.add_parser("oracle", help="exhaustively enumerate speculative paths")
    p.add_argument("file")
    _add_input_flags(p)
    _add_spec_flags(p)
    p.add_argument("--limit", type=int, default=1 << 16,
                   help="abort beyond this many scripts")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_oracle)

    p = sub.add_parser("gadgets", help="list or emit the built-in victim programs")
    p.add_argument("--emit", type=int, default=None, help="gadget id to print")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--dir", default=None, help="write all gadgets here")
    p.set_defaults(fn=_cmd_gadgets)
    return top


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"svm: error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
