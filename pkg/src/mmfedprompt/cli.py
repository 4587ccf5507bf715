"""Command line: ``run``, ``sweep``, ``ablate-pool`` and ``selftest``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import fields, replace
from enum import Enum
from pathlib import Path

from . import oracles
from .errors import FedPromptError
from .orchestrator import FULL_SCALE, Method, RunConfig, output_root, run

SWEEP_ETAS = (0.0, 0.25, 0.5, 0.75, 1.0)
ABLATE_TAUS = (10, 15, 20, 25, 30)
FL_METHODS = (Method.FED_PRIME, Method.FED_INTER, Method.FED_INTRA, Method.FEDAVG_P)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(p):
    g = p.add_argument_group("run configuration (defaults come from --config, then built-ins)")
    for f in fields(RunConfig):
        # every field is a plain string here and parsed by RunConfig, so the
        # config file and the flags go through one conversion path
        g.add_argument(_flag(f.name), dest=f.name, metavar=f.name.upper(), default=None)
    p.add_argument("--config", type=Path, help="INI file with a [run] section of key = value pairs")
    p.add_argument("--paper-scale", action="store_true", help="20 clients and 250 rounds")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${{{'MMFEDPROMPT_OUT'}}}/<name>)")
    p.add_argument("-v", "--verbose", action="store_true")


def resolve_config(args, **fixed):
    base = RunConfig()
    if args.config is not None:
        if not args.config.exists():
            raise FedPromptError(f"config file not found: {args.config}")
        base = RunConfig.from_ini(args.config.read_text())
    if args.paper_scale:
        base = replace(base, **FULL_SCALE)
    values = base.to_dict()
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values.update({k: v.value if isinstance(v, Enum) else v for k, v in fixed.items()})
    return RunConfig.from_dict({k: str(v) if v is not None else "none" for k, v in values.items()}).validate()


def _default_name(cfg):
    eta = f"{cfg.eta:g}"
    return f"{cfg.method.value}_{cfg.train_scenario.value}_eta{eta}_seed{cfg.seed}"


def cmd_run(args):
    cfg = resolve_config(args)
    out = args.out or output_root() / _default_name(cfg)
    t0 = time.perf_counter()
    res = run(cfg, out_dir=out, resume=args.resume, verbose=args.verbose)
    last = res.metrics[-1]
    print(f"{cfg.method.value}: round {last.round} test_acc {last.test_acc:.4f} test_f1 {last.test_f1:.4f} "
          f"test_loss {last.test_loss:.4f} pool {last.pool_size} ({time.perf_counter() - t0:.1f}s) -> {out}")
    return 0


def _summary_writer(path, header):
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def cmd_sweep(args):
    methods = [Method(m) for m in args.methods.split(",")] if args.methods else list(FL_METHODS)
    etas = [float(e) for e in args.etas.split(",")] if args.etas else list(SWEEP_ETAS)
    base = resolve_config(args)
    root = args.out or output_root() / "sweep"
    root.mkdir(parents=True, exist_ok=True)
    fh, w = _summary_writer(root / "summary.csv", ["eta", "method", "final_acc", "final_f1", "final_loss"])
    with fh:
        for eta in etas:
            for m in methods:
                cfg = replace(base, eta=eta, method=m).validate()
                res = run(cfg, out_dir=root / f"eta{eta:g}" / m.value, verbose=args.verbose)
                last = res.metrics[-1]
                w.writerow([f"{eta:g}", m.value, f"{last.test_acc:.6g}", f"{last.test_f1:.6g}", f"{last.test_loss:.6g}"])
                fh.flush()
                print(f"eta {eta:g} {m.value}: acc {last.test_acc:.4f} f1 {last.test_f1:.4f}")
    return 0


def cmd_ablate(args):
    taus = [int(t) for t in args.taus.split(",")] if args.taus else list(ABLATE_TAUS)
    base = resolve_config(args)
    root = args.out or output_root() / "ablate-pool"
    root.mkdir(parents=True, exist_ok=True)
    fh, w = _summary_writer(root / "summary.csv", ["tau", "final_acc", "final_f1", "final_loss", "pool_size"])
    with fh:
        for tau in taus:
            cfg = replace(base, tau=tau).validate()
            res = run(cfg, out_dir=root / f"tau{tau}", verbose=args.verbose)
            last = res.metrics[-1]
            w.writerow([tau, f"{last.test_acc:.6g}", f"{last.test_f1:.6g}", f"{last.test_loss:.6g}", last.pool_size])
            fh.flush()
            print(f"tau {tau}: acc {last.test_acc:.4f} f1 {last.test_f1:.4f} pool {last.pool_size}")
    return 0


def cmd_selftest(args):
    results = oracles.run_all(quick=args.quick)
    for r in results:
        print(r.line())
        for f in r.failures[:5]:
            print("   ", f)
    return 0 if all(r.ok for r in results) else 1


def build_parser():
    p = _Parser(prog="mmfedprompt", description="Federated multimodal prompt tuning with missing modalities.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="single experiment")
    _add_config_flags(r)
    r.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="missing rate x method grid")
    _add_config_flags(s)
    s.add_argument("--etas", help="comma-separated missing rates (default 0,0.25,0.5,0.75,1)")
    s.add_argument("--methods", help="comma-separated methods (default: the four federated ones)")
    s.set_defaults(func=cmd_sweep)
    a = sub.add_parser("ablate-pool", help="pool size ablation")
    _add_config_flags(a)
    a.add_argument("--taus", help="comma-separated pool sizes (default 10,15,20,25,30)")
    a.set_defaults(func=cmd_ablate)
    t = sub.add_parser("selftest", help="oracle suites")
    t.add_argument("--quick", action="store_true", help="fewer cases")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "verbose", False):
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        return args.func(args)
    except _UsageError as exc:
        print(f"mmfedprompt: error: {exc}", file=sys.stderr)
        return 2
    except (FedPromptError, ValueError) as exc:
        print(f"mmfedprompt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
