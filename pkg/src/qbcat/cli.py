"""Command line: ``qbcat gen-data | run | report``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .experiment import ConfigError, ExperimentConfig, apply_override, run_experiment, write_results
from .report import ReportError, write_report
from .schema import SchemaError
from .synthgen import SynthConfig, class_histogram, generate

log = logging.getLogger("qbcat")


def _synth_config(path, overrides) -> SynthConfig:
    try:
        d = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping")
    # accept either a bare synthetic config or a full experiment config
    if "data" in d:
        d = (d["data"] or {}).get("synthetic") or {}
    for item in overrides:
        apply_override(d, item)
    try:
        cfg = SynthConfig.from_dict(d)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _synth_config(args.config, args.set)
    ds = generate(cfg)
    ds.save(args.out)
    hist = class_histogram(ds)
    d = ds.dictionary
    n_head_a, n_head_p = int(d.attribute_head.sum()), int(d.predicate_head.sum())
    print(f"wrote {args.out}: {len(ds.features)} boxes, "
          f"{len(ds.train.triples)}/{len(ds.val.triples)}/{len(ds.test.triples)} train/val/test triples")
    print(f"attributes: {d.n_attr} classes ({n_head_a} head); predicates: {d.n_pred} classes ({n_head_p} head)")
    for kind in ("attributes", "predicates"):
        counts = sorted(hist[kind].items(), key=lambda kv: -kv[1])
        top = ", ".join(f"{k}={v}" for k, v in counts[:5])
        print(f"  {kind}: max {counts[0][1]}, min {counts[-1][1]}; top: {top}")
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.set)
    if args.out:
        cfg.output = args.out
    result = run_experiment(cfg)
    paths = write_results(cfg, result)
    print(f"wrote {paths['metrics']} and {paths['omega']}")
    return 0


def cmd_report(args) -> int:
    paths = write_report(args.results)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qbcat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic long-tailed dataset")
    g.add_argument("config", help="YAML synthetic config (or an experiment config)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run the experiment grid")
    r.add_argument("config", help="YAML experiment config")
    r.add_argument("--out", help="override the output directory")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scalar config key, e.g. train.lr=0.05")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="summarise a results directory")
    s.add_argument("results")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ReportError, SchemaError, OSError, RuntimeError, ValueError, LookupError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
