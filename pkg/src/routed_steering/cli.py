"""Command-line entry point: one subcommand per pipeline phase.

Exit status: 0 ok, 1 usage or config error, 2 missing data or dependency,
3 numerical failure. The only environment variables read are
``ROUTED_STEERING_OUT`` (output directory) and ``ROUTED_STEERING_THREADS``
(BLAS thread count).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .config import ConfigError, build, dump_config, load_config, parse_override, set_dotted, RunConfig
from .elicitation import ElicitationError, LibraryFormatError
from .evaluation import BindingError, LeakageError
from .model import CheckpointError
from .pipeline import MissingArtifact, Pipeline
from .pretraining import HeadroomError
from .reports import ReportError
from .router import RouterError
from .tasks import ExhaustedSpace

import yaml

ENV_OUT = "ROUTED_STEERING_OUT"
ENV_THREADS = "ROUTED_STEERING_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SAVED_CONFIG = "config.yaml"

log = logging.getLogger("routed_steering")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set rl.grpo.lr=0.001 (repeatable)")
    p.add_argument("--out", type=Path, help=f"output directory (default ${ENV_OUT} or ./runs/default)")
    p.add_argument("--threads", type=int, help=f"BLAS threads (default ${ENV_THREADS} or 1)")
    p.add_argument("--force", action="store_true", help="recompute even when the phase stamp matches")
    p.add_argument("-v", "--verbose", action="store_true")


def _rl_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--group-size", type=int, help="rollouts per prompt")
    p.add_argument("--kl-coef", type=float, help="KL penalty coefficient")
    p.add_argument("--rollout-temp", type=float, help="rollout sampling temperature")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="routed-steering", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "pretrain": "train and freeze the base model, then check headroom",
        "elicit": "contrastive pairs, filter, cluster and save the primitive library",
        "sweep": "static single-primitive injection over the alpha grid",
        "train-sft": "oracle labels and supervised router warm-up",
        "train-rl": "GRPO router training from the SFT checkpoint",
        "evaluate": "all evaluation conditions on the held-out sets",
        "ablate": "alternate-K and alternate-layer routers",
        "report": "CSV tables, SVG plots and the manifest from existing results",
        "run": "every phase in order",
        "show-config": "print the resolved config",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name in ("train-rl", "run"):
            _rl_flags(p)
        if name == "run":
            p.add_argument("--ablate", action="store_true", help="include the ablation phase")
    return parser


def resolve_config(args, out: Path) -> RunConfig:
    """Saved run config, then ``--config``, then ``--set``, then dedicated flags."""
    data: dict = {}
    saved = out / SAVED_CONFIG
    if saved.exists():
        data = yaml.safe_load(saved.read_text()) or {}
    if args.config is not None:
        extra = load_config(args.config).to_dict()
        raw = args.config.read_text()
        given = (json.loads(raw) if args.config.suffix == ".json" else yaml.safe_load(raw)) or {}
        data = _merge(data, _restrict(extra, given))
    for text in args.set:
        key, value = parse_override(text)
        set_dotted(data, key, value)
    for flag, key in (("group_size", "rl.grpo.group_size"), ("kl_coef", "rl.grpo.kl_coef"),
                      ("rollout_temp", "rl.grpo.rollout_temperature")):
        value = getattr(args, flag, None)
        if value is not None:
            set_dotted(data, key, value)
    return build(RunConfig, data)


def _restrict(full: dict, given: dict) -> dict:
    """Values of ``full`` at exactly the keys present in ``given``."""
    return {k: _restrict(full[k], v) if isinstance(v, dict) and isinstance(full[k], dict) else full[k]
            for k, v in given.items()}


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def dispatch(pipe: Pipeline, args) -> None:
    cmd = args.command
    f = args.force
    if cmd == "pretrain":
        s = pipe.run_pretrain(f)
        for fam, h in s["headroom"].items():
            print(f"{fam:10s} base accuracy {h['accuracy']:.3f} (chance {h['chance']:.3f})")
    elif cmd == "elicit":
        s = pipe.run_elicit(f)
        print(f"accepted {s['accepted']}/{s['pairs']} pairs; top-K PCA variance {s['pca_top_k']:.3f}; "
              f"mean |off-diagonal cosine| {s['mean_abs_offdiag']:.3f}; library {s['library_hash'][:12]}")
    elif cmd == "sweep":
        s = pipe.run_sweep(f)
        b = s["best_static"]
        print(f"best static injection: v{b['vector']} at alpha {b['alpha']} (mean accuracy {b['mean_accuracy']:.3f})")
    elif cmd == "train-sft":
        s = pipe.run_train_sft(f)
        o = s["oracle"]
        print(f"oracle labelled {o['labelled']}/{o['instances']} ({o['null']} null); "
              f"{len(s['seeds'])} router(s) trained")
    elif cmd == "train-rl":
        s = pipe.run_train_rl(f)
        g = s["grpo"]
        print(f"group_size={g['group_size']} kl_coef={g['kl_coef']} rollout_temperature={g['rollout_temperature']}")
        for seed, v in s["seeds"].items():
            r = v["reward_curve"]
            print(f"seed {seed}: reward {r[0]:.3f} -> {r[-1]:.3f}")
    elif cmd == "evaluate":
        _print_results(pipe.run_evaluate(f))
    elif cmd == "ablate":
        for row in pipe.run_ablate(f):
            acc = "" if row["result"] is None else f" mean accuracy {_mean(row['result']):.3f}"
            print(f"{row['condition']:10s} {row['status']}{acc}")
    elif cmd == "report":
        for p in pipe.run_report():
            print(p)
    elif cmd == "run":
        for p in pipe.run_all(ablate=args.ablate):
            print(p)
    elif cmd == "show-config":
        sys.stdout.write(dump_config(pipe.cfg))


def _mean(d: dict) -> float:
    return sum(d["accuracy"][f] for f in d["families"]) / len(d["families"])


def _print_results(results) -> None:
    for r in results:
        fams = " ".join(f"{f}={r.accuracy[f]:.2f}" for f in r.families)
        print(f"{r.condition:10s} seed {r.seed}  mean {r.mean_accuracy:.3f}  {fams}")


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path(os.environ.get(ENV_OUT, "runs/default"))
    threads = args.threads
    if threads is None:
        env = os.environ.get(ENV_THREADS)
        try:
            threads = int(env) if env else 1
        except ValueError:
            print(f"error: {ENV_THREADS}={env!r} is not an integer", file=sys.stderr)
            return EXIT_USAGE
    if threads < 1:
        print("error: thread count must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve_config(args, out)
        pipe = Pipeline(cfg, out)
    except (ConfigError, ValueError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            if args.command not in ("show-config", "report"):
                out.mkdir(parents=True, exist_ok=True)
                (out / SAVED_CONFIG).write_text(dump_config(cfg))
            dispatch(pipe, args)
    except (ad.NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingArtifact, HeadroomError, ElicitationError, LibraryFormatError, CheckpointError, RouterError,
            BindingError, LeakageError, ExhaustedSpace, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
