"""Command-line entry point: ``diffood <command> [options]``.

Config files (``--config``) are JSON (``.json``) or YAML (anything else)
mappings whose keys are ExperimentSpec field names, e.g.::

    id_domain: questions
    ood_domains: [captions, reviews]
    train: {steps: 2000, lr: 0.001}
    t_values: [100, 300, 500, 700, 900]

Command-line flags override the file. Exit codes: 0 success, 1 usage error,
2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from . import experiments as ex
from .tensor import NonFiniteError
from .toydata import gen_toy_domains
from .trainer import CheckpointError, TrainingError, write_curve

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON or YAML experiment config")
    p.add_argument("--seed", type=int, help="run seed (default 7)")
    p.add_argument("--out", type=Path, help="output directory (default runs)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, needed for bit-exact reruns)")
    p.add_argument("--data-dir", type=Path, help="directory of <domain>.txt/.jsonl corpora; default generates toy data")
    p.add_argument("-v", "--verbose", action="store_true")


COMMANDS = {
    "gen-data": "write the synthetic toy domains and a manifest of realized stats",
    "train": "train the ID diffusion model (cached checkpoints + loss curve)",
    "sweep-t": "reconstruction loss per dataset over diffusion steps",
    "sweep-steps": "reconstruction loss over training checkpoints",
    "model-size": "OOD/ID loss ratio for base and large presets",
    "length-bins": "per-word loss by sentence length, short- vs long-trained",
    "detect": "AUROC/FAR95 for every detector and OOD domain",
    "sweep-lambda": "AUROC of the combined score over the lambda grid",
    "sweep-beta": "loss and AUROC for several beta ranges",
    "fewshot": "detection AUROC with K training sentences over several seeds",
    "project": "2-D PCA of sentence representations",
    "distinct": "distinct-n of sampled sentences",
    "stats": "corpus statistics for each (ID, OOD) pair",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffood", description="Diffusion-based OOD detection experiments at toy scale.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p)
        if name == "gen-data":
            p.add_argument("--sentences", type=int, default=2000, help="sentences per domain")
            p.add_argument("--overlap", type=float, default=0.4)
        if name == "detect":
            p.add_argument("--detectors", default=",".join(ex.detect.DETECTORS),
                           help="comma-separated subset of " + ",".join(ex.detect.DETECTORS))
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def make_spec(args: argparse.Namespace) -> ex.ExperimentSpec:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = str(args.out)
    if args.data_dir is not None:
        cfg["data_dir"] = str(args.data_dir)
    try:
        return ex.ExperimentSpec.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _print_rows(rows) -> None:
    for r in rows:
        print(",".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def run(args: argparse.Namespace) -> None:
    spec = make_spec(args)
    cmd = args.command
    if cmd == "gen-data":
        out = Path(spec.out) / "data"
        sizes = {d: args.sentences for d in ("questions", "captions", "reviews", "news")}
        manifest = gen_toy_domains(out, sizes, args.overlap, spec.data_seed)
        print(json.dumps(manifest["domains"], indent=2, sort_keys=True))
        print(f"wrote corpora to {out}")
        return
    ws = ex.Workspace(spec)
    if cmd == "train":
        ckpts = ex.diffusion_model(spec, ws)
        out = Path(spec.out) / "train"
        out.mkdir(parents=True, exist_ok=True)
        write_curve(ckpts[-1].history, out / "curve.csv")
        ex.write_manifest(out, spec, {f"step{c.step}": c for c in ckpts})
        print(f"trained {ckpts[-1].step} steps; final checkpoint digest {ckpts[-1].digest}")
        return
    if cmd == "detect":
        dets = [d.strip() for d in args.detectors.split(",") if d.strip()]
        bad = set(dets) - set(ex.detect.DETECTORS)
        if bad or not dets:
            raise UsageError(f"unknown detectors: {sorted(bad)}")
        _print_rows(ex.run_detection(spec, ws, detectors=dets))
        return
    runners = {
        "sweep-t": ex.run_sweep_t,
        "sweep-steps": ex.run_sweep_steps,
        "model-size": ex.run_model_size,
        "length-bins": ex.run_length_bins,
        "sweep-lambda": ex.run_lambda_sweep,
        "sweep-beta": ex.run_beta_sweep,
        "fewshot": lambda s, w: ex.run_fewshot(s, w)[1],
        "project": ex.run_project,
        "distinct": ex.run_distinct,
        "stats": ex.run_stats,
    }
    rows = runners[cmd](spec, ws)
    _print_rows(rows if cmd != "project" else rows[:5])


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"diffood: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            run(args)
    except UsageError as exc:
        print(f"diffood: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError, NonFiniteError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"diffood: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
