"""Command-line entry point.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 when a run
fails at runtime. Progress goes to stderr; machine-readable records go to
files under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import model as am
from .ablation import run_ablation_grid
from .config import config_schema, load_config, parse_value
from .corpus import CorpusSpec, generate, load_manifest
from .errors import ConfigValidation, CurriculumSSLError
from .trainer import _POOL_SELECTION, current_stage, evaluate, make_scorer, _streams, train
from .pool import CurriculumSchedule, PLPool

log = logging.getLogger("curriculum_ssl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigValidation("", message)


def _write_json_atomic(path: Path, data) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _cmd_gen_data(args) -> int:
    raw = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigValidation("spec", str(exc)) from None
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = CorpusSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigValidation("spec", str(exc)) from None
    generate(spec, Path(args.out))
    log.info("corpus written to %s", args.out)
    return EXIT_OK


def _train_config(args):
    return load_config(args.config, args.set, seed=args.seed, data=getattr(args, "data", None))


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(cfg.data)
    resolved = cfg.model_dump()
    _write_json_atomic(out / "config.resolved.json", resolved)
    _write_json_atomic(out / "manifest.json", {
        "config_path": str(args.config) if args.config else None,
        "config": resolved,
        "corpus_checksums": corpus.checksums,
        "artifacts": {
            "runlog": "runlog.jsonl",
            "final_checkpoint": "final.ckpt",
            "checkpoints": "checkpoints/",
            "pool_dump": "pool_dump.jsonl" if cfg.dump_pool else None,
            "config_snapshot": "config.resolved.json",
        },
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": cfg.seed,
    })
    result = train(cfg, corpus, out)
    log.info("final dev TER %.4f (ema %.4f)", result.final_dev_ter, result.final_dev_ter_ema)
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = am.load_checkpoint(args.checkpoint)
    corpus = load_manifest(args.data)
    weights = ckpt.ema if args.weights == "ema" else ckpt.params
    if weights is None:
        raise ConfigValidation("weights", "checkpoint has no EMA weights")
    ter = evaluate(weights, corpus.split(args.split))
    record = {"checkpoint": str(args.checkpoint), "split": args.split, "weights": args.weights, "ter": ter}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(record, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def _parse_axes(items) -> dict:
    axes = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigValidation(item, "axis must look like key=v1,v2,...")
        key, values = item.split("=", 1)
        axes[key.strip()] = [parse_value(v) for v in values.split(",")]
    return axes


def _cmd_ablate(args) -> int:
    cfg = _train_config(args)
    axes = {}
    if args.grid:
        try:
            axes.update(json.loads(Path(args.grid).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigValidation("grid", str(exc)) from None
    axes.update(_parse_axes(args.axis))
    if not axes:
        raise ConfigValidation("axis", "at least one axis is required")
    corpus = load_manifest(cfg.data)
    table = run_ablation_grid(cfg, axes, corpus, Path(args.out))
    sys.stderr.write((Path(args.out) / "ablation.txt").read_text())
    log.info("%d cells written to %s", len(table["rows"]), args.out)
    return EXIT_OK


def _cmd_inspect_pool(args) -> int:
    cfg = _train_config(args)
    ckpt = am.load_checkpoint(args.checkpoint)
    corpus = load_manifest(cfg.data)
    mode = cfg.ssl.selection_mode
    if mode == "supervised":
        raise ConfigValidation("ssl.selection_mode", "supervised mode has no pool")
    selection, key = _POOL_SELECTION[mode]
    teacher = ckpt.ema if ckpt.ema is not None else ckpt.params
    streams = _streams(cfg.seed)
    stage = args.stage
    if stage is None:
        sched = CurriculumSchedule.build(cfg.curriculum.K, cfg.optim.F)
        stage = current_stage(min(max(ckpt.step - cfg.optim.S, 0), cfg.optim.F - 1), sched)
    pool = PLPool(cfg.curriculum.C, cfg.optim.batch_size_unlabeled, cfg.curriculum.K, selection, key,
                  cfg.ssl.tau, rng=streams["pool"])
    pool.refill(corpus.unlabeled, make_scorer(teacher, cfg, streams["weak"], key == "crs"), stage)
    lines = [json.dumps(r, sort_keys=True) for r in pool.dump_records()]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    log.info("stage %d: %d drawn, %d selected", stage, len(pool.drawn), len(pool.entries))
    return EXIT_OK


def _cmd_schema(args) -> int:
    print(json.dumps(config_schema(), indent=2, sort_keys=True))
    return EXIT_OK


def _add_config_args(p, out_required=True):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="corpus directory (overrides config 'data')")
    p.add_argument("--out", required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curriculum-ssl", description="Curriculum pseudo-label training lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{gen-data,train,eval,ablate,inspect-pool,schema}",
                                parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", help="JSON corpus spec; defaults apply to missing keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="supervised warmup then semi-supervised training")
    _add_config_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="corpus TER of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("dev", "test", "labeled"), default="dev")
    p.add_argument("--weights", choices=("student", "ema"), default="student")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of configurations")
    _add_config_args(p)
    p.add_argument("--axis", action="append", metavar="KEY=V1,V2", help="grid axis")
    p.add_argument("--grid", help="JSON object mapping dotted keys to value lists")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("inspect-pool", help="score and select one pool with a checkpoint's teacher")
    _add_config_args(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", type=int)
    p.set_defaults(func=_cmd_inspect_pool)

    p = sub.add_parser("schema", help="print the run-config JSON schema")
    p.set_defaults(func=_cmd_schema)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigValidation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigValidation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CurriculumSSLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
