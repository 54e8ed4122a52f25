"""Command-line entry point: gen | train | predict | eval | phoc.

Exit codes: 0 success, 1 usage error, 2 validation or parse error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import ABLATIONS, load_run_config, parse_config_text
from .errors import M4CError, ValidationError
from .featurize import Manifest, load_scene_pack, make_batch, manifest_path_for, phoc
from .metrics import METRICS, evaluate_set
from .synthgen import FAMILIES, SynthSpec, generate_dataset

log = logging.getLogger("m4c")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
CHECKPOINT = "model.ckpt"
CONFIG_FILE = "config.txt"
METRICS_LOG = "metrics.log"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser():
    p = _Parser(prog="m4c", description="Pointer-augmented multimodal transformer for scene-text QA.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--family", choices=FAMILIES, default="mixed")
    g.add_argument("--n-train", type=int, default=5000)
    g.add_argument("--n-val", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True, help="directory with train.jsonl, val.jsonl and manifest.json")
    t.add_argument("--out", required=True, help="run directory for checkpoint, config and metrics log")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--metric", choices=sorted(METRICS), default="exact")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), default="none")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    r = sub.add_parser("predict", help="decode answers for a scene file")
    r.add_argument("--model", required=True, help="run directory written by train")
    r.add_argument("--data", required=True, help="scene-pack file (manifest.json alongside)")
    r.add_argument("--out", required=True)
    r.add_argument("--max-steps", type=int)

    e = sub.add_parser("eval", help="score a prediction file")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=sorted(METRICS), default="exact")
    e.add_argument("--out", help="optional JSON report path")

    h = sub.add_parser("phoc", help="print the set indices of a word's PHOC vector")
    h.add_argument("word")
    return p


def _resolve_run(args, manifest):
    overrides = {}
    if args.config:
        overrides.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    overrides.update(getattr(args, "overrides", None) or _parse_set(args.set))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.ablation != "none":
        overrides.update({k: str(v).lower() for k, v in ABLATIONS[args.ablation].items()})
    # the answer vocabulary size comes from the dataset unless pinned explicitly
    overrides.setdefault("V", str(len(manifest.answer_vocab)))
    return load_run_config(None, overrides)


def cmd_gen(args):
    spec = SynthSpec(seed=args.seed, family=args.family)
    paths = generate_dataset(spec, args.n_train, args.n_val, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    from .model import M4C, FeatureDims
    from .train import train_loop

    data = Path(args.data)
    manifest = Manifest.load(data / "manifest.json")
    run = _resolve_run(args, manifest)
    caps = run.model.caps
    train = load_scene_pack(data / "train.jsonl", manifest, caps)
    val_path = data / "val.jsonl"
    val = load_scene_pack(val_path, manifest, caps) if val_path.exists() else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(run.to_text(), encoding="utf-8")
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    log_path = out / METRICS_LOG
    log_path.write_text("", encoding="utf-8")
    model = M4C(run.model, FeatureDims.from_manifest(manifest), seed=run.seed)
    if run.schedule.max_iters == 0:
        nc.save_checkpoint(out / CHECKPOINT, model.state_dict())
        print(json.dumps({"iterations": 0, "checkpoint": str(out / CHECKPOINT)}))
        return EXIT_OK

    def progress(it, loss, val_metric):
        log.info("iter %d train_loss %.6f val %.4f", it, loss, val_metric)

    res = train_loop(model, train, manifest, run, val, metric=args.metric, log_path=log_path, progress=progress)
    nc.save_checkpoint(out / CHECKPOINT, model.state_dict())
    summary = {"iterations": run.schedule.max_iters, "skipped": res.skipped, "best_iter": res.best_iter,
               "best_metric": res.best_metric, "final_loss": res.losses[-1] if res.losses else None}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def load_run_dir(run_dir):
    """Model and manifest from a directory written by ``train``."""
    from .model import M4C, FeatureDims

    run_dir = Path(run_dir)
    run = load_run_config(run_dir / CONFIG_FILE)
    manifest = Manifest.load(run_dir / "manifest.json")
    model = M4C(run.model, FeatureDims.from_manifest(manifest), seed=run.seed)
    model.load_state_dict(nc.load_checkpoint(run_dir / CHECKPOINT))
    return model, manifest


def cmd_predict(args):
    from .decode import decode_batch, write_predictions

    model, manifest = load_run_dir(args.model)
    scenes = load_scene_pack(args.data, manifest, model.config.caps)
    results = []
    for start in range(0, len(scenes), 256):
        chunk = scenes[start:start + 256]
        results.extend(decode_batch(model, make_batch(chunk, manifest, model.config.caps),
                                    manifest.answer_vocab, args.max_steps))
    write_predictions(args.out, [s.id for s in scenes], results)
    print(json.dumps({"predictions": len(results), "out": str(args.out)}))
    return EXIT_OK


def cmd_eval(args):
    from .decode import read_predictions

    manifest_path = manifest_path_for(args.data)
    manifest = Manifest.load(manifest_path) if manifest_path.exists() else None
    scenes = load_scene_pack(args.data, manifest)
    preds = {k: rec["answer"] for k, rec in read_predictions(args.pred).items()}
    report = evaluate_set(preds, scenes, args.metric)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps({"metric": report.metric, "count": report.count, "mean": report.mean,
                      "missing": report.missing}, sort_keys=True))
    return EXIT_OK


def cmd_phoc(args):
    print(json.dumps([int(i) for i in np.flatnonzero(phoc(args.word))]))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "phoc": cmd_phoc}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "set", None) is not None:
            args.overrides = _parse_set(args.set)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (M4CError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
