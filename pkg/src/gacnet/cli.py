"""Command line entry point: ``gacnet {train,eval,ablate,infer,make-data}``."""
import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SceneSpec, expand_specs, generate_scene, load_frame, write_dataset
from .errors import GACNetError
from .train import (TrainConfig, evaluate, infer_and_plot, nearest_fill_baseline, resolve_seed,
                    run_ablation, train)


def _load_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config {path} not found")
    return json.loads(path.read_text())


def cmd_train(args):
    cfg = resolve_seed(TrainConfig.from_dict(_load_json(args.config)))
    record, _ = train(cfg, args.out)
    best = dict(record.val_reports)[record.best_epoch]
    print(f"trained {record.steps} steps in {record.wall_time:.1f}s; best epoch {record.best_epoch}")
    print(json.dumps({"checkpoint": record.checkpoint, "best": best.to_dict()}, sort_keys=True))
    return 0


def cmd_eval(args):
    res = evaluate(args.ckpt, args.data)
    print(res.table(Path(args.ckpt).stem))
    if args.baseline:
        print()
        print(nearest_fill_baseline({"root": str(args.data)}).table("nearest fill"))
    if args.json:
        Path(args.json).write_text(res.to_json())
    else:
        print(json.dumps(res.aggregate.to_dict(), sort_keys=True))
    return 0


def cmd_ablate(args):
    cfg = resolve_seed(TrainConfig.from_dict(_load_json(args.config)))
    seeds = args.seeds if args.seeds else [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    res = run_ablation(cfg, seeds=seeds, out_dir=args.out)
    print(res.table())
    print(res.to_json())
    return 0


def cmd_infer(args):
    if args.data:
        frame = load_frame(args.data, args.frame)
    else:
        frame = generate_scene(SceneSpec(seed=int(args.frame)))
    paths, metrics = infer_and_plot(args.ckpt, frame, args.out)
    print(json.dumps({"outputs": paths, "metrics": metrics.to_dict() if metrics else None}, sort_keys=True))
    return 0


def cmd_make_data(args):
    specs = expand_specs(_load_json(args.spec))
    root = write_dataset(specs, args.out)
    print(f"wrote {len(specs)} frames to {root}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="gacnet", description="Depth completion training and evaluation tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a JSON TrainConfig")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory for best.npz and run.json")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--json", help="write the per-frame report here")
    e.add_argument("--baseline", action="store_true", help="also report the nearest-fill baseline")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare variants i-iv")
    a.add_argument("--config", required=True)
    a.add_argument("--out", help="directory for per-run checkpoints and the report")
    a.add_argument("--seeds", type=int, nargs="+")
    a.set_defaults(fn=cmd_ablate)

    i = sub.add_parser("infer", help="predict one frame and write figures")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--frame", required=True, help="frame id (a scene seed when --data is omitted)")
    i.add_argument("--out", required=True)
    i.add_argument("--data", help="dataset directory holding the frame")
    i.set_defaults(fn=cmd_infer)

    m = sub.add_parser("make-data", help="render synthetic scenes into a dataset directory")
    m.add_argument("--spec", required=True, help="JSON list of scene specs or a {count, ...} template")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_make_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (GACNetError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
