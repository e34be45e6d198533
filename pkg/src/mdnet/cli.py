"""Command-line surface: corpus generation, two-stage training, extraction,
matching, evaluation, and the pairwise matching benchmark.

Every run writes a JSON snapshot of its resolved parameters next to its
outputs; rerunning with ``--config snapshot.json`` reproduces the run
(explicit flags still override snapshot values).

Exit codes: 0 success, 2 usage or input error, 3 numerical abort.
"""

import json
import os
import sys
from pathlib import Path

# cap BLAS parallelism before numpy is first imported anywhere in the package
_threads = os.environ.get("MDNET_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse

import numpy as np

from . import extractor, matcher, metrics, model, synthwarp, trainer
from .losses import LossWeights
from .trainer import NumericalAbort


def _write_snapshot(path: Path, command: str, params: dict) -> None:
    snap = {"command": command, "params": params}
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _params(args: argparse.Namespace) -> dict:
    skip = {"command", "config", "func"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def cmd_gen_corpus(args) -> int:
    out = Path(args.out)
    synthwarp.generate_corpus(out, count=args.count, size=args.size,
                              seed=args.seed, flat_band_share=args.flat_band_share)
    _write_snapshot(out / "corpus.run.json", "gen-corpus", _params(args))
    print(f"wrote {args.count} textures to {out}", file=sys.stderr)
    return 0


def _train_config(args) -> trainer.TrainConfig:
    if args.preset == "desk":
        base = trainer.desk_priming_config() if args.stage == "priming" \
            else trainer.desk_joint_config()
    else:
        base = trainer.paper_priming_config() if args.stage == "priming" \
            else trainer.paper_joint_config()
    from dataclasses import replace
    overrides = dict(seed=args.seed)
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.batch_pairs is not None:
        overrides["batch_pairs"] = args.batch_pairs
    if args.patch_size is not None:
        overrides["patch_size"] = args.patch_size
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    overrides["loss_weights"] = LossWeights(alpha=args.alpha, beta=args.beta,
                                            gamma=args.gamma)
    overrides["variance_weighting"] = not args.no_variance_weighting
    overrides["dtype"] = args.dtype
    return replace(base, **overrides)


def cmd_train(args) -> int:
    if args.stage == "joint" and not args.from_ckpt and not args.from_scratch:
        print("train: joint stage needs --from CKPT or --from-scratch",
              file=sys.stderr)
        return 2
    corpus = synthwarp.Corpus(Path(args.corpus))
    cfg = _train_config(args)
    out = Path(args.out)
    if args.stage == "priming":
        model_cfg = model.desk_config(args.num_detectors) if args.preset == "desk" \
            else model.ModelConfig(num_detectors=args.num_detectors)
        result = trainer.train_priming(cfg, corpus, model_cfg=model_cfg,
                                       checkpoint_path=out)
    else:
        primed = model.load_weights(Path(args.from_ckpt)) if args.from_ckpt else None
        result = trainer.train_joint(cfg, corpus, primed=primed,
                                     num_detectors=args.num_detectors,
                                     from_scratch=args.from_scratch,
                                     checkpoint_path=out)
    trainer.write_train_log(Path(str(out) + ".log.csv"), result.log)
    _write_snapshot(Path(str(out) + ".run.json"), "train", _params(args))
    print(f"{args.stage} finished: {cfg.iterations} iterations, "
          f"final loss {result.log[-1].total:.4f}", file=sys.stderr)
    return 0


def cmd_extract(args) -> int:
    weights = model.load_weights(Path(args.model))
    image = synthwarp.load_image(Path(args.image))
    cfg = extractor.ExtractConfig(budget=args.budget, threshold=args.threshold,
                                  nms_radius=args.nms,
                                  pyramid_min_dim=args.min_dim,
                                  cross_scale_nms=args.cross_scale_nms)
    feats = extractor.extract(image, weights, cfg)
    extractor.save_features(feats, Path(args.out))
    _write_snapshot(Path(str(args.out) + ".run.json"), "extract", _params(args))
    counts = ", ".join(f"set {n}: {len(s)}" for n, s in enumerate(feats.sets))
    print(f"extracted {feats.total_count()} keypoints ({counts})", file=sys.stderr)
    return 0


def cmd_match(args) -> int:
    f1 = extractor.load_features(Path(args.feat1))
    f2 = extractor.load_features(Path(args.feat2))
    result = matcher.match_full(f1, f2) if args.full \
        else matcher.match_partitioned(f1, f2)
    matcher.write_matches_csv(Path(args.out), result)
    _write_snapshot(Path(str(args.out) + ".run.json"), "match", _params(args))
    print(f"{len(result)} matches, {result.distance_computations} distance "
          f"computations", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    f1 = extractor.load_features(Path(args.feat1))
    f2 = extractor.load_features(Path(args.feat2))
    g = metrics.load_homography_file(Path(args.homography))
    result = matcher.match_partitioned(f1, f2)
    if args.matches_out:
        matcher.write_matches_csv(Path(args.matches_out), result)
    report = metrics.evaluate_pair(f1, f2, g, result)
    metrics.write_report_csv(Path(args.out), [report])
    _write_snapshot(Path(str(args.out) + ".run.json"), "eval", _params(args))
    return 0


def cmd_bench(args) -> int:
    counts = [int(v) for v in args.detectors.split(",")]
    rows = matcher.bench_pairwise(args.images, args.kpts, counts,
                                  seed=args.seed, dim=args.dim,
                                  verify=args.verify)
    matcher.write_bench_csv(Path(args.out), rows)
    _write_snapshot(Path(str(args.out) + ".run.json"), "bench", _params(args))
    for r in rows:
        print(f"N={r.num_sets}: {r.total_s:.2f}s total, {r.ms_per_pair:.2f} ms/pair, "
              f"{r.distances_per_pair} distances/pair, "
              f"speedup {r.speedup_vs_single:.2f}x", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdnet",
                                     description="multi-detector local features")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic texture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flat-band-share", type=float, default=0.4)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=("priming", "joint"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from", dest="from_ckpt", default=None)
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--num-detectors", type=int, default=2)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-pairs", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=4.0)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--no-variance-weighting", action="store_true")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract multi-set features from an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=2048)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--nms", type=int, default=3)
    p.add_argument("--min-dim", type=int, default=256)
    p.add_argument("--cross-scale-nms", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", help="match two feature files")
    p.add_argument("--feat1", required=True)
    p.add_argument("--feat2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--full", action="store_true",
                   help="single-pool baseline instead of partitioned matching")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="evaluate a pair against a ground-truth homography")
    p.add_argument("--feat1", required=True)
    p.add_argument("--feat2", required=True)
    p.add_argument("--homography", required=True,
                   help="text file with 9 numbers, row-major")
    p.add_argument("--out", required=True)
    p.add_argument("--matches-out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="pairwise matching benchmark")
    p.add_argument("--images", type=int, default=40)
    p.add_argument("--kpts", type=int, default=2048)
    p.add_argument("--detectors", default="1,2,4,8")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            snap = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"mdnet: cannot read config snapshot: {exc}", file=sys.stderr)
            return 2
        if snap.get("command") != args.command:
            print(f"mdnet: snapshot is for {snap.get('command')!r}, "
                  f"not {args.command!r}", file=sys.stderr)
            return 2
        defaults = {k: v for k, v in snap.get("params", {}).items()}
        for sp in parser._subparsers._group_actions[0].choices.values():
            sp.set_defaults(**{})
        sub_parser = parser._subparsers._group_actions[0].choices[args.command]
        sub_parser.set_defaults(**defaults)
        args = parser.parse_args(argv)  # explicit flags still override
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"mdnet: numerical abort: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"mdnet: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
