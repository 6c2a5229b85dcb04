"""``qe`` command-line entry point.

Exit codes: 0 success, 1 data/validation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataio, metrics, ratings
from .errors import KeyMismatch, MalformedRecord, NoQualifyingPoint, QEError
from .model import ModelConfig

def report_operating_point(points, target_precision: float):
    """Point with the largest recall whose precision reaches ``target_precision``.

    Recall ties go to the higher precision, then to the higher threshold.
    """
    if not points:
        raise ValueError("empty curve")
    ok = [p for p in points if p.precision is not None and p.precision >= target_precision]
    if not ok:
        raise NoQualifyingPoint(f"no point reaches precision {target_precision}")
    return max(ok, key=lambda p: (p.recall, p.precision, p.threshold))


# -- helpers ----------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, argv, inputs, outputs, manifest_path=None) -> None:
    if not outputs:
        return
    path = manifest_path or f"{outputs[0]}.manifest.json"
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "flags": flags,
        "seed": flags.get("seed"),
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and os.path.isfile(p)},
        "outputs": [str(p) for p in outputs],
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _model_config(args) -> ModelConfig:
    return ModelConfig(proj_dim=args.proj_dim, num_labels=args.num_labels,
                       leaky_slope=args.leaky_slope, dropout_rate=args.dropout)


def _train_config(args, warm_start=None):
    from .training import TrainConfig
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_steps=args.max_steps,
                       eval_every=args.eval_every, seed=args.seed, num_labels=args.num_labels,
                       warm_start=warm_start)


def _load_scores_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["sample_id"])] = float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(f"bad score record: {exc}", lineno, path) from None
    return out


def _write_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


# -- subcommands ------------------------------------------------------------

def cmd_aggregate(args):
    result = ratings.aggregate_dataset(ratings.read_ratings(args.input), args.max_skips)
    ratings.write_scores(args.out, result.scores)
    log_path = args.filter_log or f"{args.out}.filtered.jsonl"
    ratings.write_filter_log(log_path, result.filter_log)
    print(f"kept {len(result.scores)}, filtered {len(result.filter_log)}", file=sys.stderr)
    return [args.input], [args.out, log_path]


def cmd_stability(args):
    a, b = ratings.read_scores(args.a), ratings.read_scores(args.b)
    rep = ratings.stability_report(a, b)
    _write_json(asdict(rep), args.out)
    outputs = [args.out] if args.out else []
    if args.plot:
        from .plotting import plot_score_differences
        plot_score_differences([a[k].value - b[k].value for k in a if k in b], args.plot)
        outputs.append(args.plot)
    return [args.a, args.b], outputs


def cmd_split(args):
    samples = dataio.load_samples(args.input)
    folds = dataio.split_image_disjoint(samples, tuple(args.fractions), args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = ".jsonl" if args.format == "jsonl" else ".cqe"
    outputs = []
    for name, fold in zip(("train", "dev", "test"), folds):
        path = out_dir / f"{name}{ext}"
        dataio.save_samples(fold, path, args.format, force=args.force)
        outputs.append(str(path))
        print(f"{name}: {len(fold)} samples, {len({s.image_id for s in fold})} images",
              file=sys.stderr)
    return [args.input], outputs


def cmd_pretrain(args):
    from .pretrain import pretrain
    pairs = dataio.load_samples(args.pairs)
    dev = dataio.load_samples(args.dev_pairs) if args.dev_pairs else None
    ckpt, history = pretrain(pairs, _train_config(args), _model_config(args), dev_pairs=dev)
    dataio.save_checkpoint(ckpt, args.out)
    outputs = [args.out]
    if args.history:
        import csv
        with open(args.history, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "dev_accuracy"])
            for row in history.records:
                w.writerow(["" if v is None else v for v in row])
        outputs.append(args.history)
    return [args.pairs, args.dev_pairs], outputs


def cmd_train(args):
    from .training import train, write_history_csv
    warm = None
    if args.warm_start:
        warm = dataio.load_checkpoint(args.warm_start, expect=_model_config(args))
    ckpt, history = train(dataio.load_samples(args.train), dataio.load_samples(args.dev),
                          _train_config(args, warm), _model_config(args))
    dataio.save_checkpoint(ckpt, args.out)
    outputs = [args.out]
    if args.history:
        write_history_csv(history, args.history)
        outputs.append(args.history)
    if args.plot:
        from .plotting import plot_history
        plot_history(history, args.plot)
        outputs.append(args.plot)
    print(f"best step {ckpt.step}, dev spearman {ckpt.dev_spearman}", file=sys.stderr)
    return [args.train, args.dev, args.warm_start], outputs


def cmd_grid(args):
    from .training import grid_search, write_grid
    train_set = dataio.load_samples(args.train)
    dev_set = dataio.load_samples(args.dev)
    test_set = dataio.load_samples(args.test) if args.test else None
    result = grid_search(train_set, dev_set, test_set, args.lrs, args.label_grid,
                         _train_config(args), _model_config(args))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path, ckpt_path = out_dir / "grid.csv", out_dir / "grid.json", out_dir / "best.ckpt"
    write_grid(result, csv_path, json_path)
    dataio.save_checkpoint(result.best_checkpoint, ckpt_path)
    print(json.dumps(result.best_row), file=sys.stderr)
    return [args.train, args.dev, args.test], [str(csv_path), str(json_path), str(ckpt_path)]


def cmd_eval(args):
    ckpt = dataio.load_checkpoint(args.model)
    rep = metrics.evaluate(ckpt, dataio.load_samples(args.input))
    _write_json(rep.to_dict(), args.out)
    return [args.model, args.input], [args.out] if args.out else []


def _score(args):
    ckpt = dataio.load_checkpoint(args.model)
    samples = dataio.load_samples(args.input)
    return samples, metrics.score_samples(ckpt, samples)


def cmd_score(args):
    samples, scores = _score(args)
    with open(args.out, "w", encoding="utf-8") as fh:
        for s, v in zip(samples, scores):
            fh.write(json.dumps({"sample_id": s.sample_id, "score": float(v)}) + "\n")
    return [args.model, args.input], [args.out]


def cmd_pr_curve(args):
    if args.scores:
        scores = _load_scores_file(args.scores)
        inputs = [args.scores]
    elif args.model and args.input:
        samples, values = _score(args)
        scores = {s.sample_id: float(v) for s, v in zip(samples, values)}
        inputs = [args.model, args.input]
    else:
        raise _UsageError("pr-curve: give --scores, or both --model and --in")
    annotations = metrics.load_annotations(args.annotations)
    missing = [sid for sid in scores if sid not in annotations]
    if missing:
        raise KeyMismatch(f"{len(missing)} scored samples lack annotations, e.g. {missing[0]!r}")
    # annotations may cover more samples than were scored (e.g. one split of a corpus)
    labels = {sid: metrics.ext_good(annotations[sid]) for sid in scores}
    points = metrics.pr_curve(scores, labels)
    metrics.write_curve_csv(points, args.out)
    summary_path = args.summary or f"{args.out}.summary.json"
    area = metrics.auc(points)
    _write_json({"auc": area, "n": len(scores), "n_ext_good": int(sum(labels.values())),
                 "n_points": len(points)}, summary_path)
    outputs = [args.out, summary_path]
    if args.plot:
        from .plotting import plot_pr_curves
        plot_pr_curves({args.name: points}, args.plot)
        outputs.append(args.plot)
    print(f"AUC {area:.4f}", file=sys.stderr)
    return inputs + [args.annotations], outputs


def cmd_filter(args):
    samples, scores = _score(args)
    kept = [s for s, v in zip(samples, scores) if v > args.threshold]
    rejected = [s for s, v in zip(samples, scores) if not v > args.threshold]
    dataio.save_samples(kept, args.kept, force=args.force)
    dataio.save_samples(rejected, args.rejected, force=args.force)
    print(f"kept {len(kept)}, rejected {len(rejected)}", file=sys.stderr)
    return [args.model, args.input], [args.kept, args.rejected]


def cmd_operating_point(args):
    points = metrics.read_curve_csv(args.curve)
    p = report_operating_point(points, args.target_precision)
    _write_json({"threshold": p.threshold, "recall": p.recall, "precision": p.precision,
                 "n_served": p.n_served}, args.out)
    return [args.curve], [args.out] if args.out else []


def cmd_synth(args):
    """Write a small planted dataset (samples, ratings, annotations) for trying the pipeline."""
    from .synthetic import planted_qe_samples, quantize_eighths
    samples, _ = planted_qe_samples(args.n, args.seed, num_labels=args.num_labels)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    samples_path = out_dir / "samples.jsonl"
    dataio.save_samples(samples, samples_path, force=args.force)
    ratings_path, ann_path = out_dir / "ratings.jsonl", out_dir / "annotations.jsonl"
    with open(ratings_path, "w", encoding="utf-8") as rf, open(ann_path, "w", encoding="utf-8") as af:
        for s in samples:
            p = s.target
            skips = rng.random(10) < 0.05
            yes = rng.random(10) < p
            rs = ["SKIP" if k else ("YES" if y else "NO") for k, y in zip(skips, yes)]
            rf.write(json.dumps({"image_id": s.image_id, "caption_id": s.sample_id,
                                 "ratings": rs}) + "\n")
            raters = [{"correctness": int(min(2, rng.binomial(2, p))),
                       "helpfulness": int(min(2, rng.binomial(2, float(quantize_eighths(p)))))}
                      for _ in range(3)]
            af.write(json.dumps({"sample_id": s.sample_id, "raters": raters}) + "\n")
    return [], [str(samples_path), str(ratings_path), str(ann_path)]


# -- parser -----------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--num-labels", type=int, default=16)
    p.add_argument("--proj-dim", type=int, default=64)
    p.add_argument("--leaky-slope", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.2)


def _add_train_flags(p, lr=1e-5):
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qe", description="Image-caption quality estimation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--manifest", help="run-manifest path (default: <first output>.manifest.json)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("aggregate", help="ratings -> quantized scores")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-skips", type=int, default=2)
    p.add_argument("--filter-log")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("stability", help="compare two scorings of the same items")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("split", help="image-disjoint train/dev/test split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["jsonl", "packed"], default="jsonl")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="image-text matching pretraining")
    p.add_argument("--pairs", required=True)
    p.add_argument("--dev-pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train a QE model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start")
    p.add_argument("--history")
    p.add_argument("--plot")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="learning-rate x label-count grid search")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lrs", type=float, nargs="+", default=[1e-4, 1e-5, 1e-6])
    p.add_argument("--label-grid", type=int, nargs="+", default=[0, 5, 10, 20])
    _add_train_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="Spearman and MSE on labeled samples")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="write per-sample QE scores")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pr-curve", help="ExtGood precision/recall sweep, AUC and plot")
    p.add_argument("--scores")
    p.add_argument("--model")
    p.add_argument("--in", dest="input")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    p.add_argument("--plot")
    p.add_argument("--name", default="QE model")
    p.set_defaults(func=cmd_pr_curve)

    p = sub.add_parser("filter", help="split samples by score > threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--kept", required=True)
    p.add_argument("--rejected", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("operating-point", help="threshold reaching a target precision")
    p.add_argument("--curve", required=True)
    p.add_argument("--target-precision", type=float, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_operating_point)

    p = sub.add_parser("synth", help="write a small planted demo dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--num-labels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def _thread_limit():
    n = int(os.environ.get("QE_THREADS", "0") or 0)
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            inputs, outputs = args.func(args)
        _write_manifest(args, argv, inputs, outputs, args.manifest)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (QEError, OSError, ValueError) as exc:
        print(f"qe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
