"""Command-line entry points for the full lifecycle.

Subcommands: gen-synth, train, build-index, search, eval, analyze-errors,
serve. Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import index as index_mod
from . import metrics as metrics_mod
from . import synthetic as synthetic_mod
from . import training as training_mod
from . import vocab as vocab_mod
from .encoder import EncoderConfig, init_params, load_checkpoint, save_checkpoint
from .errors import DataError, UsageError
from .store import load_store

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we own the exit codes."""

    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ovis", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--concepts", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--images", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--label-fraction", type=float, default=0.3)
    p.add_argument(
        "--labelled-concept-fraction",
        type=float,
        default=1.0,
        help="restrict ILP labels to this fraction of concepts (the rest stay open-vocabulary)",
    )
    p.add_argument("--holdout-images", type=int, default=60)
    p.add_argument("--distractor-images", type=int, default=150)

    p = sub.add_parser("train", help="train the alignment model")
    p.add_argument("--corpus", required=True, help="corpus directory (from gen-synth)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--mask-prob", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=training_mod.MODES, default="both")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=128)
    p.add_argument("--max-text-len", type=int, default=32)
    p.add_argument("--metrics-log", help="CSV loss log path")

    p = sub.add_parser("build-index", help="precompute the similarity index")
    p.add_argument("--images", required=True, help="image metadata JSONL")
    p.add_argument("--features", required=True, help="feature file (.ftr)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--measure", default="cosine")
    p.add_argument("--out", required=True, help="index output path")

    p = sub.add_parser("search", help="one-shot query against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--q", required=True, help="query text")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("eval", help="mAP/precision report")
    p.add_argument("--gt", required=True, help="ground truth JSONL")
    p.add_argument("--results", help="ranked results JSONL")
    p.add_argument("--index", help="query the index for every GT query instead")
    p.add_argument("--vocab", help="vocabulary (required with --index)")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--thresholds", default="0.3,0.5,0.7")
    p.add_argument("--out", help="write the JSON report here (stdout otherwise)")
    p.add_argument("--csv", help="also write a CSV export here")

    p = sub.add_parser(
        "analyze-errors", help="per-query error decomposition"
    )
    p.add_argument("--gt", required=True)
    p.add_argument("--results", help="ranked results JSONL")
    p.add_argument("--index", help="query the index for every GT query instead")
    p.add_argument("--vocab", help="vocabulary (required with --index)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="write the CSV report here (stdout otherwise)")

    p = sub.add_parser("serve", help="run the HTTP search service")
    p.add_argument("--index", action="append", required=True, help="index path (repeatable)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8040)
    p.add_argument("--media-root", help="directory with image files (OVIS_MEDIA_ROOT overrides)")
    p.add_argument("--k-default", type=int, default=10)
    p.add_argument("--measure-default", help="default similarity measure (first index otherwise)")
    p.add_argument("--cors", action="store_true", help="allow cross-origin requests")
    p.add_argument("--static-root", help="serve these files at / (web UI build)")

    return parser


def _cmd_gen_synth(args) -> int:
    corpus = synthetic_mod.generate_synthetic_corpus(
        concept_count=args.concepts,
        feature_dim=args.feature_dim,
        images=args.images,
        noise=args.noise,
        seed=args.seed,
        label_fraction=args.label_fraction,
        labelled_concept_fraction=args.labelled_concept_fraction,
        holdout_images=args.holdout_images,
        distractor_images=args.distractor_images,
    )
    manifest = synthetic_mod.write_corpus(corpus, args.out)
    print(f"wrote corpus to {args.out} (manifest {manifest})")
    print(f"concepts: {' '.join(corpus.concepts)}")
    print(f"labelled: {' '.join(sorted(corpus.labelled_concepts))}")
    return EXIT_OK


def _cmd_train(args) -> int:
    vocab, train_store, examples = synthetic_mod.load_training_inputs(args.corpus)
    config = EncoderConfig(
        vocab_size=vocab.size,
        layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        ffn_dim=args.ffn_dim,
        max_text_len=args.max_text_len,
        feature_dim=train_store.feature_dim,
    )
    params = init_params(config, seed=args.seed)
    tc = training_mod.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        mask_prob=args.mask_prob,
        seed=args.seed,
        mode=args.mode,
        log_path=args.metrics_log,
    )
    result = training_mod.train(params, examples, tc, vocab.mask_id)
    save_checkpoint(result.params, args.out)
    print(
        f"trained {args.epochs} epochs ({len(result.steps)} steps); "
        f"epoch loss {result.epoch_means[0]:.4f} -> {result.epoch_means[-1]:.4f}"
    )
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_build_index(args) -> int:
    store = load_store(args.images, args.features)
    params = load_checkpoint(args.checkpoint)
    idx = index_mod.build_index(store, params, args.measure)
    index_mod.save_index(idx, args.out)
    print(
        f"index written to {args.out}: {idx.n_instances} instances x "
        f"{idx.vocab_size} tokens, measure {idx.measure}, "
        f"fingerprint {idx.fingerprint:#010x}"
    )
    return EXIT_OK


def _cmd_search(args) -> int:
    idx = index_mod.load_index(args.index)
    vocab = vocab_mod.load_vocabulary(args.vocab)
    result = index_mod.score_query(idx, vocab, args.q, args.k)
    for hit in result.hits:
        x, y, w, h = hit.box
        print(
            f"{hit.rank}\t{hit.score:.6f}\t{hit.image_id}\t"
            f"{x:g},{y:g},{w:g},{h:g}"
        )
    if result.unk:
        print("note: query contains out-of-dictionary words", file=sys.stderr)
    if result.k_capped:
        print(f"note: only {len(result.hits)} instances in the index", file=sys.stderr)
    return EXIT_OK


def _results_for_eval(args) -> dict[str, list[metrics_mod.Detection]]:
    if bool(args.results) == bool(args.index):
        raise UsageError("provide exactly one of --results or --index")
    if args.results:
        return metrics_mod.load_results(args.results)
    if not args.vocab:
        raise UsageError("--index needs --vocab for query tokenization")
    idx = index_mod.load_index(args.index)
    vocab = vocab_mod.load_vocabulary(args.vocab)
    gt = metrics_mod.load_ground_truth(args.gt)
    results = {}
    for query in gt.queries():
        r = index_mod.score_query(idx, vocab, query, args.k)
        results[query] = [metrics_mod.Detection(h.image_id, h.box) for h in r.hits]
    return results


def _cmd_eval(args) -> int:
    gt = metrics_mod.load_ground_truth(args.gt)
    results = _results_for_eval(args)
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    config = metrics_mod.EvalConfig(k=args.k, iou_thresholds=thresholds)
    report = metrics_mod.map_and_precision(results, gt, config)
    doc = report.to_json()
    if args.out:
        Path(args.out).write_text(doc + "\n")
        print(f"report written to {args.out}")
    else:
        print(doc)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"CSV written to {args.csv}")
    print(
        "mAP@{k}: ".format(k=args.k)
        + "  ".join(f"{t:g}:{report.map_at[t] * 100:.1f}" for t in thresholds)
        + f"  all:{report.map_all * 100:.1f}"
    )
    return EXIT_OK


def _cmd_analyze_errors(args) -> int:
    gt = metrics_mod.load_ground_truth(args.gt)
    results = _results_for_eval(args)
    breakdowns = {}
    for query, hits in results.items():
        breakdowns[query] = metrics_mod.error_analysis(
            hits, gt.positives(query), args.threshold, args.k
        )
    if args.out:
        metrics_mod.write_error_report(breakdowns, args.out)
        print(f"error report written to {args.out}")
    else:
        print("query,ap,e_ord,e_iou,e_bg")
        for query in sorted(breakdowns):
            b = breakdowns[query]
            print(f"{query},{b.ap:.6f},{b.e_ord:.6f},{b.e_iou:.6f},{b.e_bg:.6f}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    indexes = [index_mod.load_index(p) for p in args.index]
    vocab = vocab_mod.load_vocabulary(args.vocab)
    config = ServiceConfig(
        indexes={idx.measure: idx for idx in indexes},
        vocab=vocab,
        default_measure=args.measure_default or indexes[0].measure,
        default_k=args.k_default,
        media_root=args.media_root,
        cors=args.cors,
        static_root=args.static_root,
    )
    app = create_app(config)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "train": _cmd_train,
    "build-index": _cmd_build_index,
    "search": _cmd_search,
    "eval": _cmd_eval,
    "analyze-errors": _cmd_analyze_errors,
    "serve": _cmd_serve,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, json.JSONDecodeError, np.linalg.LinAlgError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
