"""Command line entry point: ``visaff <subcommand> ...``.

Exit codes: 0 success, 1 validation error or missing prerequisite, 2 I/O or
remote failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("visaff")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    """Bad flags or a missing prerequisite file (exit 1)."""


class IOFailure(Exception):
    """Remote or filesystem failure after the inputs were validated (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _require(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _dump_json(path: Path, obj) -> Path:
    return _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _announce(*paths: Path) -> None:
    for p in paths:
        print(f"wrote {p}")


# ------------------------------------------------------------------ commands


def cmd_gen_synthetic(args) -> int:
    from .datamodel import load_dataset, save_dataset
    from .providers.synthetic import generate_dataset, load_spec_file, populate_caches, standard_benchmark

    if args.spec:
        spec, shape = load_spec_file(_require(args.spec, "spec file"))
    else:
        spec, shape = standard_benchmark(args.benchmark)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(spec, shape, args.seed)
    ds_path = out / "dataset.jsonl"
    save_dataset(dataset, ds_path)
    load_dataset(ds_path)
    caches = populate_caches(dataset, spec, args.seed, out / "features")
    spec_path = _dump_json(out / "synthetic_spec.json",
                           {"spec": spec.to_dict(), "corpus": shape.__dict__, "seed": args.seed})
    _announce(ds_path, *(c.path for c in caches.values()), spec_path)
    return EXIT_OK


def cmd_extract(args) -> int:
    from .datamodel import load_dataset
    from .prompting import PromptTemplates, VadLexicon
    from .providers.cache import FeatureCache
    from .providers.records import FeatureKey
    from .providers.remote import REMOTE_TAG, EmbeddingClient, EndpointConfig, extract_dataset

    dataset = load_dataset(_require(args.dataset, "dataset"))
    cache_path = Path(args.cache)
    if cache_path.exists() and cache_path.stat().st_size and not args.resume:
        raise UsageError(f"cache {cache_path} already exists; pass --resume to continue it")
    templates = PromptTemplates.load(_require(args.template_file, "template file") if args.template_file else None)
    lexicon = VadLexicon.from_tsv(_require(args.vad_lexicon, "VAD lexicon") if args.vad_lexicon else None)
    pending = len(dataset)
    if cache_path.exists() and cache_path.stat().st_size:
        cache = FeatureCache(cache_path)
        pending = sum(FeatureKey(u.conv_id, u.index, "visual", REMOTE_TAG) not in cache
                      for u in dataset.utterances())
    manifest_path = Path(args.manifest or f"{cache_path}.manifest.json")
    if pending == 0:
        _dump_json(manifest_path, {"extracted": 0, "skipped": len(dataset), "failed": [], "requests": 0})
        print(f"cache complete, nothing to extract ({len(dataset)} utterances)")
        _announce(cache_path, manifest_path)
        return EXIT_OK
    try:
        endpoint = EndpointConfig.resolve(args.endpoint, timeout=args.timeout, retries=args.retries)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with EmbeddingClient(endpoint) as client:
        report = extract_dataset(dataset, client, cache_path, lexicon, templates, args.frames_per_clip,
                                 args.window, args.top_n, args.workers, args.base_dir or Path(args.dataset).parent)
        manifest = {**report.manifest(), "requests": client.requests_sent}
    _dump_json(manifest_path, manifest)
    print(f"extracted {len(report.extracted)}, skipped {len(report.skipped)}, failed {len(report.failures)}")
    _announce(cache_path, manifest_path)
    return EXIT_IO if report.failures else EXIT_OK


def _train_config(args):
    from .training import TrainConfig

    overrides = {
        "epochs": args.epochs, "learning_rate": args.learning_rate, "batch_size": args.batch_size,
        "hidden": args.hidden, "lambda_cl": args.lambda_cl, "lambda_aux": args.lambda_aux,
        "patience": args.patience, "gate": args.gate, "retrieval": args.retrieval, "seed": args.seed,
    }
    if args.no_text:
        overrides["use_text"] = False
    if args.no_audio:
        overrides["use_audio"] = False
    config_path = _require(args.config, "config file") if args.config else None
    return TrainConfig.load(config_path, **overrides)


def _load_inputs(args):
    from .datamodel import load_dataset
    from .providers.cache import open_caches

    dataset = load_dataset(_require(args.dataset, "dataset"))
    caches = open_caches(_require(args.features, "feature directory"))
    for m in ("visual", "text", "audio"):
        if m not in caches:
            raise UsageError(f"missing feature cache: {Path(args.features) / f'{m}.vaff'}")
    return dataset, caches


def _train_and_eval(config, dataset, caches, out: Path, split: str):
    from .training import dumps_traces, evaluate, train

    result = train(config, dataset, caches)
    ckpt = _write(out / "checkpoint.ckpt", result.checkpoint_text())
    log_path = _write(out / "train_log.jsonl", result.log_text())
    report, traces = evaluate(result.params, dataset, split, caches, config.options())
    metrics = _dump_json(out / f"metrics_{split}.json", report.to_json())
    trace_path = _write(out / f"traces_{split}.jsonl", dumps_traces(traces))
    return report, (ckpt, log_path, metrics, trace_path)


def cmd_train(args) -> int:
    config = _train_config(args)
    dataset, caches = _load_inputs(args)
    _, paths = _train_and_eval(config, dataset, caches, Path(args.out), "val")
    _announce(*paths)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .fusion import FusionParams
    from .training import TrainConfig, dumps_traces, evaluate

    params, header = FusionParams.from_checkpoint(_require(args.checkpoint, "checkpoint").read_text("utf-8"))
    config = TrainConfig.from_dict(header.get("config", {}))
    dataset, caches = _load_inputs(args)
    report, traces = evaluate(params, dataset, args.split, caches, config.options())
    out = Path(args.out)
    paths = (_dump_json(out / f"metrics_{args.split}.json", report.to_json()),
             _write(out / f"traces_{args.split}.jsonl", dumps_traces(traces)))
    print(f"{args.split}: weighted F1 {report.weighted_f1:.4f}, accuracy {report.accuracy:.4f}")
    _announce(*paths)
    return EXIT_OK


def _parse_edges(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --edges {text!r}") from None


def cmd_bins(args) -> int:
    from .metrics import bin_traces
    from .training import load_traces

    traces = load_traces(_require(args.traces, "trace export"))
    if not traces:
        raise UsageError("trace export is empty")
    report = bin_traces(traces, len(traces[0].logits), _parse_edges(args.edges))
    out = Path(args.out)
    paths = (_dump_json(out / "bins.json", report.to_json()), _write(out / "bins.csv", report.to_csv()))
    _announce(*paths)
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    from .theory import LinearBoundProblem, bound_check

    problem = LinearBoundProblem(d=args.dim, B=args.radius, flip=args.flip)
    report = bound_check(problem, args.n, args.delta, args.resamples, args.draws, seed=args.seed)
    summary = report.to_json()
    path = _dump_json(Path(args.out) / "bound.json", summary)
    verdict = "within" if report.violation_fraction <= report.tolerance else "ABOVE"
    print(f"violation fraction {report.violation_fraction:.4f} over {report.resamples} resamples "
          f"({verdict} tolerance {report.tolerance:.4f})")
    _announce(path)
    return EXIT_OK


def cmd_verify_decomposition(args) -> int:
    from .theory import RiskSamples, gate_loss_correlation, risk_decomposition
    from .training import load_traces

    traces = load_traces(_require(args.traces, "trace export"))
    samples = RiskSamples.from_traces(traces, args.clip)
    report = {
        "decomposition": risk_decomposition(samples).to_json(),
        "gate_loss_correlation": gate_loss_correlation(traces, args.clip).to_json(),
    }
    path = _dump_json(Path(args.out) / "decomposition.json", report)
    d = report["decomposition"]
    print(f"identity residual {d['identity_residual']:.3e}, slack {d['slack']:.3e}, "
          f"Cov(c, l_v) {d['cov_c_loss_v']:.4f}")
    _announce(path)
    return EXIT_OK


def cmd_seeds(args) -> int:
    from dataclasses import replace

    from .metrics import seed_average

    base = _train_config(args)
    dataset, caches = _load_inputs(args)
    out = Path(args.out)
    runs, paths = [], []
    for k in range(args.n):
        config = replace(base, seed=base.seed + k)
        report, run_paths = _train_and_eval(config, dataset, caches, out / f"seed_{config.seed}", args.split)
        runs.append((config.to_dict(), report))
        paths.extend(run_paths)
    agg = seed_average(runs)
    paths.append(_dump_json(out / "aggregate.json", agg.to_json()))
    wf1 = agg.metrics["weighted_f1"]
    print(f"weighted F1 over {args.n} seeds: {wf1['mean']:.4f} +/- {wf1['std']:.4f}")
    _announce(*paths)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_training_flags(p) -> None:
    from .training import TrainConfig

    d = TrainConfig()
    p.add_argument("--dataset", required=True, help="dataset JSONL (required)")
    p.add_argument("--features", required=True, help="directory holding visual/text/audio .vaff caches (required)")
    p.add_argument("--config", default=None, help="TrainConfig JSON file; flags override it (default: %(default)s)")
    p.add_argument("--out", default="runs/train", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: {d.seed})")
    p.add_argument("--epochs", type=int, default=None, help=f"training epochs (default: {d.epochs})")
    p.add_argument("--learning-rate", type=float, default=None, help=f"Adam step size (default: {d.learning_rate})")
    p.add_argument("--batch-size", type=int, default=None,
                   help=f"conversations per batch (default: {d.batch_size})")
    p.add_argument("--hidden", type=int, default=None, help=f"hidden width (default: {d.hidden})")
    p.add_argument("--lambda-cl", type=float, default=None, help=f"contrastive weight (default: {d.lambda_cl})")
    p.add_argument("--lambda-aux", type=float, default=None,
                   help=f"auxiliary visual loss weight (default: {d.lambda_aux})")
    p.add_argument("--patience", type=int, default=None, help=f"early-stop patience (default: {d.patience})")
    p.add_argument("--gate", choices=("reliability", "closed", "open"), default=None,
                   help=f"gate mode (default: {d.gate})")
    p.add_argument("--retrieval", choices=("sequence", "single"), default=None,
                   help=f"retrieval key mode (default: {d.retrieval})")
    p.add_argument("--no-text", action="store_true", help="drop the textual reference (default: False)")
    p.add_argument("--no-audio", action="store_true", help="drop the acoustic reference (default: False)")


def build_parser() -> argparse.ArgumentParser:
    from .prompting import DEFAULT_FRAMES, DEFAULT_TOP_N, DEFAULT_WINDOW

    parser = _Parser(prog="visaff", description="Reliability-gated multimodal emotion recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: False)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset and feature caches")
    p.add_argument("--spec", default=None, help="JSON file with 'spec' and 'corpus' sections (default: %(default)s)")
    p.add_argument("--benchmark", choices=("separable", "corrupted"), default="separable",
                   help="built-in benchmark used when --spec is absent (default: %(default)s)")
    p.add_argument("--out", default="synthetic", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("extract", help="fill the visual cache from the embedding service")
    p.add_argument("--dataset", required=True, help="dataset JSONL (required)")
    p.add_argument("--cache", required=True, help="visual cache file to create or extend (required)")
    p.add_argument("--endpoint", default=None,
                   help="service base URL; VISAFF_ENDPOINT overrides it (default: %(default)s)")
    p.add_argument("--frames-per-clip", type=int, default=DEFAULT_FRAMES,
                   help="frames sampled per clip (default: %(default)s)")
    p.add_argument("--template-file", default=None, help="prompt template file (default: bundled)")
    p.add_argument("--vad-lexicon", default=None, help="VAD lexicon TSV (default: bundled sample)")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="context window (default: %(default)s)")
    p.add_argument("--top-n", type=int, default=DEFAULT_TOP_N, help="VAD terms per prompt (default: %(default)s)")
    p.add_argument("--workers", type=int, default=4, help="concurrent requests (default: %(default)s)")
    p.add_argument("--timeout", type=float, default=30.0, help="request timeout in seconds (default: %(default)s)")
    p.add_argument("--retries", type=int, default=3, help="retries per request (default: %(default)s)")
    p.add_argument("--base-dir", default=None, help="root for media paths (default: dataset directory)")
    p.add_argument("--manifest", default=None, help="failure manifest path (default: <cache>.manifest.json)")
    p.add_argument("--resume", action="store_true", help="continue an existing cache (default: False)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the fusion head on cached features")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and export gate traces")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train (required)")
    p.add_argument("--dataset", required=True, help="dataset JSONL (required)")
    p.add_argument("--features", required=True, help="directory holding the feature caches (required)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split (default: %(default)s)")
    p.add_argument("--out", default="runs/eval", help="output directory (default: %(default)s)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bins", help="confidence-binned gain of the full model over the visual classifier")
    p.add_argument("--traces", required=True, help="trace JSONL written by eval (required)")
    p.add_argument("--edges", default="0,0.2,0.4,0.6,0.8,1", help="bin edges (default: %(default)s)")
    p.add_argument("--out", default="runs/bins", help="output directory (default: %(default)s)")
    p.set_defaults(func=cmd_bins)

    p = sub.add_parser("verify-bound", help="Monte Carlo check of the generalization bound on a linear class")
    p.add_argument("--n", type=int, default=200, help="training-set size (default: %(default)s)")
    p.add_argument("--delta", type=float, default=0.1, help="confidence parameter (default: %(default)s)")
    p.add_argument("--resamples", type=int, default=200, help="training-set draws (default: %(default)s)")
    p.add_argument("--draws", type=int, default=200, help="sign vectors per estimate (default: %(default)s)")
    p.add_argument("--dim", type=int, default=5, help="input dimension (default: %(default)s)")
    p.add_argument("--radius", type=float, default=2.0, help="weight-norm bound B (default: %(default)s)")
    p.add_argument("--flip", type=float, default=0.1, help="label flip rate (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--out", default="runs/bound", help="output directory (default: %(default)s)")
    p.set_defaults(func=cmd_verify_bound)

    p = sub.add_parser("verify-decomposition", help="risk decomposition and gate/loss covariances from traces")
    p.add_argument("--traces", required=True, help="trace JSONL written by eval (required)")
    p.add_argument("--clip", type=float, default=10.0, help="loss bound M (default: %(default)s)")
    p.add_argument("--out", default="runs/decomposition", help="output directory (default: %(default)s)")
    p.set_defaults(func=cmd_verify_decomposition)

    p = sub.add_parser("seeds", help="train and evaluate over consecutive seeds, then aggregate")
    _add_training_flags(p)
    p.add_argument("--n", type=int, default=5, help="number of seeds (default: %(default)s)")
    p.add_argument("--split", choices=("val", "test"), default="test", help="reported split (default: %(default)s)")
    p.set_defaults(func=cmd_seeds)
    return parser


def main(argv=None) -> int:
    from .datamodel import DatasetError
    from .providers.cache import CacheError
    from .providers.remote import RemoteError
    from .training import MissingFeaturesError, TrainingDivergedError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, MissingFeaturesError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IOFailure, RemoteError, CacheError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
