"""``peft-forge`` command line: pair -> annotate -> train -> compress -> evaluate.

Exit codes: 0 success, 2 usage, 3 format / missing file, 4 consistency,
5 numeric divergence, 6 parameter out of range.

``PEFT_FORGE_TEMPLATES`` overrides the default prompt-template file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, datapipe, lora, metrics
from .errors import FormatError, ParameterError, PeftForgeError
from .numerics import SeededRng
from .prune import PrunePlan, apply_mask, compute_masks, sparsity_report
from .quant import dense_footprint, dequantize, quantize, storage_footprint
from .train import (Dataset, TrainConfig, build_model, evaluate_loss,
                    make_teacher_task, train_loop)

log = logging.getLogger("peft_forge")

EXIT_USAGE = 2


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dims(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(dims) < 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError("need at least two positive layer widths")
    return dims


# ---- dataset pipeline -----------------------------------------------------------

def cmd_pair(args) -> int:
    ingest = datapipe.ingest_metadata(args.metadata)
    kept, excluded = datapipe.filter_size(ingest.records, args.max_bytes)
    pairs = datapipe.make_pairs(kept)
    for p in pairs:
        problem = datapipe.validate_pair(p)
        if problem:
            raise PeftForgeError(f"internal pairing error for {p.pair_id}: {problem}")
    datapipe.write_pairs(args.out, pairs)
    stats = {
        "seed": args.seed,
        "max_bytes": args.max_bytes,
        "records": len(ingest.records),
        "rejected": [{"line": r.line, "reason": r.reason} for r in ingest.rejects],
        "excluded_by_size": [{"image_id": r.image_id, "byte_size": r.byte_size} for r in excluded],
        "kept_images": len(kept),
        "locations": len({r.location_id for r in kept}),
        "pairs": len(pairs),
    }
    _write_json(args.stats or f"{args.out}.stats.json", stats)
    log.info("%d pairs from %d images (%d oversized, %d rejected rows)",
             len(pairs), len(kept), len(excluded), len(ingest.rejects))
    return 0


def _read_scores(path) -> list:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"score file not found: {p}")
    out = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(datapipe.ReviewScore(d["pair_id"], d["score"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{p}:{lineno}: invalid score record ({exc})") from exc
    return out


def cmd_review(args) -> int:
    pairs = datapipe.read_pairs(args.pairs)
    res = datapipe.filter_review(pairs, _read_scores(args.scores), args.threshold, args.split)
    datapipe.write_pairs(args.out, res.kept)
    _write_json(f"{args.out}.dropped.json", [{"pair_id": pid, "reason": why} for pid, why in res.dropped])
    log.info("kept %d of %d pairs", len(res.kept), len(pairs))
    return 0


def cmd_split(args) -> int:
    pairs = datapipe.read_pairs(args.pairs)
    res = datapipe.build_splits(pairs, args.train_count, args.test_count, args.seed, args.location_disjoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datapipe.write_pairs(out / "train.jsonl", res.train)
    datapipe.write_pairs(out / "test.jsonl", res.test)
    _write_json(out / "manifest.json", res.manifest)
    return 0


def cmd_requests(args) -> int:
    reqs = datapipe.build_annotation_requests(datapipe.read_pairs(args.pairs))
    datapipe.write_requests(args.out, reqs)
    return 0


def cmd_annotate(args) -> int:
    pairs = datapipe.read_pairs(args.pairs)
    reqs = datapipe.read_requests(args.requests)
    joined = datapipe.ingest_annotation_responses(reqs, datapipe.read_responses(args.responses))
    if joined.unmatched or joined.unanswered:
        log.warning("%d responses without request, %d requests without response",
                    len(joined.unmatched), len(joined.unanswered))
    answered = [p for p in pairs if p.pair_id in joined.texts]
    templates = datapipe.load_templates(args.templates or os.environ.get("PEFT_FORGE_TEMPLATES"))
    res = datapipe.emit_annotations(answered, joined.texts, templates, args.seed, args.max_length)
    Path(args.out).write_text(datapipe.serialize_records(res.records), encoding="utf-8")
    _write_json(f"{args.out}.report.json", {
        "seed": args.seed,
        "records": len(res.records),
        "over_length": res.over_length,
        "unmatched_responses": joined.unmatched,
        "unanswered_pairs": joined.unanswered,
    })
    return 0


def cmd_videos(args) -> int:
    _write_json(args.out, datapipe.frame_manifest(datapipe.read_pairs(args.pairs), args.image_dir))
    return 0


# ---- training ----------------------------------------------------------------

def cmd_config(args) -> int:
    text = TrainConfig().dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_task(args) -> int:
    task = make_teacher_task(args.seed, dims=args.dims, n_train=args.n_train, n_val=args.n_val,
                             teacher_rank=args.teacher_rank, delta_scale=args.delta_scale)
    sections = {"meta": {"kind": "teacher-task", "seed": args.seed, "dims": list(args.dims),
                         "layers": len(task.bases)}}
    for i, w in enumerate(task.bases):
        sections[f"layer{i}.base"] = w
    for name, ds in (("train", task.train), ("val", task.val)):
        sections[f"{name}.inputs"] = ds.inputs
        sections[f"{name}.targets"] = ds.targets
    checkpoint.save(args.out, sections)
    return 0


def _load_config(args) -> TrainConfig:
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise FormatError(f"config file not found: {p}")
        cfg = TrainConfig.loads(p.read_text(encoding="utf-8"))
    else:
        cfg = TrainConfig()
    if args.use_qlora is not None:
        cfg.use_qlora = args.use_qlora != 0
        if cfg.use_qlora:
            cfg.qlora_bits = args.use_qlora
    if args.seed_given:
        cfg.seed = args.seed
    if args.max_steps is not None and args.max_steps < 1:
        raise ParameterError("--max-steps must be >= 1")
    TrainConfig(**vars(cfg))  # re-validate overrides
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = checkpoint.load(args.data)
    n_layers = data["meta"]["layers"]
    bases = [data[f"layer{i}.base"] for i in range(n_layers)]
    train = Dataset(data["train.inputs"], data["train.targets"])
    val = Dataset(data["val.inputs"], data["val.targets"]) if "val.inputs" in data else None
    model = build_model(bases, cfg, SeededRng(cfg.seed))
    checks = model.base_checksums()
    initial = evaluate_loss(model, val or train)
    report = train_loop(model, train, cfg, val, max_steps=args.max_steps)
    if model.base_checksums() != checks:
        raise PeftForgeError("frozen base changed during training")
    sections = {"meta": {"kind": "lora-checkpoint", "seed": cfg.seed, "layers": n_layers,
                         "config": cfg.dumps()}}
    for i, layer in enumerate(model.layers):
        sections[f"layer{i}.base"] = layer.base
        if layer.adapter is not None:
            sections[f"layer{i}.adapter"] = layer.adapter
        if layer.mask is not None:
            sections[f"layer{i}.mask"] = layer.mask
    checkpoint.save(args.out, sections)
    out = report.to_dict()
    out.update(seed=cfg.seed, initial_val_loss=initial, final_val_loss=evaluate_loss(model, val or train))
    _write_json(args.report or f"{args.out}.report.json", out)
    log.info("wall time %.2fs", report.wall_time)
    return 0


def _merged_weights(ck: dict) -> dict:
    n = ck["meta"]["layers"]
    out = {}
    for i in range(n):
        base = ck[f"layer{i}.base"]
        stored = ck.get(f"layer{i}.adapter")
        if stored is not None:
            w = lora.merge(stored.bind(base))
        else:
            w = dequantize(base) if not isinstance(base, np.ndarray) else base
        mask = ck.get(f"layer{i}.mask")
        out[f"layer{i}"] = apply_mask(w, mask) if mask is not None else w
    return out


def cmd_compress(args) -> int:
    """Merge adapters, then prune, then quantize (that order, always)."""
    ck = checkpoint.load(args.checkpoint)
    weights = _merged_weights(ck)
    report = {"seed": args.seed, "order": ["merge", "prune", "quantize"],
              "prune": None, "quant": None}
    masks = None
    if args.prune is not None:
        plan = PrunePlan(args.prune, args.prune_mode, frozenset(args.exclude))
        masks = compute_masks(weights, plan)
        weights = {lid: apply_mask(w, masks[lid]) for lid, w in weights.items()}
        report["prune"] = sparsity_report(weights, masks).to_dict()
    sections = {"meta": {"kind": "compressed", "seed": args.seed, "layers": len(weights),
                         "source": ck["meta"].get("kind")}}
    dense_bytes = stored_bytes = 0
    preserved = True
    for lid, w in weights.items():
        dense_bytes += dense_footprint(*w.shape)
        if args.quant is not None:
            q = quantize(w, args.quant, args.block_size)
            sections[f"{lid}.weight"] = q
            stored_bytes += storage_footprint(q)
            if masks is not None:
                preserved &= bool(np.all(dequantize(q)[~masks[lid].mask] == 0.0))
        else:
            sections[f"{lid}.weight"] = w
            stored_bytes += dense_footprint(*w.shape)
        if masks is not None:
            sections[f"{lid}.mask"] = masks[lid]
    if args.quant is not None:
        report["quant"] = {"bits": args.quant, "block_size": args.block_size, "stored_bytes": stored_bytes,
                           "dense16_bytes": dense_bytes, "ratio_to_dense16": stored_bytes / dense_bytes}
    if masks is not None and args.quant is not None:
        report["masked_zeros_preserved"] = preserved
    checkpoint.save(args.out, sections)
    _write_json(args.report or f"{args.out}.report.json", report)
    return 0


# ---- evaluation ------------------------------------------------------------------

def _provider(spec: str):
    if spec == "onehot":
        return metrics.OneHotProvider()
    if spec == "hash":
        return metrics.HashProjectionProvider()
    if spec.startswith("table:"):
        return metrics.TableProvider.from_file(spec[len("table:"):])
    raise ParameterError(f"unknown embedding provider {spec!r}; use onehot, hash or table:PATH")


def cmd_eval(args) -> int:
    if args.pairs:
        pairs = metrics.read_pairs_tsv(args.pairs)
    elif args.candidates and args.references:
        pairs = metrics.read_paired_files(args.candidates, args.references)
    else:
        raise ParameterError("give --pairs, or both --candidates and --references")
    report = metrics.evaluate_corpus(pairs, metrics.BleuConfig(), _provider(args.embeddings), args.jobs)
    out = report.to_dict()
    out.update(seed=args.seed, embeddings=args.embeddings)
    _write_json(args.out, out)
    table = report.table(args.label)
    Path(args.table or f"{args.out}.table.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


# ---- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="peft-forge", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="seed for every random choice (default 0)")
    ap.add_argument("--jobs", type=int, default=1, help="worker cap for parallel scoring (default 1)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pair", help="ingest metadata, drop large images, build >=12-month pairs")
    p.add_argument("--metadata", required=True, help="CSV or JSONL metadata file")
    p.add_argument("--out", required=True, help="output pair file (JSONL)")
    p.add_argument("--max-bytes", type=int, default=datapipe.DEFAULT_MAX_BYTES,
                   help="exclude images strictly larger than this (default 1048576)")
    p.add_argument("--stats", help="stats JSON path (default OUT.stats.json)")
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("review", help="keep pairs whose review score reaches the threshold")
    p.add_argument("--pairs", required=True, help="pair file (JSONL)")
    p.add_argument("--scores", required=True, help='JSONL lines {"pair_id": ..., "score": 0-10}')
    p.add_argument("--out", required=True, help="kept pair file (JSONL)")
    p.add_argument("--threshold", type=int, default=datapipe.REVIEW_THRESHOLD, help="minimum score (default 9)")
    p.add_argument("--split", choices=("train", "test"), default="test",
                   help="unscored pairs are dropped for test, kept for train (default test)")
    p.set_defaults(func=cmd_review)

    p = sub.add_parser("split", help="seeded train/test split with a manifest")
    p.add_argument("--pairs", required=True, help="pair file (JSONL)")
    p.add_argument("--out-dir", required=True, help="directory for train.jsonl, test.jsonl, manifest.json")
    p.add_argument("--train-count", type=int, default=datapipe.REFERENCE_TRAIN_PAIRS, help="default 100000")
    p.add_argument("--test-count", type=int, default=datapipe.REFERENCE_TEST_PAIRS, help="default 6042")
    p.add_argument("--location-disjoint", action="store_true", help="keep every location on one side")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("requests", help="write annotation requests for an external annotator")
    p.add_argument("--pairs", required=True, help="pair file (JSONL)")
    p.add_argument("--out", required=True, help="request file (JSONL with header line)")
    p.set_defaults(func=cmd_requests)

    p = sub.add_parser("annotate", help="join annotator responses and emit conversational records")
    p.add_argument("--pairs", required=True, help="pair file (JSONL)")
    p.add_argument("--requests", required=True, help="request file written by 'requests'")
    p.add_argument("--responses", required=True, help='JSONL lines {"correlation_id": ..., "text": ...}')
    p.add_argument("--out", required=True, help="annotation JSON output")
    p.add_argument("--templates", help="prompt template file, one per line (default: bundled five)")
    p.add_argument("--max-length", type=int, default=datapipe.MAX_LENGTH,
                   help="flag records longer than this many whitespace tokens (default 400)")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("videos", help="write the frame manifest and ffmpeg commands for each pair")
    p.add_argument("--pairs", required=True, help="pair file (JSONL)")
    p.add_argument("--out", required=True, help="manifest JSON output")
    p.add_argument("--image-dir", default="images", help="directory holding IMAGE_ID.jpg files")
    p.set_defaults(func=cmd_videos)

    p = sub.add_parser("config", help="print or write the default training config")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("task", help="generate the synthetic teacher regression task")
    p.add_argument("--out", required=True, help="task checkpoint output")
    p.add_argument("--dims", type=_dims, default=(128, 128, 128), help="layer widths (default 128,128,128)")
    p.add_argument("--n-train", type=int, default=1000, help="training samples (default 1000)")
    p.add_argument("--n-val", type=int, default=200, help="validation samples (default 200)")
    p.add_argument("--teacher-rank", type=int, default=2, help="rank of the hidden perturbation (default 2)")
    p.add_argument("--delta-scale", type=float, default=0.5, help="size of the hidden perturbation (default 0.5)")
    p.set_defaults(func=cmd_task)

    p = sub.add_parser("train", help="train LoRA adapters on a task checkpoint")
    p.add_argument("--config", help="training config file (default: built-in defaults)")
    p.add_argument("--data", required=True, help="task checkpoint from 'task'")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--use-qlora", type=int, choices=(0, 4, 8), help="0 disables, 4 or 8 selects base bits")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--report", help="report JSON path (default OUT.report.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="merge adapters, prune, quantize")
    p.add_argument("--checkpoint", required=True, help="checkpoint from 'train'")
    p.add_argument("--out", required=True, help="compressed checkpoint output")
    p.add_argument("--prune", type=float, help="target sparsity in [0, 1)")
    p.add_argument("--prune-mode", choices=("global", "per-layer"), default="global", help="default global")
    p.add_argument("--exclude", action="append", default=[], help="layer id to leave unpruned (repeatable)")
    p.add_argument("--quant", type=int, choices=(4, 8), help="quantize merged weights to this many bits")
    p.add_argument("--block-size", type=int, default=0, help="entries per quantization scale (0 = whole tensor)")
    p.add_argument("--report", help="report JSON path (default OUT.report.json)")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="ROUGE-1/2/L, BLEU and BERTScore over text pairs")
    p.add_argument("--pairs", help="TSV of candidate<TAB>reference with \\t \\n \\\\ escapes")
    p.add_argument("--candidates", help="candidate texts, one per line")
    p.add_argument("--references", help="reference texts, one per line")
    p.add_argument("--embeddings", default="hash", help="onehot | hash | table:PATH (default hash)")
    p.add_argument("--out", required=True, help="report JSON output")
    p.add_argument("--table", help="fixed-width table output (default OUT.table.txt)")
    p.add_argument("--label", default="model", help="row label in the table")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.jobs < 1:
        parser.print_usage(sys.stderr)
        print("peft-forge: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except PeftForgeError as exc:
        print(f"peft-forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
