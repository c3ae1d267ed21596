"""Command-line surface.

Subcommands: gen-fixtures, train, caption, eval, gradcheck, dump-bigrams.
Usage errors exit 2 (argparse); validation and data errors print a
diagnostic to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, List, Tuple

from .data import (DepthMap, EmbeddingTable, SceneRecord, Vocabulary,
                   load_depth_map, load_embedding_table, load_scene_records,
                   load_vocabulary, tokenize)
from .fixtures import FixtureConfig, gen_fixtures
from .gradsuite import run_suites
from .metrics import bleu4, build_corpus, cider_d_per_image
from .model import (CaptionModel, ModelConfig, RecordFeatures, prepare_record,
                    run_training)
from .phoc import BIGRAMS


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return obj


def _load_data_dir(data_dir, config: ModelConfig
                   ) -> Tuple[List[SceneRecord], EmbeddingTable,
                              Dict[str, DepthMap], Vocabulary]:
    records = load_scene_records(os.path.join(data_dir, "records.jsonl"))
    table = load_embedding_table(os.path.join(data_dir, "vectors.txt"))
    depth_maps = {}
    for rec in records:
        dm = load_depth_map(os.path.join(data_dir, rec.depth_map))
        if (dm.width, dm.height) != (rec.width, rec.height):
            raise ValueError(
                f"record {rec.id!r}: depth map {rec.depth_map} is "
                f"{dm.width}x{dm.height}, scene is {rec.width}x{rec.height}"
            )
        depth_maps[rec.id] = dm
    vocab_path = config.vocab_path
    if not os.path.isabs(vocab_path):
        vocab_path = os.path.join(data_dir, vocab_path)
    vocab = load_vocabulary(vocab_path)
    return records, table, depth_maps, vocab


def _prepare_all(records, depth_maps, table, config
                 ) -> List[RecordFeatures]:
    return [prepare_record(rec, depth_maps[rec.id], table, config)
            for rec in records]


def cmd_gen_fixtures(args) -> int:
    config = FixtureConfig()
    if args.fixture_config:
        config = FixtureConfig.from_dict(_load_json(args.fixture_config))
    paths = gen_fixtures(args.seed, args.n, args.out, config)
    for key in sorted(paths):
        print(f"{key}\t{paths[key]}")
    return 0


def cmd_train(args) -> int:
    config = ModelConfig.from_dict(_load_json(args.config))
    records, table, depth_maps, vocab = _load_data_dir(args.data, config)
    feats = _prepare_all(records, depth_maps, table, config)
    batch = []
    for f in feats:
        if not f.captions:
            raise ValueError(f"record {f.id!r} has no training caption")
        for caption in f.captions:
            batch.append((f, caption))
    d = feats[0].x_of.shape[1]
    model = CaptionModel(config, vocab, d)
    steps = args.steps if args.steps is not None else config.train_steps
    history = run_training(model, batch, steps)
    model.save(args.out)
    step, loss, acc = history[-1]
    print(f"steps\t{step}")
    print(f"final_loss\t{loss!r}")
    print(f"final_accuracy\t{acc!r}")
    print(f"checkpoint\t{args.out}")
    if args.report:
        from .report import write_train_report
        for path in write_train_report(args.report, history):
            print(f"report\t{path}")
    return 0


def cmd_caption(args) -> int:
    model = CaptionModel.load(args.ckpt)
    records, table, depth_maps, _ = _load_data_dir(args.data, model.config)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            feats = prepare_record(rec, depth_maps[rec.id], table, model.config)
            hyp = model.generate(feats)
            row = {
                "id": rec.id,
                "caption": hyp.caption,
                "token_sources": [
                    {"token": t.surface, "source": t.source, "index": t.index}
                    for t in hyp.tokens
                ],
            }
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    print(f"captions\t{args.out}")
    return 0


def _read_predictions(path) -> Dict[str, str]:
    preds: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            rid, caption = obj.get("id"), obj.get("caption")
            if not isinstance(rid, str) or not isinstance(caption, str):
                raise ValueError(f"{path}:{ln}: need {{id, caption}}")
            if rid in preds:
                raise ValueError(f"{path}:{ln}: duplicate prediction for {rid!r}")
            preds[rid] = caption
    if not preds:
        raise ValueError(f"{path}: no predictions")
    return preds


def _read_references(path) -> Dict[str, List[str]]:
    refs: Dict[str, List[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            rid, captions = obj.get("id"), obj.get("captions")
            if (not isinstance(rid, str) or not isinstance(captions, list)
                    or not captions
                    or not all(isinstance(c, str) for c in captions)):
                raise ValueError(f"{path}:{ln}: need {{id, captions: [...]}}")
            if rid in refs:
                raise ValueError(f"{path}:{ln}: duplicate references for {rid!r}")
            refs[rid] = captions
    if not refs:
        raise ValueError(f"{path}: no references")
    return refs


def cmd_eval(args) -> int:
    preds = _read_predictions(args.pred)
    refs = _read_references(args.refs)
    corpus = build_corpus(preds, refs, tokenize)
    bleu = bleu4(corpus, smoothing=args.smooth_bleu)
    per_image = cider_d_per_image(corpus,
                                  idf_from_refs_only=args.idf_from_refs_only)
    cider = sum(per_image.values()) / len(per_image)
    print(f"BLEU-4\t{bleu!r}")
    print(f"CIDEr-D\t{cider!r}")
    if args.report:
        from .report import write_eval_report
        lengths = {rid: (len(cand), len(rs[0]) if rs else 0)
                   for rid, (cand, rs) in corpus.items()}
        for path in write_eval_report(args.report, bleu, cider,
                                      per_image, lengths):
            print(f"report\t{path}")
    return 0


def cmd_gradcheck(args) -> int:
    overrides = _load_json(args.config) if args.config else None
    results = run_suites(seeds=range(args.seeds), names=args.suite or None,
                         overrides=overrides)
    failed = False
    for r in results:
        print(r.line())
        failed = failed or not r.report.passed
    return 1 if failed else 0


def cmd_dump_bigrams(args) -> int:
    for b in BIGRAMS:
        print(b)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenecap",
        description="Depth-aware scene-text captioning pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", help="write a synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fixture-config", help="JSON overrides for the corpus shape")
    p.set_defaults(fn=cmd_gen_fixtures)

    p = sub.add_parser("train", help="train on a fixture directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--report", help="directory for loss curve + CSV")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("caption", help="greedy-decode captions for a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--idf-from-refs-only", action="store_true",
                   help="allow a degenerate single-record idf document set")
    p.add_argument("--smooth-bleu", action="store_true")
    p.add_argument("--report", help="directory for metric figures + CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--config", help="micro-config overrides (JSON)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--suite", action="append",
                   choices=["features", "defum", "sgam", "captioner"])
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-bigrams",
                       help="print the 50-entry bigram list, one per line")
    p.set_defaults(fn=cmd_dump_bigrams)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
