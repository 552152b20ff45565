"""Command-line front door: data generation, training, captioning, explanation, eval, benchmark."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import decoder as dec_mod
from . import encoder as enc_mod
from .dataset import build_vocab, generate_dataset, load_png, read_manifest, tokenize_caption, write_manifest
from .decoder import DecoderConfig
from .interpretability import select_pairs
from .model import Captioner, default_config, load_rwa, paper_scale_config, save_rwa
from .trainer import (
    TrainConfig,
    benchmark_decoder,
    dumps,
    evaluate,
    measure_ie,
    train_caption_phase1,
    train_caption_phase2,
    train_rwa,
    write_curve,
)
from .visualize import render_curves, render_explanation

log = logging.getLogger("hiercap")

HELDOUT_OFFSET = 1_000_000
# decoder keys that are derived from the encoder or vocabulary, not user-tunable
_DERIVED_DECODER_KEYS = {"vocab_size", "visual_channels", "grid_cells"}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config ----

def load_config(args) -> tuple[TrainConfig, dict]:
    """TrainConfig plus decoder overrides from --config, then flag overrides."""
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise CliError("config must be a JSON object")
    train_keys = {f.name for f in fields(TrainConfig)}
    dec_keys = {f.name for f in fields(DecoderConfig)} - _DERIVED_DECODER_KEYS
    unknown = set(raw) - train_keys - dec_keys
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    train = {k: v for k, v in raw.items() if k in train_keys}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lambda_ie", "lambda_ie"),
                      ("threshold_factor", "threshold_factor")):
        val = getattr(args, flag, None)
        if val is not None:
            train[key] = val
    try:
        cfg = TrainConfig(**train)
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from e
    return cfg, {k: v for k, v in raw.items() if k in dec_keys}


def model_config(vocab_size: int, paper_scale: bool, overrides: dict):
    if paper_scale:
        cfg = paper_scale_config(vocab_size)
        return replace(cfg, decoder=replace(cfg.decoder, **overrides))
    return default_config(vocab_size, **overrides)


def _manifest(path, split: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.is_file():
        raise CliError(f"dataset manifest not found: {p}")
    return p


def _samples(args, split: str = "train"):
    samples = read_manifest(_manifest(args.data, split))
    if not samples:
        raise CliError(f"{args.data}: empty {split} split")
    return samples


class Staging:
    """Collect outputs in a scratch directory; move them under --out only on success."""

    def __init__(self, out):
        self.out = Path(out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".hiercap-", dir=self.out.parent))

    def path(self, name: str) -> Path:
        return self.dir / name

    def commit(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        for item in sorted(self.dir.iterdir()):
            target = self.out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            item.replace(target)
        self.dir.rmdir()

    def discard(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n")


def _curve_outputs(stage: Staging, stem: str, rows) -> None:
    write_curve(stage.path(f"{stem}.csv"), rows)
    stage.path(f"{stem}.svg").write_text(render_curves(stage.path(f"{stem}.csv"), ["ce_loss", "ie_loss", "total"]))


# -------------------------------------------------------------- commands ----

def cmd_gen_data(args, stage: Staging) -> None:
    cfg, _ = load_config(args)
    count = args.count if args.count is not None else cfg.train_count
    heldout = args.heldout if args.heldout is not None else cfg.heldout_count
    if count <= 0 or heldout < 0:
        raise CliError("--count must be positive and --heldout non-negative")
    train = generate_dataset(cfg.seed, count)
    write_manifest(train, stage.path("train.jsonl"))
    if heldout:
        write_manifest(generate_dataset(HELDOUT_OFFSET + cfg.seed, heldout), stage.path("heldout.jsonl"))
    vocab = build_vocab([s.caption for s in train])
    _write_json(stage.path("vocab.json"), vocab.to_list())
    print(f"wrote {count} training and {heldout} held-out scenes")


def cmd_train_rwa(args, stage: Staging) -> None:
    cfg, _ = load_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, rwa_epochs=args.epochs)
    samples = _samples(args)
    vocab = build_vocab([s.caption for s in samples])
    rwa, rows = train_rwa(samples[:cfg.rwa_count], vocab, cfg)
    save_rwa(rwa, vocab, stage.path("rwa.hck"), extra=cfg.to_dict())
    _curve_outputs(stage, "rwa_curve", rows)
    print(f"region-word model: final loss {rows[-1]['total']:.4f}")


def cmd_train(args, stage: Staging) -> None:
    cfg, overrides = load_config(args)
    samples = _samples(args)
    vocab = build_vocab([s.caption for s in samples])
    mcfg = model_config(len(vocab), args.paper_scale, overrides)
    model, rows = train_caption_phase1(samples, vocab, cfg, model_cfg=mcfg)
    model.save(stage.path("captioner.hck"), extra=cfg.to_dict())
    _curve_outputs(stage, "phase1_curve", rows)
    print(f"phase 1: final ce {rows[-1]['ce_loss']:.4f}")


def cmd_retrain_ie(args, stage: Staging) -> None:
    cfg, _ = load_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, ie_epochs=args.epochs)
    model = Captioner.load(args.ckpt)
    rwa, rwa_vocab = load_rwa(args.rwa)
    samples = _samples(args)
    ie_before = measure_ie(model, rwa, samples, cfg)
    model, rows = train_caption_phase2(model, rwa, samples, cfg, rwa_vocab=rwa_vocab)
    ie_after = measure_ie(model, rwa, samples, cfg)
    model.save(stage.path("captioner_ie.hck"), extra=cfg.to_dict())
    _curve_outputs(stage, "phase2_curve", rows)
    _write_json(stage.path("ie_summary.json"),
                {"lambda_ie": cfg.lambda_ie, "threshold_factor": cfg.threshold_factor,
                 "ie_before": ie_before, "ie_after": ie_after})
    print(f"phase 2: mean IE {ie_before:.4f} -> {ie_after:.4f}")


def _images_for(args):
    if args.image:
        return [load_png(p) for p in args.image], [str(p) for p in args.image]
    if args.data:
        samples = _samples(args, args.split)
        if args.limit:
            samples = samples[:args.limit]
        return [s.image for s in samples], [s.seed for s in samples]
    raise CliError("give --image or --data")


def cmd_caption(args, stage: Staging) -> None:
    model = Captioner.load(args.ckpt)
    images, keys = _images_for(args)
    caps = model.caption(np.stack(images))
    _write_json(stage.path("captions.json"), [{"source": k, "caption": c} for k, c in zip(keys, caps)])
    for k, c in zip(keys, caps):
        print(f"{k}\t{c}")


def _parse_boxes(text: str):
    try:
        boxes = [tuple(int(v) for v in part.split(",")) for part in text.split(";") if part.strip()]
    except ValueError as e:
        raise CliError(f"bad --boxes {text!r}: {e}") from e
    if not boxes or any(len(b) != 4 for b in boxes):
        raise CliError("--boxes expects 'x,y,w,h;x,y,w,h;...'")
    return boxes


def cmd_explain(args, stage: Staging) -> None:
    cfg, _ = load_config(args)
    model = Captioner.load(args.ckpt)
    rwa, rwa_vocab = load_rwa(args.rwa)
    if rwa_vocab.tokens != model.vocab.tokens:
        raise CliError("captioner and region-word checkpoints use different vocabularies")
    if args.image:
        if not args.boxes:
            raise CliError("--image needs --boxes")
        image, boxes, source = load_png(args.image[0]), _parse_boxes(args.boxes), str(args.image[0])
    elif args.data:
        samples = _samples(args, args.split)
        if not 0 <= args.index < len(samples):
            raise CliError(f"--index {args.index} out of range for {len(samples)} scenes")
        s = samples[args.index]
        image, boxes, source = s.image, _parse_boxes(args.boxes) if args.boxes else s.boxes, s.seed
    else:
        raise CliError("give --image or --data")
    caption = model.caption(image[None])[0]
    if not caption:
        raise CliError("the model produced an empty caption; nothing to explain")
    ids = tokenize_caption(caption, model.vocab)[1:-1]
    matrix = rwa.relevance_matrix(image, boxes, ids, caption.split())
    render = render_explanation(image, caption, matrix, boxes, cfg.threshold_factor)
    sel = select_pairs(matrix, cfg.threshold_factor)
    stage.path("explanation.svg").write_text(render.svg)
    _write_json(stage.path("explanation.json"), {
        "source": source,
        "caption": caption,
        "boxes": [list(b) for b in boxes],
        "matrix": matrix.probs.tolist(),
        "threshold_factor": cfg.threshold_factor,
        "pairs": [[i, j, p] for i, j, p in sel.pairs],
        "legend": render.legend,
    })
    print(caption)
    for item in render.legend:
        print(f"  region {item['region']} -> {item['word']} ({item['probability']:.3f})")


def cmd_eval(args, stage: Staging) -> None:
    model = Captioner.load(args.ckpt)
    samples = _samples(args, args.split)
    if args.limit:
        samples = samples[:args.limit]
    report, caps = evaluate(model, samples)
    stage.path("metrics.json").write_text(report.to_json() + "\n")
    _write_json(stage.path("eval_captions.json"),
                [{"seed": s.seed, "reference": s.caption, "caption": c} for s, c in zip(samples, caps)])
    print(report.to_json())


def cmd_bench(args, stage: Staging) -> None:
    cfg, overrides = load_config(args)
    if args.ckpt:
        model = Captioner.load(args.ckpt)
    else:
        vocab = build_vocab([s.caption for s in generate_dataset(cfg.seed, 200)])
        model = Captioner(model_config(len(vocab), args.paper_scale, overrides), vocab, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    fm0 = model.encode(rng.random((1, 3, model.cfg.encoder.canvas, model.cfg.encoder.canvas))).data
    report = benchmark_decoder(model.decoder, fm0, T=args.T, reps=args.reps, seed=cfg.seed)
    _write_json(stage.path("bench.json"), report)
    print(dumps(report))


def cmd_params(args, stage: Staging) -> None:
    _, overrides = load_config(args)
    vocab = args.vocab_size if args.vocab_size else (9489 if args.paper_scale else 16)
    cfg = model_config(vocab, args.paper_scale, overrides)
    enc = sum(int(np.prod(s)) for s in enc_mod.parameter_shapes(cfg.encoder, project=False).values())
    dec = dec_mod.count_parameters(cfg.decoder)
    report = {
        "scale": "paper" if args.paper_scale else "desk",
        "vocab_size": vocab,
        "encoder": enc,
        "decoder": dec,
        "total": enc + dec,
        "config": cfg.to_dict(),
    }
    _write_json(stage.path("params.json"), report)
    print(dumps({k: v for k, v in report.items() if k != "config"}))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-rwa": cmd_train_rwa,
    "train": cmd_train,
    "retrain-ie": cmd_retrain_ie,
    "caption": cmd_caption,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--config", help="JSON file with TrainConfig/DecoderConfig keys")
    common.add_argument("--out", default="hiercap_out", help="output directory (default: %(default)s)")
    common.add_argument("--epochs", type=int, help="epochs for this stage")
    common.add_argument("--lambda-ie", dest="lambda_ie", type=float, help="IE loss weight")
    common.add_argument("--threshold-factor", dest="threshold_factor", type=float, help="pair selection factor c")
    common.add_argument("--paper-scale", dest="paper_scale", action="store_true",
                        help="use the full-size configuration")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="hiercap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic scene dataset")
    p.add_argument("--count", type=int, help="training scenes")
    p.add_argument("--heldout", type=int, help="held-out scenes")

    for name, helptext in (("train-rwa", "train the region-word attention model"),
                           ("train", "phase 1: caption training with cross-entropy")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True, help="dataset directory or manifest")

    p = sub.add_parser("retrain-ie", parents=[common], help="phase 2: retrain with the IE loss")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="phase-1 captioner checkpoint")
    p.add_argument("--rwa", required=True, help="region-word attention checkpoint")

    for name, helptext in (("caption", "caption images"), ("explain", "render a region-word explanation SVG"),
                           ("eval", "score a checkpoint on a split")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", help="dataset directory or manifest")
        p.add_argument("--split", default="heldout", help="manifest name inside --data (default: %(default)s)")
        p.add_argument("--limit", type=int, help="use only the first N scenes")
        if name != "eval":
            p.add_argument("--image", action="append", help="PNG file (repeatable)")
        if name == "explain":
            p.add_argument("--rwa", required=True)
            p.add_argument("--index", type=int, default=0, help="scene index within the split")
            p.add_argument("--boxes", help="regions as 'x,y,w,h;...' (default: ground-truth objects)")

    p = sub.add_parser("bench", parents=[common], help="parallel vs incremental decoder timing")
    p.add_argument("--ckpt", help="captioner checkpoint (default: random init)")
    p.add_argument("--T", type=int, default=32, help="sequence length")
    p.add_argument("--reps", type=int, default=5)

    p = sub.add_parser("params", parents=[common], help="count parameters from shapes")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    stage = Staging(args.out)
    try:
        COMMANDS[args.command](args, stage)
    except (CliError, ValueError, KeyError, OSError) as e:
        stage.discard()
        print(f"hiercap {args.command}: error: {e}", file=sys.stderr)
        return 1
    except BaseException:
        stage.discard()
        raise
    stage.commit()
    return 0


def main() -> None:
    sys.exit(cli_main())
