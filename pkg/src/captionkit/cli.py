"""Command-line pipeline: synthetic data generation, training, caption
generation, BLEU evaluation, and diagnostic analysis export.

Every subcommand writes a ``manifest.json`` into its output location before
doing any work (status ``running``) and finalizes it with the produced files
and their SHA-256 checksums (status ``complete``), or marks it ``failed``;
a run is reproducible from its manifest alone. No timestamps are recorded,
so identical invocations produce byte-identical outputs.

Configuration files are flat ``key = value`` text; ``#`` starts a comment.
Recognized keys are the field names of ModelConfig (minus the dimensions
taken from the data: vocab, feature, grid and spatial sizes) and TrainConfig,
plus ``init_seed``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from captionkit import analysis, decoding, training
from captionkit import convmodel as cm
from captionkit import lstmmodel as lm
from captionkit.checkpoint import load_checkpoint
from captionkit.data import (
    Vocabulary,
    build_vocab,
    decode,
    encode,
    read_caption_file,
    read_features,
    synth_corpus,
    write_caption_file,
    write_features,
)

OUT_ROOT_ENV = "CAPTIONKIT_OUT_ROOT"


class CliError(ValueError):
    """User-facing command error (bad flags, missing files, mismatches)."""


# ---------------------------------------------------------------------------
# manifest


class Manifest:
    def __init__(self, directory: str, subcommand: str, config: dict, seed, inputs: dict):
        os.makedirs(directory, exist_ok=True)
        self.directory = directory
        self.path = os.path.join(directory, "manifest.json")
        self.data = {
            "subcommand": subcommand,
            "config": config,
            "seed": seed,
            "inputs": inputs,
            "outputs": {},
            "status": "running",
        }
        self._write()

    def _write(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.path)

    def finish(self, outputs: list[str], **extra) -> None:
        self.data["outputs"] = {
            os.path.relpath(path, self.directory): _sha256(path) for path in outputs
        }
        self.data.update(extra)
        self.data["status"] = "complete"
        self._write()

    def fail(self, error: BaseException) -> None:
        self.data["status"] = "failed"
        self.data["error"] = f"{type(error).__name__}: {error}"
        self._write()


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_out(value, subcommand: str) -> str:
    if value:
        return value
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return os.path.join(root, subcommand)
    raise CliError(f"--out not given and ${OUT_ROOT_ENV} is not set")


# ---------------------------------------------------------------------------
# config files


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _get(values: dict, key: str, convert, default):
    if key not in values:
        return default
    raw = values.pop(key)
    try:
        return convert(raw)
    except ValueError as exc:
        raise CliError(f"config key {key}: {exc}") from exc


def _bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)


def build_train_config(values: dict) -> training.TrainConfig:
    return training.TrainConfig(
        learning_rate=_get(values, "learning_rate", float, 5e-5),
        decay_factor=_get(values, "decay_factor", float, 0.1),
        decay_period=_get(values, "decay_period", int, 15),
        epochs=_get(values, "epochs", int, 30),
        batch_size=_get(values, "batch_size", int, 32),
        rms_alpha=_get(values, "rms_alpha", float, 0.99),
        rms_epsilon=_get(values, "rms_epsilon", float, 1e-8),
        seed=_get(values, "seed", int, 0),
        eval_cadence=_get(values, "eval_cadence", int, 1),
        loss_reduction=_get(values, "loss_reduction", str, "mean"),
        probe_size=_get(values, "probe_size", int, 64),
    )


def build_model_config(values: dict, kind: str, vocab_size: int,
                       feature_dim: int, grid_size: int, spatial_channels: int):
    if kind == "lstm":
        return lm.LstmConfig(
            vocab_size=vocab_size,
            embed_dim=_get(values, "embed_dim", int, 512),
            hidden_dim=_get(values, "hidden_dim", int, 512),
            max_steps=_get(values, "max_steps", int, 15),
            feature_dim=feature_dim,
        )
    attention = _get(values, "attention", _bool, False) or kind == "cnn-attn"
    if attention and grid_size == 0:
        raise CliError("attention requested but the feature file has no spatial grids")
    return cm.ModelConfig(
        vocab_size=vocab_size,
        embed_dim=_get(values, "embed_dim", int, 512),
        hidden_dim=_get(values, "hidden_dim", int, 512),
        num_layers=_get(values, "num_layers", int, 3),
        kernel_widths=_get(values, "kernel_widths", _int_tuple, (2, 3, 3)),
        bottleneck_dim=_get(values, "bottleneck_dim", int, 256),
        max_steps=_get(values, "max_steps", int, 15),
        feature_dim=feature_dim,
        dropout_p=_get(values, "dropout_p", float, 0.1),
        weight_norm=_get(values, "weight_norm", _bool, False),
        residual=_get(values, "residual", _bool, False),
        attention=attention,
        grid_size=max(grid_size, 1),
        spatial_channels=max(spatial_channels, 1),
    )


# ---------------------------------------------------------------------------
# data plumbing


def _load_dataset(data_dir: str):
    paths = {name: os.path.join(data_dir, name)
             for name in ("vocab.txt", "train.tsv", "val.tsv", "features.ccf")}
    for name, path in paths.items():
        if not os.path.exists(path):
            raise CliError(f"data directory {data_dir} is missing {name}")
    vocab = Vocabulary.from_file(paths["vocab.txt"])
    features = read_features(paths["features.ccf"])
    splits = {}
    for split in ("train", "val"):
        items = read_caption_file(paths[f"{split}.tsv"])
        missing = [image_id for image_id, _ in items if image_id not in features]
        if missing:
            raise CliError(f"{split}.tsv references ids without features: {missing[:3]}")
        splits[split] = items
    with open(paths["features.ccf"], "rb") as fh:
        header = fh.read(20)
    _, f_dim, g_dim, c_dim = np.frombuffer(header[4:], dtype="<u4")
    return vocab, features, splits, (int(f_dim), int(g_dim), int(c_dim)), paths


def _examples_for(items, features, vocab, max_steps):
    return [
        training.Example(image_id, encode(caption, vocab, max_steps), features[image_id])
        for image_id, caption in items
    ]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out_dir = _resolve_out(args.out, "synth")
    manifest = Manifest(
        out_dir, "synth",
        {
            "scenes": args.scenes, "val_fraction": args.val_fraction,
            "feature_dim": args.feature_dim, "grid": args.grid,
            "channels": args.channels, "noise": args.noise,
        },
        args.seed, {},
    )
    try:
        records, _ = synth_corpus(
            args.scenes, args.seed,
            feature_dim=args.feature_dim, grid_size=args.grid,
            spatial_channels=args.channels, noise=args.noise,
        )
        n_val = int(round(args.val_fraction * len(records)))
        if len(records) > 1 and n_val == 0:
            n_val = 1
        train_records = records[: len(records) - n_val]
        val_records = records[len(records) - n_val:]
        if not train_records:
            raise CliError("no training scenes left after the validation split")
        vocab = build_vocab((r.caption for r in train_records))

        paths = {name: os.path.join(out_dir, name)
                 for name in ("vocab.txt", "train.tsv", "val.tsv", "features.ccf", "scenes.json")}
        vocab.to_file(paths["vocab.txt"])
        write_caption_file(paths["train.tsv"], [(r.image_id, r.caption) for r in train_records])
        write_caption_file(paths["val.tsv"], [(r.image_id, r.caption) for r in val_records])
        write_features({r.image_id: r.features for r in records}, paths["features.ccf"])
        with open(paths["scenes.json"], "w", encoding="utf-8") as fh:
            json.dump({r.image_id: r.meta for r in records}, fh, indent=2, sort_keys=True)
        manifest.finish(list(paths.values()), scenes=len(records))
    except BaseException as exc:
        manifest.fail(exc)
        raise
    return 0


def cmd_train(args) -> int:
    out_dir = _resolve_out(args.out, "train")
    values = parse_config_file(args.config) if args.config else {}
    manifest = Manifest(
        out_dir, "train", dict(values) | {"model": args.model},
        values.get("seed", "0"),
        {"data": args.data, "config": args.config, "resume": args.resume},
    )
    try:
        # The pipeline trains on precomputed image features; the extractor
        # that produced them is held fixed and is never fine-tuned here.
        print("training on precomputed image features (extractor held fixed)",
              file=sys.stderr)
        manifest.data["notes"] = "image features precomputed; extractor held fixed"
        vocab, features, splits, (f_dim, g_dim, c_dim), _ = _load_dataset(args.data)
        init_seed = _get(values, "init_seed", int, None)
        train_config = build_train_config(values)
        model_kind = "lstm" if args.model == "lstm" else args.model
        model_config = build_model_config(values, model_kind, vocab.size, f_dim, g_dim, c_dim)
        if values:
            raise CliError(f"unknown config keys: {', '.join(sorted(values))}")

        start_epoch = 0
        if args.resume:
            loaded = load_checkpoint(args.resume, expect_config=model_config)
            model = loaded.model
            start_epoch = loaded.epoch + 1
        elif args.model == "lstm":
            model = lm.init_params(model_config, init_seed if init_seed is not None else train_config.seed)
        else:
            model = cm.init_params(model_config, init_seed if init_seed is not None else train_config.seed)

        max_steps = model_config.max_steps
        train_examples = _examples_for(splits["train"], features, vocab, max_steps)
        val_examples = _examples_for(splits["val"], features, vocab, max_steps)
        result = training.train(
            model, train_examples, val_examples, train_config,
            out_dir=out_dir, vocab=vocab, start_epoch=start_epoch,
            log=lambda line: print(line, file=sys.stderr),
        )
        outputs = [os.path.join(out_dir, "metrics.csv")]
        outputs += [p for p in (result.best_path, result.last_path) if p]
        manifest.finish(
            outputs,
            best_epoch=result.best_epoch,
            best_val_loss=result.best_val_loss,
            clamped_probabilities=result.loss_stats.clamped,
        )
    except BaseException as exc:
        manifest.fail(exc)
        raise
    return 0


def _load_model_checkpoint(path):
    loaded = load_checkpoint(path)
    if loaded.vocab is None:
        raise CliError(f"checkpoint {path} carries no vocabulary")
    return loaded


def cmd_caption(args) -> int:
    out_file = args.out
    out_dir = os.path.dirname(os.path.abspath(out_file)) or "."
    manifest = Manifest(
        out_dir, "caption", {"beam": args.beam, "max_steps": args.max_steps},
        None, {"ckpt": args.ckpt, "features": args.features},
    )
    try:
        loaded = _load_model_checkpoint(args.ckpt)
        features = read_features(args.features)
        limit = args.max_steps or loaded.model.config.max_steps
        lines = []
        for image_id, feat in features.items():
            ranked = decoding.beam_search(loaded.model, feat, max_steps=limit,
                                          beam_size=args.beam)
            for rank, (seq, logprob) in enumerate(ranked, 1):
                caption = " ".join(decode(seq.target_ids, loaded.vocab))
                lines.append(f"{image_id}\t{rank}\t{logprob:.10g}\t{caption}")
        tmp = out_file + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, out_file)
        manifest.finish([out_file], images=len(features))
    except BaseException as exc:
        manifest.fail(exc)
        raise
    return 0


def cmd_eval(args) -> int:
    out_dir = _resolve_out(args.out, "eval")
    manifest = Manifest(
        out_dir, "eval", {"beam": args.beam, "split": args.split},
        None, {"ckpt": args.ckpt, "data": args.data},
    )
    try:
        loaded = _load_model_checkpoint(args.ckpt)
        vocab, features, splits, _, _ = _load_dataset(args.data)
        items = splits[args.split]
        candidates = []
        references = []
        cand_lines = []
        ref_lines = []
        for image_id, caption in items:
            ranked = decoding.beam_search(loaded.model, features[image_id],
                                          beam_size=args.beam)
            tokens = decode(ranked[0][0].target_ids, loaded.vocab)
            candidates.append(tokens)
            references.append([caption])
            cand_lines.append((image_id, tokens))
            ref_lines.append((image_id, caption))
        scores = analysis.bleu(candidates, references)
        bleu_path = os.path.join(out_dir, "bleu.csv")
        with open(bleu_path, "w", encoding="utf-8") as fh:
            fh.write("n,score\n")
            for n, score in enumerate(scores, 1):
                fh.write(f"{n},{score:.10g}\n")
        cand_path = os.path.join(out_dir, "candidates.txt")
        ref_path = os.path.join(out_dir, "references.txt")
        write_caption_file(cand_path, cand_lines)
        write_caption_file(ref_path, ref_lines)
        manifest.finish([bleu_path, cand_path, ref_path],
                        bleu={f"bleu{n}": s for n, s in enumerate(scores, 1)})
        print("\n".join(f"BLEU-{n}: {score:.4f}" for n, score in enumerate(scores, 1)))
    except BaseException as exc:
        manifest.fail(exc)
        raise
    return 0


def _analyze_one(loaded, features, splits, vocab, beam, limit, positions):
    model = loaded.model
    records = []
    for split in ("train", "val"):
        examples = _examples_for(splits[split][:limit], features, vocab,
                                 model.config.max_steps)
        probe = analysis.grad_norm_probe(model, examples)
        records.append(analysis.AnalysisRecord(
            epoch=loaded.epoch, split=split,
            loss=analysis.mean_nll(model, examples),
            accuracy=analysis.word_accuracy(model, examples),
            entropy=analysis.entropy_profile(model, examples),
            grad_norm_in=probe.grad_norm_in,
            grad_norm_out=probe.grad_norm_out,
        ))
    beams = [
        [seq for seq, _ in decoding.beam_search(model, features[image_id], beam_size=beam)]
        for image_id, _ in splits["val"][:limit]
    ]
    diversity = analysis.unique_words_per_position(beams, positions=positions)
    return records, diversity


def cmd_analyze(args) -> int:
    out_dir = _resolve_out(args.out, "analyze")
    manifest = Manifest(
        out_dir, "analyze",
        {"beam": args.beam, "limit": args.limit, "positions": args.positions},
        None, {"ckpt": args.ckpt, "ckpt2": args.ckpt2, "data": args.data},
    )
    try:
        vocab, features, splits, _, _ = _load_dataset(args.data)
        loaded = [_load_model_checkpoint(args.ckpt)]
        if args.ckpt2:
            loaded.append(_load_model_checkpoint(args.ckpt2))
            if loaded[0].kind == loaded[1].kind:
                raise CliError(
                    "side-by-side analysis expects one cnn and one lstm checkpoint, "
                    f"got two {loaded[0].kind!r}"
                )
        outputs = []
        results = []
        for ckpt in loaded:
            records, diversity = _analyze_one(
                ckpt, features, splits, vocab, args.beam, args.limit, args.positions
            )
            results.append((ckpt, records, diversity))
            prefix = ckpt.kind
            metrics_path = os.path.join(out_dir, f"analysis_{prefix}.csv")
            with open(metrics_path, "w", encoding="utf-8") as fh:
                fh.write(analysis.METRICS_CSV_HEADER + "\n")
                for record in records:
                    fh.write(record.csv_row() + "\n")
            diversity_path = os.path.join(out_dir, f"diversity_{prefix}.csv")
            with open(diversity_path, "w", encoding="utf-8") as fh:
                fh.write("position,unique_count\n")
                for pos, count in enumerate(diversity, 1):
                    fh.write(f"{pos},{count}\n")
            outputs += [metrics_path, diversity_path]
        if len(results) == 2:
            outputs.append(_write_comparison(out_dir, results))
        manifest.finish(outputs)
    except BaseException as exc:
        manifest.fail(exc)
        raise
    return 0


def _write_comparison(out_dir: str, results) -> str:
    """Side-by-side table plus the directional observations, logged only."""
    path = os.path.join(out_dir, "comparison.csv")
    (kind_a, recs_a, _), (kind_b, recs_b, _) = (
        (r[0].kind, r[1], r[2]) for r in results
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"metric,split,{kind_a},{kind_b}\n")
        for ra, rb in zip(recs_a, recs_b):
            for name in ("loss", "accuracy", "entropy", "grad_norm_in", "grad_norm_out"):
                fh.write(f"{name},{ra.split},{getattr(ra, name):.10g},{getattr(rb, name):.10g}\n")
    notes = os.path.join(out_dir, "notes.txt")
    val_a = next(r for r in recs_a if r.split == "val")
    val_b = next(r for r in recs_b if r.split == "val")
    with open(notes, "w", encoding="utf-8") as fh:
        fh.write(f"entropy: {kind_a}={val_a.entropy:.4f} {kind_b}={val_b.entropy:.4f}\n")
        for kind, rec in ((kind_a, val_a), (kind_b, val_b)):
            if rec.grad_norm_in > 0:
                fh.write(
                    f"gradient decay {kind}: output/input norm ratio "
                    f"{rec.grad_norm_out / rec.grad_norm_in:.2f}\n"
                )
    return path


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="captionkit",
        description="Convolutional image captioning pipeline at desk scale.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene/caption dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None, help=f"output dir (default ${OUT_ROOT_ENV}/synth)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--feature-dim", type=int, default=96)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a captioner on a data directory")
    p.add_argument("--model", choices=("cnn", "cnn-attn", "lstm"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="flat key=value configuration file")
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="decode captions for a feature file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--out", required=True, help="output caption file")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="BLEU evaluation of a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="entropy/accuracy/gradient/diversity tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ckpt2", default=None, help="second checkpoint of the other kind")
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--limit", type=int, default=64, help="examples per split to analyze")
    p.add_argument("--positions", type=int, default=13)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # argparse handles its own exits
        print(f"captionkit {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
