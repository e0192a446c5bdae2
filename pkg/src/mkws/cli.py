"""Command-line entry point: ``mkws <command> [options]``.

Pipeline: gen-synthetic -> extract -> train-embedding -> finetune ->
eval-classify, and build-stream -> eval-stream for streaming accuracy.
Every command appends a provenance line to ``runs.jsonl`` in its output
directory. Failures exit with status 2 and a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from mkws import __version__
from mkws.audio import AudioBuffer, load_audio
from mkws.augment import load_noise_dir
from mkws.config import DATA_ROOT_ENV, ExperimentConfig, RunRecord, append_run_record
from mkws.dataset import (
    DatasetManifest,
    build_manifest,
    build_unknown_bank,
    extract_corpus,
    find_clip_audio,
    parse_alignments,
)
from mkws.errors import MkwsError
from mkws.fewshot import (
    FewShotModel,
    build_eval_spec,
    build_training_mix,
    default_thresholds,
    evaluate_classification,
    featurize,
    fine_tune,
    load_fewshot,
    save_fewshot,
    write_eval_summary,
    write_roc_csv,
)
from mkws.model import BACKGROUND, build_model, inspect_model, load_model, save_model, train_embedding
from mkws.streaming import (
    StreamSpec,
    build_sentence_stream,
    build_wakeword_stream,
    load_stream,
    save_stream,
    threshold_sweep,
)
from mkws.synthetic import SyntheticCorpus, generate_corpus

log = logging.getLogger("mkws")

PADDING_CHOICES = {"silence": ("silence",), "context": ("context",), "both": ("silence", "context")}


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _data_root(cfg: ExperimentConfig) -> Path | None:
    root = cfg.paths.data_root or os.environ.get(DATA_ROOT_ENV, "")
    return Path(root) if root else None


def _path(cfg: ExperimentConfig, cli_value, cfg_value: str, what: str, required: bool = True) -> Path | None:
    value = cli_value or cfg_value
    if not value:
        if required:
            raise UsageError(f"no {what} given (use the flag or set it in the config)")
        return None
    return cfg.paths.resolve(str(value))


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record(out_dir: Path, command: str, cfg: ExperimentConfig, inputs, outputs, started: float) -> None:
    rec = RunRecord.create(command, cfg, inputs)
    rec.outputs = [str(p) for p in outputs]
    rec.wall_time_s = round(time.time() - started, 3)
    append_run_record(out_dir / "runs.jsonl", rec)


def _manifest(args, cfg: ExperimentConfig) -> DatasetManifest:
    path = _path(cfg, args.manifest, cfg.paths.manifest, "manifest")
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.from_jsonl(path)


def _noise_dir(args, cfg: ExperimentConfig, required: bool = True) -> Path | None:
    path = _path(cfg, getattr(args, "noise", None), cfg.paths.noise_dir, "noise directory", required)
    if path is not None and not path.is_dir():
        raise FileNotFoundError(f"noise directory not found: {path}")
    return path


def _embedding_words(cfg: ExperimentConfig, manifest: DatasetManifest) -> list[str]:
    if cfg.words.embedding:
        return sorted(cfg.words.embedding)
    reserved = set(cfg.words.targets) | set(cfg.words.novel) | set(cfg.words.bank)
    return [w for w in manifest.words() if w not in reserved]


# -- commands -----------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    cfg = _load_config(args)
    started = time.time()
    out = Path(args.out or "synthetic")
    s = cfg.synthetic
    corpus = generate_corpus(out, cfg.seed, s.n_embedding, s.n_heldout, s.n_bank, s.n_novel,
                             s.samples_per_word, languages=s.languages, num_speakers=s.num_speakers,
                             min_word_distance=s.min_word_distance)
    exp = desk_config(corpus, cfg)
    exp.save(out / "config.json")
    _record(out, "gen-synthetic", exp, [], [out / "corpus.json", out / "config.json"], started)
    print(f"wrote synthetic corpus to {out} ({sum(len(v) for v in corpus.roles.values())} words)")
    return 0


def desk_config(corpus: SyntheticCorpus, base: ExperimentConfig) -> ExperimentConfig:
    """Experiment settings sized for the synthetic corpus."""
    root = Path(corpus.root).resolve()
    n_eligible = len(corpus.roles["embedding"]) + len(corpus.roles["bank"])
    return dataclasses.replace(
        base,
        training=dataclasses.replace(base.training, epochs=40),
        bank=dataclasses.replace(base.bank, size=1000, max_word_fraction=max(0.02, 1.5 / n_eligible)),
        stream=dataclasses.replace(base.stream, num_targets=20, num_nontargets=20, sentence_duration_s=300.0),
        words=dataclasses.replace(
            base.words,
            embedding=tuple(sorted(corpus.roles["embedding"])),
            bank=tuple(sorted(corpus.roles["bank"])),
            novel=tuple(sorted(corpus.roles["novel"])),
            targets=tuple(sorted(corpus.roles["heldout"])),
        ),
        paths=dataclasses.replace(base.paths, data_root=str(root), noise_dir="noise", manifest="clips/manifest.jsonl"),
    )


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    started = time.time()
    modes = PADDING_CHOICES[args.padding]
    if args.alignments:
        if not args.audio_root:
            raise UsageError("--alignments needs --audio-root")
        corpora = [{"language": args.language, "alignments": args.alignments, "audio_root": args.audio_root}]
    else:
        root = _data_root(cfg)
        if root is None or not (root / "corpus.json").is_file():
            raise UsageError("give --alignments/--audio-root or a data root containing corpus.json")
        corpora = SyntheticCorpus.load(root).corpora
    out = Path(args.out) if args.out else cfg.paths.resolve(str(Path(cfg.paths.manifest or "clips/manifest.jsonl").parent))
    extractions, inputs = [], []
    for c in corpora:
        parsed = parse_alignments(c["alignments"])
        for lineno, reason in parsed.errors:
            log.warning("%s:%d skipped: %s", c["alignments"], lineno, reason)
        keywords = args.keywords.split(",") if args.keywords else None
        extractions += extract_corpus(parsed.records, c["audio_root"], c["language"], modes, keywords, out)
        inputs.append(c["alignments"])
    if not extractions:
        raise MkwsError("no keyword clips were extracted")
    manifest = build_manifest(extractions, seed=cfg.seed)
    manifest.to_jsonl(out / "manifest.jsonl")
    _record(out, "extract", cfg, inputs, [out / "manifest.jsonl"], started)
    print(f"extracted {len(extractions)} clips of {len(manifest.words())} words to {out}")
    return 0


def cmd_train_embedding(args) -> int:
    cfg = _load_config(args)
    started = time.time()
    manifest = _manifest(args, cfg)
    tcfg = cfg.training_config()
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if args.padding == "both":
        tcfg = dataclasses.replace(tcfg, padding_variant="silence_and_context")
    noise = _noise_dir(args, cfg, required=tcfg.noise_fraction > 0)
    classes = [BACKGROUND] + _embedding_words(cfg, manifest)
    spec = dataclasses.replace(cfg.embedding, num_classes=len(classes))
    model = build_model(spec, cfg.seed, classes, cfg.frontend)
    out = _out_dir(args, cfg)
    report = train_embedding(model, manifest, noise if noise is not None else [], tcfg)
    model_path = out / "embedding.mkws"
    save_model(model, model_path)
    report.write(out / "training_report.json", out / "training_losses.csv")
    _record(out, "train-embedding", cfg, [], [model_path, out / "training_report.json"], started)
    print(f"val top-1 {report.overall_top1:.4f} (best epoch {report.best_epoch}); model at {model_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    started = time.time()
    ft = cfg.finetune_config()
    if len(args.shots) != ft.num_target_examples:
        raise UsageError(f"exactly {ft.num_target_examples} --shots files are required, got {len(args.shots)}")
    embedding = load_model(args.model)
    manifest = _manifest(args, cfg)
    noise = _noise_dir(args, cfg, required=ft.noise_fraction > 0)
    eligible = list(cfg.words.embedding or embedding.classes[1:]) + list(cfg.words.bank)
    bank = build_unknown_bank(manifest, [args.word], cfg.bank.size, cfg.seed, cfg.bank.max_word_fraction,
                              eligible_words=eligible)
    shots = [load_audio(p) for p in args.shots]
    mix = build_training_mix(shots, bank, load_noise_dir(noise) if noise else [], ft, embedding.frontend)
    head = fine_tune(embedding, featurize(mix, embedding), ft, word=args.word)
    head.shots = tuple(str(Path(p).resolve()) for p in args.shots)
    out = Path(args.out or Path(cfg.paths.output_dir) / f"{args.word}.mkws")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fewshot(FewShotModel(embedding, head), out)
    _record(out.parent, "finetune", cfg, [args.model, *args.shots], [out], started)
    print(f"few-shot model for {args.word!r} at {out}")
    return 0


def _negative_categories(cfg: ExperimentConfig, embedding_classes) -> dict:
    cats = {"embedding": list(cfg.words.embedding or embedding_classes[1:]),
            "bank": list(cfg.words.bank), "novel": list(cfg.words.novel)}
    return {k: v for k, v in cats.items() if v}


def cmd_eval_classify(args) -> int:
    cfg = _load_config(args)
    started = time.time()
    manifest = _manifest(args, cfg)
    out = _out_dir(args, cfg)
    curves = []
    for path in args.models:
        model = load_fewshot(path)
        spec = build_eval_spec(manifest, model.word, _negative_categories(cfg, model.embedding.classes),
                               exclude=model.head.shots, max_positives=cfg.eval.max_positives,
                               total_negatives=cfg.eval.total_negatives, seed=cfg.seed,
                               padding_mode=cfg.eval.padding_mode, negative_splits=cfg.eval.negative_splits)
        threshold = args.threshold if args.threshold is not None else cfg.eval.report_threshold
        curve = evaluate_classification(model, spec, threshold)
        curves.append(curve)
        print(f"{curve.word} ({curve.language}): F1@{threshold:g} = {curve.f1:.4f} "
              f"[{curve.num_positives} positives, {curve.num_negatives} negatives]")
    write_roc_csv(curves, out / "roc.csv")
    summary = write_eval_summary(curves, out / "classification_summary.json")
    _record(out, "eval-classify", cfg, list(args.models), [out / "roc.csv", out / "classification_summary.json"],
            started)
    print(f"mean F1 {summary['mean_f1']:.4f}")
    return 0


def _clip(manifest: DatasetManifest, entry, sr: int) -> AudioBuffer:
    buf = load_audio(manifest.resolve(entry), sr)
    x = np.zeros(sr, np.float32)
    x[: min(sr, len(buf))] = buf.samples[:sr]
    return AudioBuffer(x, sr)


def cmd_build_stream(args) -> int:
    cfg = _load_config(args)
    started = time.time()
    rng = np.random.default_rng(cfg.seed)
    out = Path(args.out or Path(cfg.paths.output_dir) / f"stream_{args.word}.wav")
    regime = args.regime or cfg.stream.regime
    sr = cfg.frontend.sample_rate
    if regime == "wakeword":
        manifest = _manifest(args, cfg)
        noise = load_noise_dir(_noise_dir(args, cfg))
        skip = {str(Path(p).resolve()) for p in (args.exclude or [])}
        pos = [e for e in manifest.select(words=[args.word], padding_modes=["silence"])
               if str(manifest.resolve(e).resolve()) not in skip]
        others = sorted({w for ws in _negative_categories(cfg, []).values() for w in ws} - {args.word})
        neg = manifest.select(words=others or [w for w in manifest.words() if w != args.word],
                              splits=cfg.eval.negative_splits, padding_modes=["silence"])
        if not pos or not neg:
            raise MkwsError(f"not enough clips to build a stream for {args.word!r}")
        n_t = min(cfg.stream.num_targets, len(pos))
        n_n = min(cfg.stream.num_nontargets, len(neg))
        targets = [_clip(manifest, pos[i], sr) for i in sorted(rng.choice(len(pos), n_t, replace=False))]
        nontargets = [(neg[i].word, _clip(manifest, neg[i], sr))
                      for i in sorted(rng.choice(len(neg), n_n, replace=False))]
        spec = StreamSpec("wakeword", args.word, cfg.stream.gap_min_s, cfg.stream.gap_max_s,
                          cfg.stream.noise_gain_max)
        stream, timeline = build_wakeword_stream(targets, nontargets, noise, spec, cfg.seed)
    else:
        root = _data_root(cfg)
        if root is None or not (root / "corpus.json").is_file():
            raise UsageError("the sentence regime needs a data root containing corpus.json")
        sentences = []
        for c in SyntheticCorpus.load(root).corpora:
            recs = parse_alignments(c["alignments"]).records
            by_clip: dict[str, list] = {}
            for r in recs:
                by_clip.setdefault(r.clip_id, []).append(r)
            for clip_id in sorted(by_clip):
                sentences.append((load_audio(find_clip_audio(Path(c["audio_root"]), clip_id), sr), by_clip[clip_id]))
        stream, timeline = build_sentence_stream(sentences, args.word, cfg.stream.sentence_duration_s, cfg.seed)
    sidecar = save_stream(stream, timeline, out)
    _record(out.parent, "build-stream", cfg, [], [out, sidecar], started)
    print(f"{regime} stream of {stream.duration_s:.1f} s with {timeline.num_targets} target occurrences at {out}")
    return 0


def cmd_eval_stream(args) -> int:
    cfg = _load_config(args)
    started = time.time()
    model = load_fewshot(args.model)
    stream, timeline = load_stream(args.stream)
    scfg = cfg.streaming
    if args.threshold is not None:
        scfg = dataclasses.replace(scfg, threshold=args.threshold)
    thresholds = sorted(set(default_thresholds().tolist()) | {scfg.threshold})
    regime = args.regime or ("wakeword" if timeline.num_nontargets and cfg.stream.regime == "wakeword"
                             else cfg.stream.regime)
    report = threshold_sweep(model, stream, timeline, thresholds, scfg, regime)
    out = _out_dir(args, cfg)
    report.write(out / "stream_report.csv", out / "stream_report.json")
    _record(out, "eval-stream", cfg, [args.model, args.stream], [out / "stream_report.csv"], started)
    row = report.row(scfg.threshold)
    print(f"threshold {scfg.threshold:g}: TPR {row['tpr']:.3f} ({row['tp']}/{row['tp'] + row['fr']}), "
          f"false accepts {row['fa']}, FAR {row['far']:.4f}")
    return 0


def cmd_inspect_model(args) -> int:
    print(json.dumps(inspect_model(args.model), indent=2, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output path (file or directory, per command)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mkws", description="Few-shot keyword spotting toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="generate a synthetic keyword corpus")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("extract", parents=[common], help="cut aligned keywords into 1 s clips")
    p.add_argument("--alignments")
    p.add_argument("--audio-root")
    p.add_argument("--language", default="unk")
    p.add_argument("--keywords", help="comma-separated subset of words to extract")
    p.add_argument("--padding", choices=sorted(PADDING_CHOICES), default="silence")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-embedding", parents=[common], help="train the embedding classifier")
    p.add_argument("--manifest")
    p.add_argument("--noise")
    p.add_argument("--epochs", type=int)
    p.add_argument("--padding", choices=["silence", "both"], default="silence")
    p.set_defaults(func=cmd_train_embedding)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a 5-shot keyword head")
    p.add_argument("--model", required=True, help="embedding model file")
    p.add_argument("--word", required=True)
    p.add_argument("--shots", nargs="+", required=True, help="the target example WAV files")
    p.add_argument("--manifest")
    p.add_argument("--noise")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval-classify", parents=[common], help="ROC / F1 evaluation of few-shot models")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--manifest")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval_classify)

    p = sub.add_parser("build-stream", parents=[common], help="assemble an evaluation stream")
    p.add_argument("--word", required=True)
    p.add_argument("--regime", choices=["wakeword", "sentence"])
    p.add_argument("--manifest")
    p.add_argument("--noise")
    p.add_argument("--exclude", nargs="*", help="clips to keep out of the stream (e.g. training shots)")
    p.set_defaults(func=cmd_build_stream)

    p = sub.add_parser("eval-stream", parents=[common], help="streaming detection accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--regime", choices=["wakeword", "sentence"])
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval_stream)

    p = sub.add_parser("inspect-model", help="print a model file's header")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect_model)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (MkwsError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mkws {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
