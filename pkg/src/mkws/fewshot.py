"""Five-shot keyword models: a 3-class softmax head on frozen embedding features.

A training mix of augmented target shots, unknown-bank words and background
noise is pushed through the frozen embedding once; the head is then plain
multinomial logistic regression on the cached features.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mkws import checkpoint, nn
from mkws.audio import AudioBuffer, FrontendConfig, load_audio, log_mel_frames
from mkws.augment import AugmentConfig, augment_to_spectrogram, background_sample, load_noise_dir
from mkws.dataset import DatasetManifest, KeywordExtraction, ManifestEntry, UnknownBank
from mkws.errors import FingerprintMismatch, InsufficientDataError, ModelFormatError, ShapeError
from mkws.model import EmbeddingModel, load_clips, model_from_parts, model_header, spectrogram_batch

log = logging.getLogger(__name__)

HEAD_CLASSES = ("target", "unknown", "background")
TARGET_IDX, UNKNOWN_IDX, BACKGROUND_IDX = 0, 1, 2
REPORT_THRESHOLD = 0.8


def default_thresholds() -> np.ndarray:
    return np.arange(101) / 100.0


@dataclass(frozen=True)
class FineTuneConfig:
    num_target_examples: int = 5
    total_samples: int = 256
    batch_size: int = 64
    target_fraction: float = 0.45
    unknown_fraction: float = 0.45
    noise_fraction: float = 0.10
    unknown_draw: int = 128
    epochs: int = 400
    learning_rate: float = 0.001
    seed: int = 0
    background_silence_prob: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if abs(self.target_fraction + self.unknown_fraction + self.noise_fraction - 1.0) > 1e-6:
            raise ValueError("target, unknown and noise fractions must sum to 1")
        if self.total_samples % self.batch_size:
            raise ValueError("total_samples must be divisible by batch_size")
        if self.num_target_examples < 1 or self.unknown_draw < 1 or self.epochs < 0:
            raise ValueError("num_target_examples and unknown_draw must be >= 1, epochs >= 0")

    def mix_counts(self) -> tuple[int, int, int]:
        """(target, unknown, background) row counts; background takes the rounding remainder."""
        t = int(math.floor(self.total_samples * self.target_fraction))
        u = int(math.floor(self.total_samples * self.unknown_fraction))
        return t, u, self.total_samples - t - u

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneConfig":
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


# -- training mix -------------------------------------------------------------


@dataclass
class TrainingMix:
    """Labeled log-mel rows; ``sources`` records where each row came from."""

    specs: np.ndarray
    labels: np.ndarray
    sources: list[str]

    def counts(self) -> tuple[int, int, int]:
        return tuple(int(np.sum(self.labels == k)) for k in range(3))


def _as_buffer(shot) -> AudioBuffer:
    if isinstance(shot, AudioBuffer):
        return shot
    if isinstance(shot, KeywordExtraction):
        return shot.audio
    return load_audio(shot)


def _fit_second(buf: AudioBuffer, n: int) -> AudioBuffer:
    if len(buf) == n:
        return buf
    x = np.zeros(n, np.float32)
    x[: min(n, len(buf))] = buf.samples[:n]
    return AudioBuffer(x, buf.sample_rate)


def _noise_list(noise) -> list[AudioBuffer]:
    if noise is None:
        return []
    if isinstance(noise, (str, Path)):
        return load_noise_dir(noise)
    return list(noise)


def build_training_mix(
    shots: Sequence,
    bank: UnknownBank,
    noise,
    cfg: FineTuneConfig,
    frontend: FrontendConfig | None = None,
) -> TrainingMix:
    """Assemble the fine-tuning rows in a seed-determined shuffled order.

    ``shots`` may be audio buffers, keyword extractions or WAV paths. Target
    rows are random augmentations of the shots, unknown rows are augmented
    samples of ``unknown_draw`` distinct bank clips (subsampled with
    replacement), background rows are noise crops or silence.
    """
    frontend = frontend or FrontendConfig()
    sr = frontend.sample_rate
    if len(shots) != cfg.num_target_examples:
        raise ValueError(f"expected exactly {cfg.num_target_examples} target examples, got {len(shots)}")
    if len(bank) < cfg.unknown_draw:
        raise InsufficientDataError(f"unknown bank has {len(bank)} samples, need {cfg.unknown_draw}")
    noise = _noise_list(noise)
    if not noise and cfg.noise_fraction > 0:
        raise FileNotFoundError("background rows require a non-empty noise source")

    n_t, n_u, n_b = cfg.mix_counts()
    rng = np.random.default_rng(cfg.seed)
    shot_audio = [_fit_second(_as_buffer(s), sr) for s in shots]
    drawn = rng.choice(len(bank), size=cfg.unknown_draw, replace=False)
    drawn_audio = load_clips(DatasetManifest(list(bank.entries), bank.root),
                             [bank.entries[i] for i in drawn], sr)

    specs, labels, sources = [], [], []
    for _ in range(n_t):
        k = int(rng.integers(0, len(shot_audio)))
        specs.append(augment_to_spectrogram(shot_audio[k], noise, cfg.augment, rng, frontend))
        labels.append(TARGET_IDX)
        sources.append(f"shot:{k}")
    for _ in range(n_u):
        k = int(rng.integers(0, len(drawn)))
        specs.append(augment_to_spectrogram(AudioBuffer(drawn_audio[k], sr), noise, cfg.augment, rng, frontend))
        labels.append(UNKNOWN_IDX)
        sources.append(f"bank:{bank.entries[drawn[k]].path}")
    for _ in range(n_b):
        specs.append(log_mel_frames(background_sample(noise, sr, rng, silence_prob=cfg.background_silence_prob),
                                    frontend))
        labels.append(BACKGROUND_IDX)
        sources.append("background")

    order = rng.permutation(len(labels))
    return TrainingMix(np.stack(specs)[order], np.asarray(labels)[order], [sources[i] for i in order])


@dataclass
class MixFeatures:
    features: np.ndarray
    labels: np.ndarray
    embedding_hash: str


def featurize(mix: TrainingMix, embedding: EmbeddingModel) -> MixFeatures:
    """Run the mix through the frozen embedding once."""
    return MixFeatures(embedding.features(mix.specs), mix.labels.copy(), embedding.checkpoint_hash())


# -- head ---------------------------------------------------------------------


@dataclass(eq=False)
class FewShotHead:
    weight: np.ndarray  # (embedding_units, 3)
    bias: np.ndarray  # (3,)
    word: str = ""
    embedding_hash: str = ""
    classes: tuple = HEAD_CLASSES
    shots: tuple[str, ...] = ()  # paths of the clips the head was trained from

    @classmethod
    def init(cls, embedding_units: int, seed: int = 0, word: str = "", embedding_hash: str = "") -> "FewShotHead":
        rng = np.random.default_rng(seed)
        w = nn.glorot_uniform(rng, (embedding_units, 3), embedding_units, 3)
        return cls(w.astype(np.float32), np.zeros(3, np.float32), word, embedding_hash)

    def copy(self) -> "FewShotHead":
        return FewShotHead(self.weight.copy(), self.bias.copy(), self.word, self.embedding_hash, self.classes,
                           self.shots)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return nn.dense(np.asarray(features, np.float32), self.weight, self.bias)

    def scores(self, features: np.ndarray) -> np.ndarray:
        return nn.softmax(self.logits(features))


def fine_tune(
    embedding: EmbeddingModel,
    mix: MixFeatures,
    cfg: FineTuneConfig,
    head: FewShotHead | None = None,
    word: str = "",
) -> FewShotHead:
    """Train a 3-class head with softmax cross-entropy and Adam; the embedding stays frozen."""
    before = embedding.checkpoint_hash()
    if mix.embedding_hash != before:
        raise FingerprintMismatch("mix features were computed with a different embedding")
    head = head.copy() if head is not None else FewShotHead.init(embedding.spec.embedding_units, cfg.seed)
    head.word = word or head.word
    head.embedding_hash = before

    layer = nn.Dense(head.weight.shape[0], 3, name="head")
    layer.weight.value, layer.bias.value = head.weight.copy(), head.bias.copy()
    state = nn.OptimizerState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    feats = mix.features.astype(np.float32)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(feats))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            layer.weight.zero_grad()
            layer.bias.zero_grad()
            logits = layer.forward(feats[idx], training=True)
            loss, probs = nn.softmax_xent(logits, mix.labels[idx])
            layer.backward(nn.softmax_xent_backward(probs, mix.labels[idx]))
            nn.adam_step(layer.params(), state)
        log.debug("head epoch %d loss %.4f", epoch + 1, loss)
    head.weight, head.bias = layer.weight.value.copy(), layer.bias.value.copy()

    if embedding.checkpoint_hash() != before:
        raise RuntimeError("embedding parameters changed during head training")
    return head


@dataclass(eq=False)
class FewShotModel:
    """A frozen embedding plus a trained head; scores 1 s clips."""

    embedding: EmbeddingModel
    head: FewShotHead

    def __post_init__(self):
        if self.head.embedding_hash and self.head.embedding_hash != self.embedding.checkpoint_hash():
            raise FingerprintMismatch("head was trained on a different embedding")

    @property
    def word(self) -> str:
        return self.head.word

    def scores_from_specs(self, specs) -> np.ndarray:
        return self.head.scores(self.embedding.features(specs))

    def scores(self, clips: np.ndarray) -> np.ndarray:
        """(N, 3) probabilities for an (N, sample_rate) batch of 1 s clips."""
        clips = np.asarray(clips, np.float32)
        sr = self.embedding.frontend.sample_rate
        if clips.ndim == 1:
            clips = clips[None]
        if clips.ndim != 2 or clips.shape[1] != sr:
            raise ShapeError(f"expected clips of exactly {sr} samples, got shape {clips.shape}")
        return self.scores_from_specs(spectrogram_batch(clips, self.embedding.frontend))

    def classify(self, clip: AudioBuffer, threshold: float = REPORT_THRESHOLD) -> tuple[np.ndarray, bool]:
        if clip.sample_rate != self.embedding.frontend.sample_rate:
            raise ShapeError(f"clip rate {clip.sample_rate} != model rate {self.embedding.frontend.sample_rate}")
        s = self.scores(clip.samples)[0]
        return s, bool(s[TARGET_IDX] >= threshold)


def save_fewshot(model: FewShotModel, path: str | Path) -> None:
    header = {
        "kind": "fewshot",
        "word": model.head.word,
        "classes": list(model.head.classes),
        "embedding_hash": model.head.embedding_hash,
        "shots": list(model.head.shots),
        "embedding": model_header(model.embedding),
    }
    tensors = {f"embedding/{p.name}": p.value for p in model.embedding.params()}
    tensors["head/weight"] = model.head.weight
    tensors["head/bias"] = model.head.bias
    checkpoint.write_container(path, header, tensors)


def load_fewshot(path: str | Path) -> FewShotModel:
    header, tensors = checkpoint.read_container(path)
    if header.get("kind") != "fewshot":
        raise ModelFormatError(f"expected a few-shot model, got kind {header.get('kind')!r}")
    emb_tensors = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("embedding/")}
    embedding = model_from_parts(header["embedding"], emb_tensors)
    if embedding.checkpoint_hash() != header["embedding_hash"]:
        raise FingerprintMismatch("stored embedding does not match the head's embedding hash")
    head = FewShotHead(tensors["head/weight"], tensors["head/bias"], header["word"], header["embedding_hash"],
                       tuple(header["classes"]), tuple(header.get("shots", ())))
    return FewShotModel(embedding, head)


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalSpec:
    """Positive and negative pools for one target word."""

    word: str
    language: str
    positives: list[ManifestEntry]
    negatives: list[ManifestEntry]
    negative_category: list[str]
    root: str | None = None
    thresholds: np.ndarray = field(default_factory=default_thresholds)

    def category_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.negative_category:
            out[c] = out.get(c, 0) + 1
        return out


def select_shots(manifest: DatasetManifest, word: str, n: int = 5, seed: int = 0,
                 padding_mode: str = "silence") -> list[ManifestEntry]:
    pool = manifest.select(words=[word], padding_modes=[padding_mode])
    if len(pool) < n:
        raise InsufficientDataError(f"{word!r} has {len(pool)} samples, need {n} shots")
    idx = np.random.default_rng(seed).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(idx)]


def build_eval_spec(
    manifest: DatasetManifest,
    word: str,
    categories: dict[str, Sequence[str]],
    exclude: Sequence = (),
    max_positives: int = 1995,
    total_negatives: int = 30000,
    seed: int = 0,
    padding_mode: str = "silence",
    negative_splits: Sequence[str] = ("val", "test"),
) -> EvalSpec:
    """Positives: every remaining ``word`` sample (capped). Negatives: equal shares per category.

    ``exclude`` lists entries or file paths (the training shots) to leave out.
    ``categories`` maps a category name (e.g. embedding, bank, novel) to its
    words. Each category contributes the same number of samples (within one),
    limited by the smallest category pool.
    """
    rng = np.random.default_rng(seed)
    def key(x) -> str:
        return str((manifest.resolve(x) if isinstance(x, ManifestEntry) else Path(x)).resolve())

    skip = {key(x) for x in exclude}
    pos = [e for e in manifest.select(words=[word], padding_modes=[padding_mode]) if key(e) not in skip]
    if not pos:
        raise InsufficientDataError(f"no evaluation positives left for {word!r}")
    if len(pos) > max_positives:
        pos = [pos[i] for i in sorted(rng.choice(len(pos), size=max_positives, replace=False))]
    pools = {}
    for name, words in categories.items():
        words = [w for w in words if w != word]
        pools[name] = manifest.select(words=words, splits=negative_splits, padding_modes=[padding_mode])
    if not pools or min(len(p) for p in pools.values()) == 0:
        raise InsufficientDataError("every negative category needs at least one sample")
    total = min(total_negatives, len(pools) * min(len(p) for p in pools.values()))
    share = [total // len(pools) + (i < total % len(pools)) for i in range(len(pools))]
    negatives, cats = [], []
    for (name, pool), n in zip(pools.items(), share):
        n = min(n, len(pool))
        for i in sorted(rng.choice(len(pool), size=n, replace=False)):
            negatives.append(pool[i])
            cats.append(name)
    language = pos[0].language
    return EvalSpec(word, language, pos, negatives, cats, manifest.root)


@dataclass
class RocCurve:
    word: str
    language: str
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    report_threshold: float = REPORT_THRESHOLD
    f1: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    num_positives: int = 0
    num_negatives: int = 0

    def points(self) -> list[tuple[float, float, float]]:
        return [(float(t), float(a), float(b)) for t, a, b in zip(self.thresholds, self.tpr, self.fpr)]

    def summary(self) -> dict:
        return {"word": self.word, "language": self.language, "f1": self.f1, "precision": self.precision,
                "recall": self.recall, "report_threshold": self.report_threshold,
                "num_positives": self.num_positives, "num_negatives": self.num_negatives}


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(precision, recall, F1); an empty denominator gives 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def roc_from_scores(pos_scores, neg_scores, thresholds=None, report_threshold: float = REPORT_THRESHOLD,
                    word: str = "", language: str = "") -> RocCurve:
    """Accept a clip when its target score is >= the threshold."""
    pos = np.asarray(pos_scores, np.float64)
    neg = np.asarray(neg_scores, np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative score")
    th = np.asarray(default_thresholds() if thresholds is None else thresholds, np.float64)
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    # count of scores >= t is n - (number strictly below t)
    tp = pos.size - np.searchsorted(pos_sorted, th, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, th, side="left")
    tp_r = int(np.sum(pos >= report_threshold))
    fp_r = int(np.sum(neg >= report_threshold))
    p, r, f1 = f1_from_counts(tp_r, fp_r, pos.size - tp_r)
    return RocCurve(word, language, th, tp / pos.size, fp / neg.size, report_threshold, f1, p, r,
                    int(pos.size), int(neg.size))


def evaluate_classification(model: FewShotModel, spec: EvalSpec, report_threshold: float = REPORT_THRESHOLD,
                            chunk: int = 512) -> RocCurve:
    if not spec.positives or not spec.negatives:
        raise InsufficientDataError("evaluation pools must be non-empty")
    sr = model.embedding.frontend.sample_rate
    man = DatasetManifest(spec.positives + spec.negatives, spec.root)

    def target_scores(entries):
        out = []
        for i in range(0, len(entries), chunk):
            clips = load_clips(man, entries[i : i + chunk], sr)
            out.append(model.scores(clips)[:, TARGET_IDX])
        return np.concatenate(out)

    return roc_from_scores(target_scores(spec.positives), target_scores(spec.negatives), spec.thresholds,
                           report_threshold, spec.word, spec.language)


@dataclass
class LanguageSummary:
    language: str
    thresholds: np.ndarray
    mean_tpr: np.ndarray
    sd_tpr: np.ndarray
    mean_fpr: np.ndarray
    sd_fpr: np.ndarray
    mean_f1: float
    words: list[str]

    def to_dict(self) -> dict:
        return {"language": self.language, "mean_f1": self.mean_f1, "words": self.words,
                "thresholds": self.thresholds.tolist(), "mean_tpr": self.mean_tpr.tolist(),
                "sd_tpr": self.sd_tpr.tolist(), "mean_fpr": self.mean_fpr.tolist(), "sd_fpr": self.sd_fpr.tolist()}


def aggregate_language_report(curves: Sequence[RocCurve], thresholds=None) -> dict[str, LanguageSummary]:
    """Pointwise mean and population SD of TPR/FPR per language, plus unweighted mean F1.

    Curves on a different threshold grid are linearly interpolated onto ``thresholds``
    (default: the first curve's grid).
    """
    if not curves:
        return {}
    grid = np.asarray(curves[0].thresholds if thresholds is None else thresholds, np.float64)
    out = {}
    for lang in sorted({c.language for c in curves}):
        group = [c for c in curves if c.language == lang]
        tpr = np.stack([np.interp(grid, c.thresholds, c.tpr) for c in group])
        fpr = np.stack([np.interp(grid, c.thresholds, c.fpr) for c in group])
        out[lang] = LanguageSummary(lang, grid, tpr.mean(0), tpr.std(0), fpr.mean(0), fpr.std(0),
                                    float(np.mean([c.f1 for c in group])), [c.word for c in group])
    return out


def write_roc_csv(curves: Sequence[RocCurve], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["keyword", "language", "threshold", "tpr", "fpr"])
        for c in curves:
            for t, a, b in c.points():
                w.writerow([c.word, c.language, f"{t:.4f}", f"{a:.6f}", f"{b:.6f}"])


def write_eval_summary(curves: Sequence[RocCurve], path: str | Path) -> dict:
    langs = aggregate_language_report(curves)
    summary = {
        "report_threshold": curves[0].report_threshold if curves else REPORT_THRESHOLD,
        "keywords": [c.summary() for c in curves],
        "languages": {k: {"mean_f1": v.mean_f1, "words": v.words} for k, v in langs.items()},
        "mean_f1": float(np.mean([c.f1 for c in curves])) if curves else 0.0,
    }
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
