"""Keyword-classification network whose penultimate SELU layer is the embedding.

The network is ``standardize -> conv trunk -> global average pool -> dense
ReLU stack -> dense SELU (embedding) -> dense logits``. Class index 0 is the
background category.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mkws import checkpoint, nn
from mkws.audio import AudioBuffer, FrontendConfig, Spectrogram, load_audio, log_mel_frames
from mkws.augment import AugmentConfig, augment_to_spectrogram, background_sample, load_noise_dir
from mkws.dataset import DatasetManifest, ManifestEntry
from mkws.errors import InsufficientDataError, ManifestError, ModelFormatError, ShapeError

log = logging.getLogger(__name__)

BACKGROUND = "_background_"
PADDING_VARIANTS = ("silence_only", "silence_and_context")


@dataclass(frozen=True)
class ConvStage:
    filters: int
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class EmbeddingNetSpec:
    trunk: tuple[ConvStage, ...] = (ConvStage(16), ConvStage(32), ConvStage(64))
    dense_units: tuple[int, ...] = (128,)
    embedding_units: int = 64
    num_classes: int = 9
    embedding_activation: str = "selu"
    input_shape: tuple[int, int] = (49, 40)

    def __post_init__(self):
        if self.embedding_units < 2:
            raise ValueError("embedding_units must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.trunk:
            raise ValueError("trunk needs at least one conv stage")
        if any(s.filters < 1 or s.kernel < 1 or s.stride < 1 for s in self.trunk):
            raise ValueError("conv stage sizes must be positive")
        if any(u < 1 for u in self.dense_units):
            raise ValueError("dense_units must be positive")

    @classmethod
    def full_scale(cls, num_classes: int = 761) -> "EmbeddingNetSpec":
        """Head dimensions of the published model on the desk-scale trunk."""
        return cls(dense_units=(2048, 2048), embedding_units=1024, num_classes=num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk"] = [asdict(s) for s in self.trunk]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingNetSpec":
        d = dict(d)
        d["trunk"] = tuple(ConvStage(**s) for s in d.get("trunk", ()))
        d["dense_units"] = tuple(d.get("dense_units", ()))
        d["input_shape"] = tuple(d.get("input_shape", (49, 40)))
        return cls(**d)


@dataclass
class TrainingConfig:
    epochs: int = 20  # the published run used 94
    batch_size: int = 64
    learning_rate: float = 0.001
    noise_fraction: float = 0.10
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    padding_variant: str = "silence_only"
    background_silence_prob: float = 0.1
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not (0 <= self.noise_fraction < 1):
            raise ValueError("noise_fraction must be in [0, 1)")
        if self.padding_variant not in PADDING_VARIANTS:
            raise ValueError(f"padding_variant must be one of {PADDING_VARIANTS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingReport:
    epochs: list[dict] = field(default_factory=list)
    validation: dict = field(default_factory=dict)  # language -> {correct, total, accuracy}
    overall_top1: float = 0.0
    best_epoch: int = 0

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "loss", "train_accuracy", "val_accuracy"])
                for e in self.epochs:
                    w.writerow([e["epoch"], f"{e['loss']:.6f}", f"{e['train_accuracy']:.6f}",
                                f"{e['val_accuracy']:.6f}"])


def _stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class EmbeddingModel:
    def __init__(self, spec: EmbeddingNetSpec, net: nn.Sequential, classes: list[str],
                 frontend: FrontendConfig, fingerprint: dict | None = None):
        if len(classes) != spec.num_classes:
            raise ValueError(f"{len(classes)} class names for {spec.num_classes} outputs")
        self.spec = spec
        self.net = net
        self.classes = list(classes)
        self.frontend = frontend
        self.fingerprint = dict(fingerprint or {"config_hash": "", "data_hash": ""})
        # index one past the embedding activation
        self.embedding_end = len(net.layers) - 1

    @property
    def standardize(self) -> nn.Standardize:
        return self.net.layers[0]

    def params(self) -> list[nn.Parameter]:
        return self.net.params()

    def checkpoint_hash(self) -> str:
        """SHA-256 over every parameter's name, shape and bytes."""
        h = hashlib.sha256()
        for p in self.params():
            h.update(p.name.encode())
            h.update(repr(p.value.shape).encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    def _check_batch(self, batch) -> np.ndarray:
        if isinstance(batch, Spectrogram):
            batch = [batch]
        if isinstance(batch, (list, tuple)):
            batch = np.stack([s.values if isinstance(s, Spectrogram) else s for s in batch])
        batch = np.asarray(batch, dtype=np.float32)
        if batch.ndim == 2:
            batch = batch[None]
        if batch.ndim != 3 or tuple(batch.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(f"expected (N, {self.spec.input_shape[0]}, {self.spec.input_shape[1]}), got {batch.shape}")
        return batch

    def _chunked(self, batch, upto, chunk):
        batch = self._check_batch(batch)
        outs = [self.net.forward(batch[i : i + chunk], upto=upto) for i in range(0, len(batch), chunk)]
        if not outs:
            width = self.spec.embedding_units if upto is not None else self.spec.num_classes
            return np.zeros((0, width), np.float32)
        return np.concatenate(outs)

    def features(self, batch, chunk: int = 256) -> np.ndarray:
        return self._chunked(batch, self.embedding_end, chunk)

    def logits(self, batch, chunk: int = 256) -> np.ndarray:
        return self._chunked(batch, None, chunk)

    def predict(self, batch) -> np.ndarray:
        return np.argmax(self.logits(batch), axis=1)

    def predict_proba(self, batch) -> np.ndarray:
        return nn.softmax(self.logits(batch))


def build_network(spec: EmbeddingNetSpec, rng: np.random.Generator) -> nn.Sequential:
    layers: list[nn.Layer] = [nn.Standardize()]
    cin = 1
    for i, stage in enumerate(spec.trunk):
        layers += [
            nn.Conv2D(cin, stage.filters, stage.kernel, 1, "same", rng, name=f"stage{i}/conv_a"),
            nn.Activation("relu"),
            nn.Conv2D(stage.filters, stage.filters, stage.kernel, stage.stride, "same", rng, name=f"stage{i}/conv_b"),
            nn.Activation("relu"),
        ]
        cin = stage.filters
    layers.append(nn.GlobalAvgPool())
    width = cin
    for j, units in enumerate(spec.dense_units):
        layers += [nn.Dense(width, units, "he", rng, name=f"dense{j}"), nn.Activation("relu")]
        width = units
    layers += [
        nn.Dense(width, spec.embedding_units, "lecun", rng, name="embedding"),
        nn.Activation(spec.embedding_activation),
        nn.Dense(spec.embedding_units, spec.num_classes, "glorot", rng, name="logits"),
    ]
    return nn.Sequential(layers)


def build_model(spec: EmbeddingNetSpec, seed: int = 0, classes: Sequence[str] | None = None,
                frontend: FrontendConfig | None = None) -> EmbeddingModel:
    frontend = frontend or FrontendConfig()
    expected = (frontend.num_frames(frontend.sample_rate), frontend.num_mel_bins)
    if tuple(spec.input_shape) != expected:
        raise ValueError(f"spec input_shape {spec.input_shape} does not match frontend output {expected}")
    if classes is None:
        classes = [BACKGROUND] + [f"class_{i}" for i in range(1, spec.num_classes)]
    if classes[0] != BACKGROUND:
        raise ValueError(f"class 0 must be {BACKGROUND!r}")
    net = build_network(spec, np.random.default_rng(seed))
    return EmbeddingModel(spec, net, list(classes), frontend)


def extract_features(model: EmbeddingModel, spec_batch) -> np.ndarray:
    """Penultimate (post-SELU) activations, one row per input spectrogram."""
    return model.features(spec_batch)


# -- data loading -----------------------------------------------------------


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) == n:
        return x
    out = np.zeros(n, np.float32)
    out[: min(n, len(x))] = x[:n]
    return out


def load_clips(manifest: DatasetManifest, entries: Sequence[ManifestEntry], sample_rate: int) -> np.ndarray:
    """Stack the audio of ``entries`` into an (N, sample_rate) float32 array."""
    out = np.zeros((len(entries), sample_rate), np.float32)
    for i, e in enumerate(entries):
        path = manifest.resolve(e)
        if not path.is_file():
            raise FileNotFoundError(f"missing audio for manifest entry: {path}")
        out[i] = _fit_length(load_audio(path, sample_rate).samples, sample_rate)
    return out


def spectrogram_batch(clips: np.ndarray, frontend: FrontendConfig, chunk: int = 512) -> np.ndarray:
    return np.concatenate([log_mel_frames(clips[i : i + chunk], frontend) for i in range(0, len(clips), chunk)]) \
        if len(clips) else np.zeros((0, frontend.num_frames(clips.shape[1]), frontend.num_mel_bins), np.float32)


def _training_entries(manifest, classes, split, variant):
    modes = ("silence",) if variant == "silence_only" else ("silence", "context")
    return manifest.select(words=classes[1:], splits=(split,), padding_modes=modes)


def data_hash(manifest: DatasetManifest, entries: Sequence[ManifestEntry], noise_names: Sequence[str]) -> str:
    return _stable_hash({"entries": [e.to_json() for e in entries], "noise": list(noise_names)})


def accuracy_table(predicted, labels, languages) -> tuple[dict, float]:
    """Per-language top-1 accuracy plus the sample-weighted overall accuracy."""
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    table: dict[str, dict] = {}
    for lang in sorted(set(languages)):
        mask = np.array([l == lang for l in languages])
        correct = int(np.sum(predicted[mask] == labels[mask]))
        total = int(mask.sum())
        table[lang] = {"correct": correct, "total": total, "accuracy": correct / total}
    overall = float(np.mean(predicted == labels)) if len(labels) else 0.0
    return table, overall


def _make_background_set(noise, count, sample_rate, rng, silence_prob):
    return np.stack([background_sample(noise, sample_rate, rng, silence_prob=silence_prob) for _ in range(count)]) \
        if count else np.zeros((0, sample_rate), np.float32)


def train_embedding(
    model: EmbeddingModel,
    manifest: DatasetManifest,
    noise,
    cfg: TrainingConfig,
    fit_normalization: bool = True,
) -> TrainingReport:
    """Train ``model`` in place on the manifest's train split.

    ``noise`` is a directory of WAV files or a list of :class:`AudioBuffer`.
    Every batch has ``noise_fraction * batch_size`` of its rows (stochastically
    rounded) replaced by background clips; the other rows are augmented
    keyword samples. The parameters of the epoch with the best validation
    accuracy are kept.
    """
    sr = model.frontend.sample_rate
    noise_names: list[str] = []
    if isinstance(noise, (str, Path)):
        noise_names = [str(p.relative_to(noise)) for p in sorted(Path(noise).rglob("*.wav"))]
        noise = load_noise_dir(noise)
    noise = list(noise or [])
    if cfg.noise_fraction > 0 and not noise:
        raise FileNotFoundError("noise_fraction > 0 requires a non-empty noise source")

    class_index = {c: i for i, c in enumerate(model.classes)}
    train_entries = _training_entries(manifest, model.classes, "train", cfg.padding_variant)
    val_entries = _training_entries(manifest, model.classes, "val", cfg.padding_variant)
    if not train_entries:
        raise ManifestError("train split has no samples of the model's classes")
    missing = set(model.classes[1:]) - {e.word for e in train_entries}
    if missing:
        raise ManifestError(f"classes without training samples: {sorted(missing)}")

    rng = np.random.default_rng(cfg.seed)
    train_clips = load_clips(manifest, train_entries, sr)
    train_labels = np.array([class_index[e.word] for e in train_entries])
    val_clips = load_clips(manifest, val_entries, sr)
    val_labels = [class_index[e.word] for e in val_entries]
    val_langs = [e.language for e in val_entries]
    n_val_bg = int(round(len(val_entries) * cfg.noise_fraction / (1 - cfg.noise_fraction))) if noise else 0
    val_clips = np.concatenate([val_clips, _make_background_set(noise, n_val_bg, sr, rng, cfg.background_silence_prob)])
    val_labels = np.array(val_labels + [0] * n_val_bg, dtype=int)
    val_langs = val_langs + [BACKGROUND] * n_val_bg
    val_specs = spectrogram_batch(val_clips, model.frontend)

    if fit_normalization:
        clean = spectrogram_batch(train_clips, model.frontend)
        shift = float(clean.mean(dtype=np.float64))
        scale = float(clean.std(dtype=np.float64)) or 1.0
        model.standardize.shift.value[...] = shift
        model.standardize.scale.value[...] = scale
        del clean

    model.fingerprint = {
        "config_hash": _stable_hash({"training": cfg.to_dict(), "spec": model.spec.to_dict(),
                                     "classes": model.classes, "frontend": model.frontend.to_dict()}),
        "data_hash": data_hash(manifest, train_entries + val_entries, noise_names),
    }

    state = nn.OptimizerState(learning_rate=cfg.learning_rate)
    params = model.params()
    report = TrainingReport()
    best_acc, best_values = -1.0, None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_entries))
        losses, correct, seen = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            n = len(idx)
            expect = cfg.noise_fraction * n
            n_noise = int(math.floor(expect)) + int(rng.uniform() < expect - math.floor(expect)) if noise else 0
            noise_rows = set(rng.choice(n, size=n_noise, replace=False).tolist()) if n_noise else set()
            specs = np.empty((n,) + tuple(model.spec.input_shape), np.float32)
            labels = np.empty(n, dtype=int)
            for r, i in enumerate(idx):
                if r in noise_rows:
                    bg = background_sample(noise, sr, rng, silence_prob=cfg.background_silence_prob)
                    specs[r] = log_mel_frames(bg, model.frontend)
                    labels[r] = 0
                else:
                    specs[r] = augment_to_spectrogram(AudioBuffer(train_clips[i], sr), noise, cfg.augment,
                                                      rng, model.frontend)
                    labels[r] = train_labels[i]
            model.net.zero_grad()
            logits = model.net.forward(specs, training=True)
            loss, probs = nn.softmax_xent(logits, labels)
            model.net.backward(nn.softmax_xent_backward(probs, labels))
            nn.adam_step(params, state)
            losses.append(loss * n)
            correct += int(np.sum(np.argmax(probs, axis=1) == labels))
            seen += n
        val_pred = model.predict(val_specs) if len(val_specs) else np.zeros(0, int)
        val_acc = float(np.mean(val_pred == val_labels)) if len(val_labels) else 0.0
        epoch_loss = float(np.sum(losses) / seen)
        report.epochs.append({"epoch": epoch, "loss": epoch_loss, "train_accuracy": correct / seen,
                              "val_accuracy": val_acc})
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, epoch_loss, correct / seen, val_acc)
        if val_acc > best_acc:
            best_acc, report.best_epoch = val_acc, epoch
            best_values = [p.value.copy() for p in params]
            if cfg.checkpoint_dir:
                save_model(model, Path(cfg.checkpoint_dir) / "best.mkws")
    if best_values is not None:
        for p, v in zip(params, best_values):
            p.value[...] = v

    if len(val_specs):
        table, overall = accuracy_table(model.predict(val_specs), val_labels, val_langs)
        report.validation, report.overall_top1 = table, overall
    return report


def validate(model: EmbeddingModel, manifest: DatasetManifest, split: str = "val",
             padding_modes: Sequence[str] = ("silence",)) -> tuple[dict, float]:
    """Top-1 accuracy per language and overall on one manifest split."""
    entries = manifest.select(words=model.classes[1:], splits=(split,), padding_modes=padding_modes)
    if not entries:
        raise ManifestError(f"split {split!r} has no samples of the model's classes")
    clips = load_clips(manifest, entries, model.frontend.sample_rate)
    pred = model.predict(spectrogram_batch(clips, model.frontend))
    labels = [model.classes.index(e.word) for e in entries]
    return accuracy_table(pred, labels, [e.language for e in entries])


# -- persistence ------------------------------------------------------------


def model_header(model: EmbeddingModel) -> dict:
    return {
        "kind": "embedding",
        "spec": model.spec.to_dict(),
        "classes": model.classes,
        "frontend": model.frontend.to_dict(),
        "fingerprint": model.fingerprint,
    }


def save_model(model: EmbeddingModel, path: str | Path) -> None:
    tensors = {p.name: p.value for p in model.params()}
    checkpoint.write_container(path, model_header(model), tensors)


def model_from_parts(header: dict, tensors: dict) -> EmbeddingModel:
    if header.get("kind") != "embedding":
        raise ModelFormatError(f"expected an embedding model, got kind {header.get('kind')!r}")
    spec = EmbeddingNetSpec.from_dict(header["spec"])
    model = build_model(spec, 0, header["classes"], FrontendConfig(**header["frontend"]))
    for p in model.params():
        if p.name not in tensors:
            raise ModelFormatError(f"missing tensor {p.name!r}")
        if tensors[p.name].shape != p.value.shape:
            raise ModelFormatError(f"tensor {p.name!r} has shape {tensors[p.name].shape}, expected {p.value.shape}")
        p.value = tensors[p.name].astype(np.float32)
        p.zero_grad()
    model.fingerprint = dict(header.get("fingerprint", {}))
    return model


def load_model(path: str | Path) -> EmbeddingModel:
    header, tensors = checkpoint.read_container(path)
    return model_from_parts(header, tensors)


def inspect_model(path: str | Path) -> dict:
    """Header only: spec, classes, frontend and fingerprint, weights untouched."""
    return checkpoint.read_header(path)


# -- cross-dataset domain-gap grid ----------------------------------------------


def tiny_binary_net(frontend: FrontendConfig, rng: np.random.Generator, shift=0.0, scale=1.0) -> nn.Sequential:
    """Small single-conv binary classifier in the spirit of the speech-commands tiny conv model."""
    t = frontend.num_frames(frontend.sample_rate)
    f = frontend.num_mel_bins
    ho = -(-t // 2)
    wo = -(-f // 2)
    return nn.Sequential([
        nn.Standardize(shift, scale),
        nn.Conv2D(1, 8, 5, 2, "same", rng, name="tiny/conv"),
        nn.Activation("relu"),
        nn.Flatten(),
        nn.Dense(ho * wo * 8, 2, "glorot", rng, name="tiny/logits"),
    ])


def train_binary_classifier(specs: np.ndarray, labels: np.ndarray, frontend: FrontendConfig,
                            epochs: int = 10, batch_size: int = 32, learning_rate: float = 0.001,
                            seed: int = 0) -> nn.Sequential:
    rng = np.random.default_rng(seed)
    net = tiny_binary_net(frontend, rng, float(specs.mean()), float(specs.std()) or 1.0)
    state = nn.OptimizerState(learning_rate=learning_rate)
    for _ in range(epochs):
        order = rng.permutation(len(specs))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            net.zero_grad()
            loss, probs = nn.softmax_xent(net.forward(specs[idx], training=True), labels[idx])
            net.backward(nn.softmax_xent_backward(probs, labels[idx]))
            nn.adam_step(net.params(), state)
    return net


def binary_accuracy(net: nn.Sequential, specs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(net.forward(specs), axis=1) == labels))


def _binary_split(manifest: DatasetManifest, word: str, split: str, frontend: FrontendConfig):
    entries = manifest.select(splits=(split,), padding_modes=("silence",))
    labels = np.array([int(e.word == word) for e in entries])
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise InsufficientDataError(f"{split} split needs both '{word}' and other words")
    clips = load_clips(manifest, entries, frontend.sample_rate)
    return spectrogram_batch(clips, frontend), labels


def cross_dataset_eval(dataset_a: DatasetManifest, dataset_b: DatasetManifest, word: str,
                       frontend: FrontendConfig | None = None, epochs: int = 10, seed: int = 0) -> np.ndarray:
    """2x2 accuracy grid: row = training dataset, column = test dataset.

    A binary ``word``-vs-rest classifier is trained on each dataset's train
    split and scored on both test splits.
    """
    frontend = frontend or FrontendConfig()
    data = [(_binary_split(d, word, "train", frontend), _binary_split(d, word, "test", frontend))
            for d in (dataset_a, dataset_b)]
    grid = np.zeros((2, 2))
    for i, ((x_tr, y_tr), _) in enumerate(data):
        net = train_binary_classifier(x_tr, y_tr, frontend, epochs=epochs, seed=seed)
        for j, (_, (x_te, y_te)) in enumerate(data):
            grid[i, j] = binary_accuracy(net, x_te, y_te)
    return grid
