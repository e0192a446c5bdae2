"""Experiment configuration (one JSON document) and the append-only run log."""

from __future__ import annotations

import dataclasses
import fcntl
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from mkws import __version__
from mkws.audio import FrontendConfig
from mkws.augment import AugmentConfig
from mkws.fewshot import FineTuneConfig
from mkws.model import EmbeddingNetSpec, TrainingConfig
from mkws.streaming import StreamingConfig

DATA_ROOT_ENV = "MKWS_DATA_ROOT"


@dataclass(frozen=True)
class EvalConfig:
    max_positives: int = 1995
    total_negatives: int = 30000
    report_threshold: float = 0.8
    negative_splits: tuple[str, ...] = ("val", "test")
    padding_mode: str = "silence"


@dataclass(frozen=True)
class BankConfig:
    size: int = 5000
    max_word_fraction: float = 0.02


@dataclass(frozen=True)
class StreamBuildConfig:
    regime: str = "wakeword"
    num_targets: int = 100
    num_nontargets: int = 100
    gap_min_s: float = 1.0
    gap_max_s: float = 3.0
    noise_gain_max: float = 0.5
    sentence_duration_s: float = 1200.0


@dataclass(frozen=True)
class SyntheticConfig:
    n_embedding: int = 8
    n_heldout: int = 2
    n_bank: int = 6
    n_novel: int = 4
    samples_per_word: int = 200
    languages: tuple[str, ...] = ("xa", "xb")
    num_speakers: int = 80
    min_word_distance: int = 3


@dataclass(frozen=True)
class WordRoles:
    """Which words play which part. Empty lists mean "derive from the data"."""

    embedding: tuple[str, ...] = ()
    bank: tuple[str, ...] = ()
    novel: tuple[str, ...] = ()
    targets: tuple[str, ...] = ()


@dataclass(frozen=True)
class Paths:
    data_root: str = ""
    noise_dir: str = ""
    output_dir: str = "runs"
    manifest: str = ""

    def resolve(self, value: str) -> Path:
        """Relative paths are taken against data_root (or $MKWS_DATA_ROOT)."""
        p = Path(value)
        root = self.data_root or os.environ.get(DATA_ROOT_ENV, "")
        return p if p.is_absolute() or not root else Path(root) / p


_NESTED = {
    "frontend": FrontendConfig,
    "augment": AugmentConfig,
    "embedding": EmbeddingNetSpec,
    "training": TrainingConfig,
    "finetune": FineTuneConfig,
    "eval": EvalConfig,
    "bank": BankConfig,
    "streaming": StreamingConfig,
    "stream": StreamBuildConfig,
    "synthetic": SyntheticConfig,
    "words": WordRoles,
    "paths": Paths,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    embedding: EmbeddingNetSpec = field(default_factory=EmbeddingNetSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    streaming: StreamingConfig = field(default_factory=StreamingConfig)
    stream: StreamBuildConfig = field(default_factory=StreamBuildConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    words: WordRoles = field(default_factory=WordRoles)
    paths: Paths = field(default_factory=Paths)

    def training_config(self) -> TrainingConfig:
        """Training settings with the experiment seed and augmentation applied."""
        return dataclasses.replace(self.training, seed=self.seed, augment=self.augment)

    def finetune_config(self, offset: int = 0) -> FineTuneConfig:
        return dataclasses.replace(self.finetune, seed=self.seed + offset, augment=self.augment)

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for name in _NESTED:
            value = getattr(self, name)
            d[name] = value.to_dict() if hasattr(value, "to_dict") else asdict(value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(_NESTED) - {"seed"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {"seed": int(d.get("seed", 0))}
        for name, typ in _NESTED.items():
            if name not in d:
                continue
            section = dict(d[name])
            if name == "embedding":
                kwargs[name] = EmbeddingNetSpec.from_dict(section)
                continue
            if "augment" in section and isinstance(section["augment"], dict):
                section["augment"] = AugmentConfig(**section["augment"])
            for k, v in section.items():
                if isinstance(v, list):
                    section[k] = tuple(v)
            kwargs[name] = typ(**section)
        return cls(**kwargs)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunRecord:
    command: str
    config_hash: str
    input_hashes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_time_s: float = 0.0
    version: str = __version__
    finished_at: float = 0.0

    @classmethod
    def create(cls, command: str, config: ExperimentConfig, inputs: Sequence[str | Path] = ()) -> "RunRecord":
        hashes = {}
        for p in inputs:
            p = Path(p)
            if p.is_file():
                hashes[str(p)] = file_hash(p)
        return cls(command, config.config_hash(), hashes)


def append_run_record(log_path: str | Path, record: RunRecord) -> None:
    """Append one JSON line under an exclusive advisory lock."""
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    record.finished_at = time.time()
    line = json.dumps(asdict(record), sort_keys=True) + "\n"
    with open(log_path, "a") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            f.write(line)
            f.flush()
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def read_run_log(log_path: str | Path) -> list[dict]:
    path = Path(log_path)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
