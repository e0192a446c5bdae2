"""Keyword extraction from word alignments, manifests, splits and the unknown bank."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from mkws.audio import AudioBuffer, load_audio, save_audio
from mkws.errors import AlignmentError, ExtractionError, InsufficientDataError, ManifestError

log = logging.getLogger(__name__)

PADDING_MODES = ("silence", "context")
SPLITS = ("train", "val", "test")
ALIGNMENT_HEADER = ("clip_id", "word", "start_s", "end_s")


@dataclass(frozen=True)
class AlignmentRecord:
    clip_id: str
    word: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.word:
            raise AlignmentError("empty word")
        if not self.clip_id:
            raise AlignmentError("empty clip_id")
        if not (0 <= self.start_s < self.end_s):
            raise AlignmentError(f"need 0 <= start < end, got [{self.start_s}, {self.end_s}]")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


class ParsedAlignments(NamedTuple):
    records: list[AlignmentRecord]
    errors: list[tuple[int, str]]  # (line number, reason)


def parse_alignments(path: str | Path) -> ParsedAlignments:
    """Read an alignment CSV (``clip_id,word,start_s,end_s``).

    Malformed rows are reported in ``errors`` rather than aborting the parse.
    """
    path = Path(path)
    records, errors = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ALIGNMENT_HEADER:
            raise AlignmentError(f"{path}: expected header {','.join(ALIGNMENT_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                errors.append((lineno, f"expected 4 fields, got {len(row)}"))
                continue
            clip_id, word, start, end = (c.strip() for c in row)
            try:
                rec = AlignmentRecord(clip_id, word.lower(), float(start), float(end))
            except (ValueError, AlignmentError) as exc:
                errors.append((lineno, str(exc)))
                continue
            records.append(rec)
    for lineno, reason in errors:
        log.warning("%s:%d: %s", path, lineno, reason)
    if not records:
        raise AlignmentError(f"{path}: no valid alignment rows")
    return ParsedAlignments(records, errors)


def write_alignments(records: Iterable[AlignmentRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ALIGNMENT_HEADER)
        for r in records:
            w.writerow([r.clip_id, r.word, f"{r.start_s:.4f}", f"{r.end_s:.4f}"])


def select_keywords(word_counts: Mapping[str, int], min_char_len: int = 3, top_k: int | None = None) -> list[str]:
    """Most frequent words of at least ``min_char_len`` characters, ties broken alphabetically."""
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")
    words = sorted((w for w in word_counts if len(w) >= min_char_len), key=lambda w: (-word_counts[w], w))
    return words if top_k is None else words[:top_k]


@dataclass(eq=False)
class KeywordExtraction:
    word: str
    language: str
    clip_id: str
    window_start_s: float
    window_end_s: float
    padding_mode: str
    audio: AudioBuffer
    word_start_s: float = 0.0
    word_end_s: float = 0.0
    # where the copied word audio sits inside the output clip (silence mode)
    offset_in_clip_s: float = 0.0
    flags: tuple[str, ...] = ()

    @property
    def relpath(self) -> str:
        return clip_relpath(self.language, self.word, self.clip_id, self.word_start_s, self.padding_mode)


def clip_relpath(language: str, word: str, clip_id: str, start_s: float, padding_mode: str) -> str:
    suffix = "" if padding_mode == "silence" else "_ctx"
    return f"{language}/{word}/{clip_id}_{int(round(start_s * 1000))}{suffix}.wav"


def extract_keyword_clip(
    source: AudioBuffer,
    rec: AlignmentRecord,
    mode: str = "silence",
    language: str = "unk",
    clip_s: float = 1.0,
) -> KeywordExtraction:
    """Cut one keyword occurrence into a fixed-length clip.

    ``silence``: the aligned span, centered in a zero buffer (center-cropped
    when longer than the clip). ``context``: the original audio window centered
    on the word midpoint, shifted inward at clip boundaries.
    """
    if mode not in PADDING_MODES:
        raise ValueError(f"padding mode must be one of {PADDING_MODES}, got {mode!r}")
    sr = source.sample_rate
    n = int(round(clip_s * sr))
    a = int(round(rec.start_s * sr))
    b = int(round(rec.end_s * sr))
    # one millisecond of slack for alignments rounded past the last sample
    if b > len(source) + sr // 1000:
        raise ExtractionError(
            f"{rec.clip_id}: span [{rec.start_s}, {rec.end_s}] s outside clip of {source.duration_s:.3f} s"
        )
    b = min(b, len(source))
    if b <= a:
        raise ExtractionError(f"{rec.clip_id}: empty span for '{rec.word}'")
    flags = []
    if b - a > n:
        flags.append("long_word")
    out = np.zeros(n, dtype=np.float32)
    if mode == "silence":
        if b - a > n:
            a += (b - a - n) // 2
            b = a + n
        offset = (n - (b - a)) // 2
        out[offset : offset + (b - a)] = source.samples[a:b]
        win = (a / sr, b / sr)
    else:
        offset = 0
        if len(source) < n:
            flags.append("short_source")
            out[: len(source)] = source.samples
            start = 0
        else:
            start = int(round((a + b) / 2 - n / 2))
            start = min(max(start, 0), len(source) - n)
            out[:] = source.samples[start : start + n]
        win = (start / sr, (start + n) / sr)
    return KeywordExtraction(
        word=rec.word,
        language=language,
        clip_id=rec.clip_id,
        window_start_s=win[0],
        window_end_s=win[1],
        padding_mode=mode,
        audio=AudioBuffer(out, sr),
        word_start_s=rec.start_s,
        word_end_s=rec.end_s,
        offset_in_clip_s=offset / sr,
        flags=tuple(flags),
    )


def find_clip_audio(audio_root: Path, clip_id: str) -> Path:
    candidate = audio_root / clip_id
    if candidate.suffix.lower() == ".wav" and candidate.is_file():
        return candidate
    return audio_root / f"{clip_id}.wav"


def extract_corpus(
    records: Sequence[AlignmentRecord],
    audio_root: str | Path,
    language: str,
    modes: Sequence[str] = ("silence",),
    keywords: Iterable[str] | None = None,
    out_dir: str | Path | None = None,
) -> list[KeywordExtraction]:
    """Extract every aligned occurrence of ``keywords`` (all words if None).

    Repeated occurrences of a word within one clip are all extracted. When
    ``out_dir`` is given each clip is written to its :func:`clip_relpath`.
    """
    audio_root = Path(audio_root)
    wanted = None if keywords is None else set(keywords)
    by_clip: dict[str, list[AlignmentRecord]] = defaultdict(list)
    for rec in records:
        if wanted is None or rec.word in wanted:
            by_clip[rec.clip_id].append(rec)
    out: list[KeywordExtraction] = []
    for clip_id in sorted(by_clip):
        source = load_audio(find_clip_audio(audio_root, clip_id))
        for rec in sorted(by_clip[clip_id], key=lambda r: (r.start_s, r.word)):
            for mode in modes:
                ex = extract_keyword_clip(source, rec, mode, language)
                if out_dir is not None:
                    save_audio(ex.audio, Path(out_dir) / ex.relpath)
                out.append(ex)
    return out


# -- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    word: str
    language: str
    split: str
    padding_mode: str = "silence"
    clip_id: str = ""
    flags: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "word": self.word,
            "language": self.language,
            "split": self.split,
            "padding_mode": self.padding_mode,
            "clip_id": self.clip_id,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        return cls(
            path=d["path"],
            word=d["word"],
            language=d["language"],
            split=d["split"],
            padding_mode=d.get("padding_mode", "silence"),
            clip_id=d.get("clip_id", ""),
            flags=tuple(d.get("flags", ())),
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path | None = None  # base directory for relative entry paths

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> dict[tuple[str, str], int]:
        return dict(Counter((e.word, e.split) for e in self.entries))

    def words(self) -> list[str]:
        return sorted({e.word for e in self.entries})

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def select(self, *, words=None, splits=None, padding_modes=None) -> list[ManifestEntry]:
        words = None if words is None else set(words)
        splits = None if splits is None else set(splits)
        modes = None if padding_modes is None else set(padding_modes)
        return [
            e
            for e in self.entries
            if (words is None or e.word in words)
            and (splits is None or e.split in splits)
            and (modes is None or e.padding_mode in modes)
        ]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self) -> None:
        seen: dict[str, str] = {}
        clip_split: dict[tuple[str, str], str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"unknown split {e.split!r} for {e.path}")
            if e.path in seen and seen[e.path] != e.split:
                raise ManifestError(f"{e.path} appears in both {seen[e.path]} and {e.split}")
            seen[e.path] = e.split
            key = (e.word, e.clip_id)
            if e.clip_id and clip_split.setdefault(key, e.split) != e.split:
                raise ManifestError(f"clip {e.clip_id} of '{e.word}' leaks across splits")

    def to_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            entries = [ManifestEntry.from_json(json.loads(line)) for line in fh if line.strip()]
        return cls(entries, root=path.parent)


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Integer (train, val, test) sizes for ``n`` items."""
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def _split_key(seed: int, word: str, clip_id: str) -> str:
    return hashlib.sha256(f"{seed}\x00{word}\x00{clip_id}".encode()).hexdigest()


def build_manifest(
    extractions: Sequence[KeywordExtraction],
    split_fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetManifest:
    """Stratified, hash-ordered train/val/test split at clip granularity.

    Within each word, clips are ordered by a seeded hash of their clip_id and
    assigned to train, then val, then test until each split's target count is
    met. All extractions sharing a (word, clip_id) land in the same split.
    """
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three values summing to 1, got {split_fractions}")
    by_word: dict[str, dict[str, list[KeywordExtraction]]] = defaultdict(lambda: defaultdict(list))
    for ex in extractions:
        by_word[ex.word][ex.clip_id].append(ex)

    entries: list[ManifestEntry] = []
    for word in sorted(by_word):
        groups = by_word[word]
        total = sum(len(g) for g in groups.values())
        order = sorted(groups, key=lambda c: _split_key(seed, word, c))
        if total < 3:
            warnings.warn(f"word '{word}' has {total} samples; assigning all to train", stacklevel=2)
            targets = (total, 0, 0)
        else:
            targets = split_counts(total, split_fractions)
        filled = [0, 0, 0]
        s = 0
        for clip_id in order:
            while s < 2 and filled[s] >= targets[s]:
                s += 1
            for ex in sorted(groups[clip_id], key=lambda e: (e.word_start_s, e.padding_mode)):
                entries.append(
                    ManifestEntry(ex.relpath, ex.word, ex.language, SPLITS[s], ex.padding_mode, ex.clip_id, ex.flags)
                )
            filled[s] += len(groups[clip_id])
    manifest = DatasetManifest(entries)
    manifest.validate()
    return manifest


def merge_manifests(manifests: Iterable[DatasetManifest]) -> DatasetManifest:
    entries = [e for m in manifests for e in m.entries]
    return DatasetManifest(entries)


# -- unknown bank -----------------------------------------------------------


@dataclass
class UnknownBank:
    entries: list[ManifestEntry]
    excluded_words: frozenset[str] = field(default_factory=frozenset)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def words(self) -> list[str]:
        return sorted({e.word for e in self.entries})

    def word_counts(self) -> Counter:
        return Counter(e.word for e in self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p


def build_unknown_bank(
    manifest: DatasetManifest,
    excluded_words: Iterable[str],
    size: int = 5000,
    seed: int = 0,
    max_word_fraction: float = 0.02,
    splits: Sequence[str] = ("train",),
    eligible_words: Iterable[str] | None = None,
) -> UnknownBank:
    """Seeded draw without replacement, at most ``max_word_fraction * size`` clips per word."""
    excluded = frozenset(excluded_words)
    allowed = None if eligible_words is None else set(eligible_words)
    pool = [
        e
        for e in manifest.entries
        if e.split in splits and e.word not in excluded and (allowed is None or e.word in allowed)
    ]
    cap = int(np.floor(max_word_fraction * size + 1e-9))
    per_word = Counter(e.word for e in pool)
    reachable = sum(min(c, cap) for c in per_word.values())
    if reachable < size:
        raise InsufficientDataError(
            f"unknown bank needs {size} samples but only {reachable} are eligible "
            f"({len(pool)} in pool, {len(per_word)} words, cap {cap}/word)"
        )
    rng = np.random.default_rng(seed)
    taken: Counter = Counter()
    chosen = []
    for i in rng.permutation(len(pool)):
        e = pool[i]
        if taken[e.word] < cap:
            taken[e.word] += 1
            chosen.append(e)
            if len(chosen) == size:
                break
    return UnknownBank(chosen, excluded, manifest.root)
