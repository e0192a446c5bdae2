"""Streaming evaluation: synthetic test streams, a sliding-window detector, scoring.

The detector slides a 1 s window over the stream, takes the few-shot model's
target probability for each window, averages it over a short trailing
window, and fires when the smoothed score crosses the threshold from below
and no detection was emitted within the suppression window. Detections are
then greedily matched to ground-truth occurrences within a time tolerance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mkws.audio import AudioBuffer, load_audio, log_mel_frames, num_stream_windows, save_audio
from mkws.augment import noise_crop
from mkws.dataset import AlignmentRecord
from mkws.errors import ShapeError

REGIMES = ("wakeword", "sentence")
TIME_REFERENCES = ("start", "end")


@dataclass(frozen=True)
class StreamingConfig:
    stride_s: float = 0.020
    smoothing_s: float = 0.100
    threshold: float = 0.8
    suppression_s: float = 0.500
    tolerance_s: float = 0.750
    window_s: float = 1.0
    # which end of the detecting window is compared against ground truth onsets
    time_reference: str = "start"

    def __post_init__(self):
        for name in ("stride_s", "smoothing_s", "suppression_s", "tolerance_s", "window_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.tolerance_s < self.stride_s:
            raise ValueError("tolerance must be at least one stride")
        if self.time_reference not in TIME_REFERENCES:
            raise ValueError(f"time_reference must be one of {TIME_REFERENCES}")

    @property
    def smoothing_frames(self) -> int:
        return max(1, int(round(self.smoothing_s / self.stride_s)))

    @property
    def suppression_frames(self) -> int:
        return int(round(self.suppression_s / self.stride_s))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StreamSpec:
    regime: str = "wakeword"
    target_word: str = ""
    gap_min_s: float = 1.0
    gap_max_s: float = 3.0
    noise_gain_max: float = 0.5
    duration_target_s: float | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if not (0 <= self.gap_min_s <= self.gap_max_s):
            raise ValueError("need 0 <= gap_min_s <= gap_max_s")
        if self.duration_target_s is not None and self.duration_target_s <= 0:
            raise ValueError("duration_target_s must be positive")


@dataclass(frozen=True)
class TimelineEntry:
    word: str
    time_s: float
    is_target: bool = True


@dataclass
class GroundTruthTimeline:
    entries: list[TimelineEntry]
    duration_s: float
    target_word: str = ""

    def __post_init__(self):
        times = [e.time_s for e in self.entries]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("timeline times must be ascending")
        if times and (times[0] < 0 or times[-1] > self.duration_s):
            raise ValueError("timeline times must lie within the stream")

    def target_times(self) -> np.ndarray:
        return np.array([e.time_s for e in self.entries if e.is_target], dtype=np.float64)

    @property
    def num_targets(self) -> int:
        return sum(e.is_target for e in self.entries)

    @property
    def num_nontargets(self) -> int:
        return sum(not e.is_target for e in self.entries)

    def to_json(self) -> dict:
        return {"duration_s": self.duration_s, "target_word": self.target_word,
                "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruthTimeline":
        return cls([TimelineEntry(**e) for e in d["entries"]], float(d["duration_s"]), d.get("target_word", ""))


@dataclass(frozen=True)
class Detection:
    word: str
    trigger_time_s: float  # end of the window that fired
    score: float
    window_start_s: float

    def time(self, reference: str = "start") -> float:
        return self.window_start_s if reference == "start" else self.trigger_time_s


# -- stream construction ------------------------------------------------------


def build_wakeword_stream(
    targets: Sequence[AudioBuffer],
    nontargets: Sequence[tuple[str, AudioBuffer]],
    noise: Sequence[AudioBuffer],
    spec: StreamSpec,
    seed: int = 0,
    gaps_s: Sequence[float] | None = None,
) -> tuple[AudioBuffer, GroundTruthTimeline]:
    """Shuffle target and non-target clips together, each preceded by a noise-filled gap.

    Gap lengths are drawn from U[gap_min_s, gap_max_s] unless ``gaps_s`` fixes
    them (one per clip). The timeline holds each clip's onset.
    """
    if not targets:
        raise ValueError("need at least one target clip")
    if not noise:
        raise ValueError("need background noise to fill gaps")
    sr = targets[0].sample_rate
    items = [(spec.target_word, b, True) for b in targets] + [(w, b, False) for w, b in nontargets]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    if gaps_s is not None and len(gaps_s) != len(items):
        raise ValueError("gaps_s needs one gap per clip")

    pieces, entries, cursor = [], [], 0
    for n, k in enumerate(order):
        word, buf, is_target = items[k]
        if buf.sample_rate != sr:
            raise ValueError("all clips must share one sample rate")
        gap_s = gaps_s[n] if gaps_s is not None else rng.uniform(spec.gap_min_s, spec.gap_max_s)
        gap_len = int(round(gap_s * sr))
        if gap_len:
            bg = noise[int(rng.integers(0, len(noise)))]
            gain = rng.uniform(0.0, spec.noise_gain_max)
            pieces.append((gain * noise_crop(bg, gap_len, rng)).astype(np.float32))
        cursor += gap_len
        entries.append(TimelineEntry(word, cursor / sr, is_target))
        pieces.append(buf.samples)
        cursor += len(buf)
    stream = AudioBuffer(np.clip(np.concatenate(pieces), -1.0, 1.0), sr)
    return stream, GroundTruthTimeline(entries, stream.duration_s, spec.target_word)


def build_sentence_stream(
    sentences: Sequence[tuple[AudioBuffer, Sequence[AlignmentRecord]]],
    target: str,
    duration_target_s: float | None = None,
    seed: int | None = None,
) -> tuple[AudioBuffer, GroundTruthTimeline]:
    """Concatenate annotated sentences; the timeline lists every aligned word.

    Sentences are used in the given order (shuffled first when ``seed`` is
    given) until ``duration_target_s`` is reached.
    """
    if not any(r.word == target for _, recs in sentences for r in recs):
        raise ValueError(f"no sentence contains the target {target!r}")
    order = np.arange(len(sentences))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(sentences))
    sr = sentences[0][0].sample_rate
    pieces, entries, cursor = [], [], 0
    for k in order:
        buf, recs = sentences[k]
        for r in sorted(recs, key=lambda r: r.start_s):
            entries.append(TimelineEntry(r.word, cursor / sr + r.start_s, r.word == target))
        pieces.append(buf.samples)
        cursor += len(buf)
        if duration_target_s is not None and cursor / sr >= duration_target_s:
            break
    stream = AudioBuffer(np.concatenate(pieces), sr)
    entries.sort(key=lambda e: e.time_s)
    return stream, GroundTruthTimeline(entries, stream.duration_s, target)


def save_stream(buffer: AudioBuffer, timeline: GroundTruthTimeline, wav_path: str | Path) -> Path:
    """Write the stream WAV and a JSON timeline sidecar next to it."""
    wav_path = Path(wav_path)
    save_audio(buffer, wav_path)
    sidecar = wav_path.with_suffix(".json")
    sidecar.write_text(json.dumps(timeline.to_json(), indent=2, sort_keys=True) + "\n")
    return sidecar


def load_stream(wav_path: str | Path) -> tuple[AudioBuffer, GroundTruthTimeline]:
    wav_path = Path(wav_path)
    timeline = GroundTruthTimeline.from_json(json.loads(wav_path.with_suffix(".json").read_text()))
    return load_audio(wav_path), timeline


# -- scoring and detection ----------------------------------------------------


def stream_spectrograms(stream: AudioBuffer, frontend, cfg: StreamingConfig):
    """Yield (first_window_index, spectrogram batch) chunks covering every window."""
    sr = stream.sample_rate
    win = int(round(cfg.window_s * sr))
    hop = int(round(cfg.stride_s * sr))
    count = num_stream_windows(len(stream), win, hop)
    if count == 0:
        raise ShapeError(f"stream of {stream.duration_s:.3f} s is shorter than one window")
    t = frontend.num_frames(win)
    if hop % frontend.hop_len == 0:
        # every window's frames are a contiguous slice of the stream's frames
        frames = log_mel_frames(stream.samples, frontend)
        step = hop // frontend.hop_len
        view = np.lib.stride_tricks.sliding_window_view(frames, t, axis=0)[::step]
        view = view[:count].transpose(0, 2, 1)
        for i in range(0, count, 512):
            yield i, np.ascontiguousarray(view[i : i + 512])
    else:
        windows = np.lib.stride_tricks.sliding_window_view(stream.samples, win)[::hop][:count]
        for i in range(0, count, 512):
            yield i, log_mel_frames(windows[i : i + 512], frontend)


def stream_scores(model, stream: AudioBuffer, cfg: StreamingConfig) -> np.ndarray:
    """Target probability for each window start k * stride."""
    out = [model.scores_from_specs(batch)[:, 0] for _, batch in
           stream_spectrograms(stream, model.embedding.frontend, cfg)]
    return np.concatenate(out)


def smooth_scores(scores: np.ndarray, frames: int) -> np.ndarray:
    """Trailing mean over ``frames`` values including the current one (fewer at the start)."""
    scores = np.asarray(scores, dtype=np.float64)
    if frames <= 1 or scores.size == 0:
        return scores.copy()
    c = np.concatenate([[0.0], np.cumsum(scores)])
    idx = np.arange(1, scores.size + 1)
    lo = np.maximum(idx - frames, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def trigger_indices(smoothed: np.ndarray, threshold: float, suppression_frames: int) -> list[int]:
    """Frames where the smoothed score rises to >= threshold from below and the
    last trigger is at least ``suppression_frames`` frames back.

    The first frame counts as a rise when it is already at threshold. A rise
    swallowed by suppression is not retried while the score stays high.
    """
    above = np.asarray(smoothed, dtype=np.float64) >= threshold
    rising = above.copy()
    rising[1:] &= ~above[:-1]
    out: list[int] = []
    last = None
    for k in np.flatnonzero(rising):
        if last is None or k - last >= suppression_frames:
            out.append(int(k))
            last = k
    return out


def detect_from_scores(scores: np.ndarray, cfg: StreamingConfig, word: str = "",
                       threshold: float | None = None, smoothed: np.ndarray | None = None) -> list[Detection]:
    thr = cfg.threshold if threshold is None else threshold
    if smoothed is None:
        smoothed = smooth_scores(scores, cfg.smoothing_frames)
    dets = []
    for k in trigger_indices(smoothed, thr, cfg.suppression_frames):
        start = k * cfg.stride_s
        dets.append(Detection(word, start + cfg.window_s, float(np.clip(smoothed[k], 0.0, 1.0)), start))
    return dets


def run_detector(model, stream: AudioBuffer, cfg: StreamingConfig) -> list[Detection]:
    return detect_from_scores(stream_scores(model, stream, cfg), cfg, model.word)


# -- matching and reports -----------------------------------------------------


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (detection index, truth index)
    true_positives: int
    false_accepts: int
    false_rejects: int


def match_detections(det_times: Sequence[float], truth_times: Sequence[float], tolerance_s: float) -> MatchResult:
    """Greedy chronological matching: each detection takes the earliest unmatched
    truth within +/- tolerance; leftovers are false accepts / false rejects."""
    det = np.asarray(det_times, dtype=np.float64)
    truth = np.asarray(truth_times, dtype=np.float64)
    used = np.zeros(truth.size, dtype=bool)
    pairs = []
    for i in np.argsort(det, kind="stable"):
        ok = np.flatnonzero(~used & (np.abs(truth - det[i]) <= tolerance_s + 1e-9))
        if ok.size:
            j = int(ok[np.argmin(truth[ok])])
            used[j] = True
            pairs.append((int(i), j))
    tp = len(pairs)
    return MatchResult(pairs, tp, int(det.size - tp), int(truth.size - tp))


@dataclass
class StreamingReport:
    regime: str
    word: str
    duration_s: float
    num_targets: int
    num_nontargets: int
    rows: list[dict] = field(default_factory=list)
    matches: dict = field(default_factory=dict)  # threshold -> list of (det_time, truth_time)

    def row(self, threshold: float) -> dict:
        for r in self.rows:
            if abs(r["threshold"] - threshold) < 1e-9:
                return r
        raise KeyError(threshold)

    def to_dict(self) -> dict:
        return {"regime": self.regime, "word": self.word, "duration_s": self.duration_s,
                "num_targets": self.num_targets, "num_nontargets": self.num_nontargets, "rows": self.rows}

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["threshold", "tp", "fa", "fr", "tpr", "far", "far_per_hour", "far_per_word"])
            for r in self.rows:
                w.writerow([f"{r['threshold']:.4f}", r["tp"], r["fa"], r["fr"], f"{r['tpr']:.6f}",
                            f"{r['far']:.6f}", f"{r['far_per_hour']:.6f}", f"{r['far_per_word']:.6f}"])
        if json_path:
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def report_row(threshold: float, m: MatchResult, regime: str, duration_s: float, num_nontargets: int) -> dict:
    n_truth = m.true_positives + m.false_rejects
    per_hour = m.false_accepts / (duration_s / 3600.0) if duration_s > 0 else 0.0
    per_word = m.false_accepts / num_nontargets if num_nontargets else 0.0
    return {
        "threshold": float(threshold),
        "tp": m.true_positives,
        "fa": m.false_accepts,
        "fr": m.false_rejects,
        "tpr": m.true_positives / n_truth if n_truth else 0.0,
        "far": per_word if regime == "wakeword" else per_hour,
        "far_per_hour": per_hour,
        "far_per_word": per_word,
    }


def sweep_from_scores(scores: np.ndarray, truth: GroundTruthTimeline, thresholds: Sequence[float],
                      cfg: StreamingConfig, regime: str = "wakeword", word: str = "") -> StreamingReport:
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    smoothed = smooth_scores(scores, cfg.smoothing_frames)
    truth_times = truth.target_times()
    report = StreamingReport(regime, word or truth.target_word, truth.duration_s, truth.num_targets,
                             truth.num_nontargets)
    for thr in thresholds:
        dets = detect_from_scores(scores, cfg, word, thr, smoothed)
        times = [d.time(cfg.time_reference) for d in dets]
        m = match_detections(times, truth_times, cfg.tolerance_s)
        report.rows.append(report_row(thr, m, regime, truth.duration_s, truth.num_nontargets))
        report.matches[float(thr)] = [(times[i], float(truth_times[j])) for i, j in m.pairs]
    return report


def threshold_sweep(model, stream: AudioBuffer, truth: GroundTruthTimeline, thresholds: Sequence[float],
                    cfg: StreamingConfig, regime: str = "wakeword") -> StreamingReport:
    """Score the stream once, then detect and match at every threshold."""
    return sweep_from_scores(stream_scores(model, stream, cfg), truth, thresholds, cfg, regime, model.word)
