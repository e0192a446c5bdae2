"""Procedural stand-in for a crowd-sourced keyword corpus.

Words are sequences of consonant-vowel syllables drawn from a small phone
inventory. Vowels, nasals and liquids are pulse trains shaped by formant
envelopes; fricatives and plosives are shaped noise. Each "speaker" has its
own pitch, vocal-tract scale, tempo and loudness, so words vary the way
recordings from different people do. Words are concatenated into short
"sentences" with room tone, and an alignment CSV is written for each, which
lets the regular extraction pipeline run unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mkws.audio import SAMPLE_RATE, AudioBuffer, save_audio
from mkws.dataset import AlignmentRecord, write_alignments

VOWELS = {
    "a": (730, 1090, 2440),
    "e": (530, 1840, 2480),
    "i": (270, 2290, 3010),
    "o": (570, 840, 2410),
    "u": (300, 870, 2240),
}
# kind, parameters, base duration (s)
CONSONANTS = {
    "k": ("plosive", (1800, 2600), 0.07),
    "t": ("plosive", (3500, 5500), 0.07),
    "p": ("plosive", (500, 1200), 0.07),
    "s": ("fricative", (4200, 7500), 0.12),
    "sh": ("fricative", (2000, 3800), 0.12),
    "f": ("fricative", (1200, 7000), 0.10),
    "m": ("nasal", (250, 1100, 2200), 0.08),
    "n": ("nasal", (250, 1700, 2600), 0.08),
    "l": ("liquid", (360, 1300, 2900), 0.07),
    "r": ("liquid", (450, 1150, 1600), 0.07),
}
SYLLABLES = [c + v for c in CONSONANTS for v in VOWELS]


@dataclass(frozen=True)
class Speaker:
    f0: float = 140.0
    formant_scale: float = 1.0
    tempo: float = 1.0
    amplitude: float = 0.6
    breathiness: float = 0.02

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Speaker":
        return cls(
            f0=float(rng.uniform(90, 250)),
            formant_scale=float(rng.uniform(0.95, 1.05)),
            tempo=float(rng.uniform(0.85, 1.15)),
            amplitude=float(rng.uniform(0.3, 0.8)),
            breathiness=float(rng.uniform(0.0, 0.05)),
        )


def split_syllables(word: str) -> list[str]:
    """Inverse of joining syllables into a word name (greedy, 'sh' first)."""
    out, i = [], 0
    while i < len(word):
        for c in sorted(CONSONANTS, key=len, reverse=True):
            if word.startswith(c, i) and i + len(c) < len(word) and word[i + len(c)] in VOWELS:
                out.append(word[i : i + len(c) + 1])
                i += len(c) + 1
                break
        else:
            raise ValueError(f"{word!r} is not a sequence of CV syllables")
    return out


def _envelope(freqs: np.ndarray, formants: Sequence[float], scale: float) -> np.ndarray:
    env = np.zeros_like(freqs)
    for k, f in enumerate(formants):
        f = f * scale
        bw = 60.0 + 0.08 * f
        env += (1.0 / (k + 1)) / (1.0 + ((freqs - f) / bw) ** 2)
    return env / (1.0 + freqs / 1500.0)


def _shape(source: np.ndarray, gain: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(source)
    return np.fft.irfft(spec * gain, n=len(source))


def _ramp(x: np.ndarray, sr: int, ms: float = 8.0) -> np.ndarray:
    n = min(int(sr * ms / 1000), len(x) // 2)
    if n > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(n) / n)
        x[:n] *= r
        x[-n:] *= r[::-1]
    return x


def _voiced(dur: float, formants, spk: Speaker, rng, sr: int, tremolo: float = 0.0) -> np.ndarray:
    n = max(int(dur * sr), 16)
    t = np.arange(n) / sr
    f0 = spk.f0 * (1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(2, 5) * t) - 0.05 * t / max(dur, 1e-3))
    phase = np.cumsum(f0 / sr)
    # band-limited sawtooth-like glottal source
    src = np.zeros(n)
    kmax = int(7500 / spk.f0)
    for k in range(1, kmax + 1):
        src += np.sin(2 * np.pi * k * phase) / k
    src += spk.breathiness * rng.standard_normal(n)
    freqs = np.fft.rfftfreq(n, 1 / sr)
    out = _shape(src, _envelope(freqs, formants, spk.formant_scale))
    if tremolo:
        out *= 0.6 + 0.4 * np.sin(2 * np.pi * tremolo * t) ** 2
    return out


def _noise_band(dur: float, band, spk: Speaker, rng, sr: int) -> np.ndarray:
    n = max(int(dur * sr), 16)
    freqs = np.fft.rfftfreq(n, 1 / sr)
    lo, hi = band[0] * spk.formant_scale, band[1] * spk.formant_scale
    gain = 1.0 / (1.0 + np.exp(-(freqs - lo) / 150.0)) / (1.0 + np.exp((freqs - hi) / 150.0))
    return _shape(rng.standard_normal(n), gain)


def _normalize(x: np.ndarray, level: float) -> np.ndarray:
    r = np.sqrt(np.mean(x * x))
    return x * (level / r) if r > 0 else x


def render_phone(phone: str, spk: Speaker, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    jitter = rng.uniform(0.9, 1.1) / spk.tempo
    if phone in VOWELS:
        return _ramp(_normalize(_voiced(0.14 * jitter, VOWELS[phone], spk, rng, sr), 1.0), sr)
    kind, params, base = CONSONANTS[phone]
    dur = base * jitter
    if kind == "fricative":
        return _ramp(_normalize(_noise_band(dur, params, spk, rng, sr), 0.35), sr, 15)
    if kind == "plosive":
        closure = np.zeros(int(0.6 * dur * sr))
        burst = _noise_band(0.4 * dur, params, spk, rng, sr)
        burst = _normalize(burst, 0.8) * np.exp(-np.arange(len(burst)) / (0.01 * sr))
        return np.concatenate([closure, _ramp(burst, sr, 1.0)])
    tremolo = 28.0 if phone == "r" else 0.0
    level = 0.45 if kind == "nasal" else 0.7
    return _ramp(_normalize(_voiced(dur, params, spk, rng, sr, tremolo), level), sr)


def render_word(word: str, spk: Speaker, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Synthesize ``word`` (a string of CV syllables) for one speaker."""
    parts = []
    for syl in split_syllables(word):
        c, v = syl[:-1], syl[-1]
        parts += [render_phone(c, spk, rng, sr), render_phone(v, spk, rng, sr)]
    x = np.concatenate(parts)
    x = x / max(np.max(np.abs(x)), 1e-9) * spk.amplitude
    return x.astype(np.float32)


def _syllable_distance(a: Sequence[str], b: Sequence[str]) -> int:
    d = np.arange(len(b) + 1)
    for i, sa in enumerate(a, 1):
        prev, d[0] = d.copy(), i
        for j, sb in enumerate(b, 1):
            d[j] = min(prev[j] + 1, d[j - 1] + 1, prev[j - 1] + (sa != sb))
    return int(d[-1])


def make_vocabulary(n_words: int, rng: np.random.Generator, min_distance: int = 2) -> list[str]:
    """Distinct 2-3 syllable words, pairwise at least ``min_distance`` syllable edits apart."""
    words: list[list[str]] = []
    attempts = 0
    while len(words) < n_words:
        attempts += 1
        if attempts > 100000:
            raise RuntimeError("could not build vocabulary; lower min_distance")
        cand = [SYLLABLES[i] for i in rng.integers(0, len(SYLLABLES), size=int(rng.integers(2, 4)))]
        if all(_syllable_distance(cand, w) >= min_distance for w in words):
            words.append(cand)
    return ["".join(w) for w in words]


def pink_noise(n: int, rng: np.random.Generator, exponent: float = 1.0) -> np.ndarray:
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1]
    spec = (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size)) / freqs ** (exponent / 2)
    x = np.fft.irfft(spec, n=n)
    return x / np.max(np.abs(x))


def make_noise_bank(rng: np.random.Generator, seconds: float = 6.0, sr: int = SAMPLE_RATE) -> dict[str, np.ndarray]:
    n = int(seconds * sr)
    t = np.arange(n) / sr
    hum = sum(np.sin(2 * np.pi * 50 * k * t + rng.uniform(0, 6.3)) / k for k in range(1, 6))
    water = _shape(rng.standard_normal(n), np.ones(n // 2 + 1)) * (0.5 + 0.5 * np.abs(np.sin(2 * np.pi * 0.7 * t)))
    bank = {
        "pink": pink_noise(n, rng, 1.0),
        "brown": pink_noise(n, rng, 2.0),
        "white": rng.uniform(-1, 1, n),
        "hum": hum / np.max(np.abs(hum)) + 0.1 * pink_noise(n, rng),
        "water": water / np.max(np.abs(water)),
    }
    return {k: (0.5 * v).astype(np.float32) for k, v in bank.items()}


@dataclass
class SyntheticCorpus:
    root: str
    roles: dict  # role -> list of words
    languages: dict  # word -> language code
    corpora: list = field(default_factory=list)  # [{language, alignments, audio_root}]
    noise_dir: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, root: str | Path) -> "SyntheticCorpus":
        return cls(**json.loads((Path(root) / "corpus.json").read_text()))


def generate_corpus(
    out_dir: str | Path,
    seed: int = 0,
    n_embedding: int = 8,
    n_heldout: int = 2,
    n_bank: int = 6,
    n_novel: int = 4,
    samples_per_word: int = 200,
    words_per_sentence: int = 3,
    languages: Sequence[str] = ("xa", "xb"),
    num_speakers: int = 80,
    min_word_distance: int = 3,
) -> SyntheticCorpus:
    """Write a synthetic corpus (clips, alignments, noise, roles) under ``out_dir``.

    Every word occurs exactly ``samples_per_word`` times. Word roles:
    ``embedding`` (trains the embedding model), ``heldout`` (few-shot targets),
    ``bank`` (unknown-bank only) and ``novel`` (evaluation negatives only).
    """
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    counts = {"embedding": n_embedding, "heldout": n_heldout, "bank": n_bank, "novel": n_novel}
    vocab = make_vocabulary(sum(counts.values()), rng, min_word_distance)
    roles, k = {}, 0
    for role, c in counts.items():
        roles[role] = vocab[k : k + c]
        k += c
    lang_of = {w: languages[i % len(languages)] for i, w in enumerate(vocab)}
    speakers = [Speaker.random(rng) for _ in range(num_speakers)]

    noise_dir = out / "noise"
    for name, x in make_noise_bank(rng).items():
        save_audio(AudioBuffer(x), noise_dir / f"{name}.wav")

    corpora = []
    for lang in languages:
        words = [w for w in vocab if lang_of[w] == lang]
        occurrences = [w for w in words for _ in range(samples_per_word)]
        rng.shuffle(occurrences)
        clip_dir = out / lang / "clips"
        records = []
        for s in range(0, len(occurrences), words_per_sentence):
            clip_id = f"{lang}_{s // words_per_sentence:05d}"
            spk = speakers[int(rng.integers(0, len(speakers)))]
            pieces = [np.zeros(int(rng.uniform(0.2, 0.5) * SAMPLE_RATE), np.float32)]
            cursor = len(pieces[0])
            for w in occurrences[s : s + words_per_sentence]:
                audio = render_word(w, spk, rng)
                records.append(AlignmentRecord(clip_id, w, cursor / SAMPLE_RATE, (cursor + len(audio)) / SAMPLE_RATE))
                gap = np.zeros(int(rng.uniform(0.1, 0.35) * SAMPLE_RATE), np.float32)
                pieces += [audio, gap]
                cursor += len(audio) + len(gap)
            pieces.append(np.zeros(int(rng.uniform(0.2, 0.5) * SAMPLE_RATE), np.float32))
            clip = np.concatenate(pieces)
            clip += (rng.uniform(0.002, 0.006) * pink_noise(len(clip), rng)).astype(np.float32)
            save_audio(AudioBuffer(np.clip(clip, -1, 1)), clip_dir / f"{clip_id}.wav")
        align_path = out / lang / "alignments.csv"
        write_alignments(records, align_path)
        corpora.append({"language": lang, "alignments": str(align_path), "audio_root": str(clip_dir)})

    corpus = SyntheticCorpus(str(out), roles, lang_of, corpora, str(noise_dir))
    (out / "corpus.json").write_text(json.dumps(corpus.to_dict(), indent=2, sort_keys=True) + "\n")
    return corpus
