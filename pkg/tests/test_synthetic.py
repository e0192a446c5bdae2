from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import uniform_filter1d

from mkws.audio import FrontendConfig, load_audio, log_mel_frames
from mkws.dataset import parse_alignments
from mkws.synthetic import (
    SYLLABLES,
    Speaker,
    SyntheticCorpus,
    _syllable_distance,
    generate_corpus,
    make_noise_bank,
    make_vocabulary,
    render_word,
    split_syllables,
)


def test_split_syllables_round_trip():
    for w in ["kiko", "shushe", "rusomu", "mefapo"]:
        parts = split_syllables(w)
        assert "".join(parts) == w and all(p in SYLLABLES for p in parts)


def test_vocabulary_distance_and_determinism():
    a = make_vocabulary(20, np.random.default_rng(0), min_distance=3)
    assert a == make_vocabulary(20, np.random.default_rng(0), min_distance=3)
    assert len(set(a)) == 20
    sy = [split_syllables(w) for w in a]
    assert all(_syllable_distance(x, y) >= 3 for i, x in enumerate(sy) for y in sy[i + 1 :])
    assert all(2 <= len(x) <= 3 for x in sy)


def test_render_word_level_and_determinism():
    spk = Speaker(amplitude=0.5)
    x = render_word("kiko", spk, np.random.default_rng(0))
    assert np.array_equal(x, render_word("kiko", spk, np.random.default_rng(0)))
    assert np.max(np.abs(x)) == pytest.approx(0.5, rel=1e-4)
    assert 0.2 < len(x) / 16000 < 1.0


def test_noise_bank_levels():
    bank = make_noise_bank(np.random.default_rng(0), seconds=1.0)
    assert len(bank) >= 4
    for x in bank.values():
        assert len(x) == 16000 and 0.4 <= np.max(np.abs(x)) <= 0.6


def _feat(x, cfg=FrontendConfig()):
    m = log_mel_frames(np.concatenate([x, np.zeros(480, np.float32)]), cfg).astype(np.float64)
    m = uniform_filter1d(m, 5, axis=1)  # blur harmonics so pitch matters less than formants
    m = m - m.mean(0, keepdims=True)
    m = m - m.mean(1, keepdims=True)
    return m / np.linalg.norm(m, axis=1, keepdims=True).clip(1e-9)


def _dtw(a, b):
    cost = 1 - a @ b.T
    n, m = cost.shape
    d = np.full((n + 1, m + 1), np.inf)
    d[0, 0] = 0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = cost[i - 1, j - 1] + min(d[i - 1, j], d[i, j - 1], d[i - 1, j - 1])
    return d[n, m] / (n + m)


def test_words_separable_by_template_matching():
    """Nearest-template DTW on log-mel frames identifies every rendered word."""
    rng = np.random.default_rng(0)
    vocab = make_vocabulary(10, rng, min_distance=3)
    templates = [_feat(render_word(w, Speaker(), np.random.default_rng(1))) for w in vocab]
    correct = 0
    for i, w in enumerate(vocab):
        for _ in range(8):
            f = _feat(render_word(w, Speaker.random(rng), rng))
            correct += int(np.argmin([_dtw(f, t) for t in templates])) == i
    assert correct == 80


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    kwargs = dict(n_embedding=2, n_heldout=1, n_bank=1, n_novel=1, samples_per_word=6, num_speakers=4)
    return generate_corpus(root / "a", seed=3, **kwargs), generate_corpus(root / "b", seed=3, **kwargs)


def test_corpus_layout_and_roles(small_corpus):
    corpus, _ = small_corpus
    assert {k: len(v) for k, v in corpus.roles.items()} == {"embedding": 2, "heldout": 1, "bank": 1, "novel": 1}
    words = [w for v in corpus.roles.values() for w in v]
    assert len(set(words)) == 5 and set(corpus.languages) == set(words)
    assert SyntheticCorpus.load(corpus.root).roles == corpus.roles
    counts = {}
    for c in corpus.corpora:
        for r in parse_alignments(c["alignments"]).records:
            counts[r.word] = counts.get(r.word, 0) + 1
            assert corpus.languages[r.word] == c["language"]
    assert counts == {w: 6 for w in words}


def test_alignments_point_at_audio(small_corpus):
    corpus, _ = small_corpus
    c = corpus.corpora[0]
    for r in parse_alignments(c["alignments"]).records[:12]:
        buf = load_audio(f"{c['audio_root']}/{r.clip_id}.wav")
        assert r.end_s <= buf.duration_s
        inside = buf.samples[int(r.start_s * 16000) : int(r.end_s * 16000)]
        lead = buf.samples[: int(0.2 * 16000)]
        assert np.sqrt(np.mean(inside**2)) > 10 * np.sqrt(np.mean(lead**2))


def test_corpus_deterministic(small_corpus):
    a, b = small_corpus
    assert a.roles == b.roles
    for ca, cb in zip(a.corpora, b.corpora):
        assert Path(ca["alignments"]).read_text() == Path(cb["alignments"]).read_text()
        names = sorted(p.name for p in Path(ca["audio_root"]).glob("*.wav"))
        assert names == sorted(p.name for p in Path(cb["audio_root"]).glob("*.wav"))
        for name in names:
            assert (Path(ca["audio_root"]) / name).read_bytes() == (Path(cb["audio_root"]) / name).read_bytes()
