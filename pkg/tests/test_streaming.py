import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkws.audio import AudioBuffer
from mkws.dataset import AlignmentRecord
from mkws.streaming import (
    GroundTruthTimeline,
    StreamingConfig,
    StreamSpec,
    TimelineEntry,
    build_sentence_stream,
    build_wakeword_stream,
    detect_from_scores,
    load_stream,
    match_detections,
    report_row,
    save_stream,
    smooth_scores,
    sweep_from_scores,
    trigger_indices,
)

SR = 16000


def tone(freq, seconds=1.0, amp=0.3):
    t = np.arange(int(seconds * SR)) / SR
    return AudioBuffer((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32), SR)


def noise(seconds=3.0, seed=0):
    return AudioBuffer(np.random.default_rng(seed).normal(0, 0.1, int(seconds * SR)).astype(np.float32), SR)


# -- stream builders ----------------------------------------------------------


def test_wakeword_timeline_with_fixed_gaps():
    targets = [tone(300), tone(400)]
    others = [("b", tone(500)), ("c", tone(600))]
    stream, tl = build_wakeword_stream(targets, others, [noise()], StreamSpec(target_word="a"), seed=1,
                                       gaps_s=[2.0] * 4)
    assert [e.time_s for e in tl.entries] == [2.0, 5.0, 8.0, 11.0]
    assert stream.duration_s == 12.0 and tl.duration_s == 12.0
    assert tl.num_targets == 2 and tl.num_nontargets == 2
    assert sorted(e.word for e in tl.entries) == ["a", "a", "b", "c"]


def test_wakeword_reslicing_recovers_clips():
    clips = {f"w{i}": tone(200 + 50 * i, amp=0.2) for i in range(6)}
    stream, tl = build_wakeword_stream([clips["w0"], clips["w1"]], [(k, clips[k]) for k in list(clips)[2:]],
                                       [noise(2.0)], StreamSpec(target_word="t"), seed=3)
    recovered = []
    for e in tl.entries:
        start = int(round(e.time_s * SR))
        piece = stream.samples[start : start + SR]
        matches = [k for k, c in clips.items() if np.array_equal(piece, c.samples)]
        assert len(matches) == 1
        recovered.append(matches[0])
        assert (matches[0] in ("w0", "w1")) == e.is_target
    assert sorted(recovered) == sorted(clips)
    gaps = np.diff([0.0] + [e.time_s for e in tl.entries]) - np.r_[0.0, np.ones(len(tl.entries) - 1)]
    assert np.all((gaps >= 1.0 - 1e-9) & (gaps <= 3.0 + 1e-9))


def test_wakeword_duration_scale():
    clip = tone(300, amp=0.1)
    stream, tl = build_wakeword_stream([clip] * 100, [("x", clip)] * 100, [noise()], StreamSpec(target_word="t"),
                                       seed=0)
    assert abs(stream.duration_s - 600) / 600 < 0.1
    assert len(tl.entries) == 200


def test_wakeword_deterministic_and_validates():
    args = ([tone(300)], [("x", tone(400))], [noise()], StreamSpec(target_word="t"))
    a, b = build_wakeword_stream(*args, seed=5), build_wakeword_stream(*args, seed=5)
    assert np.array_equal(a[0].samples, b[0].samples) and a[1] == b[1]
    with pytest.raises(ValueError):
        build_wakeword_stream([], [], [noise()], StreamSpec())
    with pytest.raises(ValueError):
        build_wakeword_stream([tone(300)], [], [], StreamSpec())
    with pytest.raises(ValueError):
        StreamSpec(gap_min_s=3, gap_max_s=1)


def test_sentence_stream_offsets():
    s1 = (AudioBuffer(np.zeros(3 * SR, np.float32), SR), [AlignmentRecord("c1", "go", 1.0, 1.5),
                                                         AlignmentRecord("c1", "up", 2.0, 2.4)])
    s2 = (AudioBuffer(np.zeros(4 * SR, np.float32), SR), [AlignmentRecord("c2", "go", 1.0, 1.5)])
    stream, tl = build_sentence_stream([s1, s2], "go")
    assert tl.target_times().tolist() == [1.0, 4.0]
    assert stream.duration_s == 7.0 and tl.num_nontargets == 1
    with pytest.raises(ValueError):
        build_sentence_stream([s1], "absent")


def test_sentence_stream_matches_alignment_oracle(tiny_corpus):
    from mkws.audio import load_audio
    from mkws.dataset import parse_alignments

    corpus, _ = tiny_corpus
    c = corpus.corpora[0]
    recs = parse_alignments(c["alignments"]).records
    by_clip = {}
    for r in recs:
        by_clip.setdefault(r.clip_id, []).append(r)
    ids = sorted(by_clip)[:6]
    sentences = [(load_audio(f"{c['audio_root']}/{i}.wav"), by_clip[i]) for i in ids]
    target = by_clip[ids[0]][0].word
    stream, tl = build_sentence_stream(sentences, target)
    expected, offset = [], 0.0
    for buf, rs in sentences:
        expected += [offset + r.start_s for r in rs if r.word == target]
        offset += buf.duration_s
    assert tl.target_times() == pytest.approx(sorted(expected), abs=1e-9)
    assert stream.duration_s == pytest.approx(offset)


def test_stream_save_load(tmp_path):
    stream, tl = build_wakeword_stream([tone(300)], [("x", tone(400))], [noise()], StreamSpec(target_word="t"))
    sidecar = save_stream(stream, tl, tmp_path / "s.wav")
    assert json.loads(sidecar.read_text())["entries"][0].keys() == {"word", "time_s", "is_target"}
    buf, back = load_stream(tmp_path / "s.wav")
    assert back == tl and len(buf) == len(stream)


def test_timeline_validation():
    with pytest.raises(ValueError):
        GroundTruthTimeline([TimelineEntry("a", 2.0), TimelineEntry("a", 1.0)], 5.0)
    with pytest.raises(ValueError):
        GroundTruthTimeline([TimelineEntry("a", 6.0)], 5.0)


# -- detector -----------------------------------------------------------------


def test_single_detection_at_first_frame_above():
    cfg = StreamingConfig(smoothing_s=0.02)
    dets = detect_from_scores(np.array([0, 0, 0.9, 0.9, 0]), cfg, threshold=0.8)
    assert len(dets) == 1 and dets[0].window_start_s == pytest.approx(0.04)
    assert dets[0].trigger_time_s == pytest.approx(1.04)


def test_suppression_merges_close_bursts():
    cfg = StreamingConfig(smoothing_s=0.02)
    s = np.zeros(100)
    s[10:12] = 0.95
    s[25:27] = 0.95  # 0.3 s later
    assert len(detect_from_scores(s, cfg)) == 1
    s[60:62] = 0.95  # 1.0 s after the first burst
    assert len(detect_from_scores(s, cfg)) == 2


def test_threshold_zero_fires_once():
    # every frame is at threshold, so the only rise is the first frame
    cfg = StreamingConfig()
    assert trigger_indices(np.zeros(101), 0.0, cfg.suppression_frames) == [0]
    assert trigger_indices(np.linspace(0, 1, 101), 0.0, cfg.suppression_frames) == [0]


def test_plateau_fires_once_and_dip_refires():
    s = np.zeros(100)
    s[10:80] = 0.9
    assert trigger_indices(s, 0.8, 25) == [10]
    s[50] = 0.7
    assert trigger_indices(s, 0.8, 25) == [10, 51]
    s[30] = 0.7  # rise at 31 is suppressed and not retried
    assert trigger_indices(s, 0.8, 25) == [10, 51]


def naive_smooth(scores, frames):
    return np.array([np.mean(scores[max(0, k - frames + 1) : k + 1]) for k in range(len(scores))])


def oracle_triggers(smoothed, thr, sup):
    """Frame-by-frame state machine: armed below threshold, refractory countdown after a fire."""
    out, countdown, was_above = [], 0, False
    for k, v in enumerate(smoothed):
        above = v >= thr
        if countdown == 0 and above and not was_above:
            out.append(k)
            countdown = sup
        if countdown:
            countdown -= 1
        was_above = above
    return out


def random_trace(rng, n_frames=300, max_events=10):
    s = rng.uniform(0, 0.3, n_frames)
    for _ in range(int(rng.integers(0, max_events + 1))):
        k, width = int(rng.integers(0, n_frames)), int(rng.integers(1, 30))
        s[k : k + width] = rng.uniform(0.5, 1.0)
    return s


def test_trigger_and_smoothing_match_oracle_on_random_traces():
    rng = np.random.default_rng(7)
    cfg = StreamingConfig()
    for _ in range(1000):
        s = random_trace(rng)
        sm = smooth_scores(s, cfg.smoothing_frames)
        np.testing.assert_allclose(sm, naive_smooth(s, cfg.smoothing_frames), atol=1e-12)
        thr = float(rng.uniform(0.3, 0.95))
        assert trigger_indices(sm, thr, cfg.suppression_frames) == oracle_triggers(sm, thr, cfg.suppression_frames)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=200), st.floats(0, 1), st.integers(1, 40))
def test_detections_increasing_and_separated(scores, thr, sup):
    idx = trigger_indices(np.array(scores), thr, sup)
    assert all(b - a >= sup for a, b in zip(idx, idx[1:]))


def test_detection_count_can_grow_with_threshold():
    # one long excursion above 0.4 holds two separate rises through 0.8
    s = np.array([0.9, 0.5, 0.9])
    assert len(trigger_indices(s, 0.4, 1)) == 1
    assert len(trigger_indices(s, 0.8, 1)) == 2


def test_true_positives_can_grow_with_threshold():
    # a sub-threshold-at-0.8 bump suppresses the later on-time peak at 0.4
    cfg = StreamingConfig(stride_s=0.1, smoothing_s=0.1, suppression_s=0.5)
    s = np.zeros(120)
    s[96], s[100] = 0.5, 0.9
    truth = GroundTruthTimeline([TimelineEntry("t", 10.5)], 13.0, "t")
    rep = sweep_from_scores(s, truth, [0.4, 0.8], cfg)
    assert (rep.row(0.4)["tp"], rep.row(0.4)["fa"]) == (0, 1)
    assert (rep.row(0.8)["tp"], rep.row(0.8)["fa"]) == (1, 0)


# -- matching -----------------------------------------------------------------


def test_match_examples():
    assert match_detections([10.2], [10.0], 0.75).true_positives == 1
    m = match_detections([9.9, 10.3], [10.0], 0.75)
    assert (m.true_positives, m.false_accepts, m.false_rejects) == (1, 1, 0)
    assert match_detections([10.76], [10.0], 0.75).true_positives == 0
    assert match_detections([10.75], [10.0], 0.75).true_positives == 1


def optimal_matching_size(det, truth, tol):
    """Exhaustive maximum bipartite matching by trying every assignment."""
    best = 0
    n = len(det)
    for k in range(min(n, len(truth)), 0, -1):
        for ds in itertools.combinations(range(n), k):
            for ts in itertools.permutations(range(len(truth)), k):
                if all(abs(det[d] - truth[t]) <= tol + 1e-9 for d, t in zip(ds, ts)):
                    return k
    return best


def test_greedy_matching_agrees_with_exhaustive_oracle():
    rng = np.random.default_rng(11)
    diverged = 0
    for _ in range(1000):
        det = sorted(rng.uniform(0, 8, int(rng.integers(0, 6))).tolist())
        truth = sorted(rng.uniform(0, 8, int(rng.integers(0, 6))).tolist())
        m = match_detections(det, truth, 0.75)
        opt = optimal_matching_size(det, truth, 0.75)
        assert m.true_positives <= opt
        assert m.true_positives + m.false_rejects == len(truth)
        assert m.true_positives + m.false_accepts == len(det)
        diverged += m.true_positives != opt
    assert diverged == 0


# -- sweeps and reports -------------------------------------------------------


def sweep_case(seed=0):
    rng = np.random.default_rng(seed)
    cfg = StreamingConfig()
    s = random_trace(rng, 1500, 10)
    truth_times = sorted(rng.uniform(0, 29, 6).tolist())
    tl = GroundTruthTimeline([TimelineEntry("t", t) for t in truth_times], 31.0, "t")
    return s, tl, cfg


def test_sweep_matches_standalone_runs():
    s, tl, cfg = sweep_case()
    ths = np.linspace(0, 1, 11)
    rep = sweep_from_scores(s, tl, ths, cfg)
    for t in ths:
        dets = detect_from_scores(s, cfg, threshold=t)
        m = match_detections([d.time("start") for d in dets], tl.target_times(), cfg.tolerance_s)
        row = rep.row(t)
        assert (row["tp"], row["fa"], row["fr"]) == (m.true_positives, m.false_accepts, m.false_rejects)
        assert row["tp"] + row["fr"] == tl.num_targets
    with pytest.raises(ValueError):
        sweep_from_scores(s, tl, [0.5, 0.1], cfg)


def test_sweep_endpoints():
    s, tl, cfg = sweep_case(1)
    rep = sweep_from_scores(s, tl, [0.0, 1.01], cfg)
    top = rep.row(1.01)
    assert (top["tp"], top["fa"], top["fr"]) == (0, 0, tl.num_targets)
    assert rep.row(0.0)["tp"] + rep.row(0.0)["fa"] == 1


def test_time_reference_end_shifts_by_window():
    s = np.zeros(200)
    s[50] = 1.0
    tl = GroundTruthTimeline([TimelineEntry("t", 1.0)], 5.0, "t")
    start = sweep_from_scores(s, tl, [0.1], StreamingConfig(smoothing_s=0.02)).row(0.1)
    end = sweep_from_scores(s, tl, [0.1], StreamingConfig(smoothing_s=0.02, time_reference="end")).row(0.1)
    assert start["tp"] == 1 and end["tp"] == 0


def test_report_rows_and_csv(tmp_path):
    m = match_detections([1.0, 5.0], [1.1, 9.0], 0.75)
    row = report_row(0.8, m, "wakeword", 3600.0, 4)
    assert row["far"] == row["far_per_word"] == 0.25 and row["far_per_hour"] == 1.0 and row["tpr"] == 0.5
    assert report_row(0.8, m, "sentence", 1800.0, 4)["far"] == 2.0
    s, tl, cfg = sweep_case()
    rep = sweep_from_scores(s, tl, [0.5, 0.8], cfg)
    rep.write(tmp_path / "r.csv", tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,tp,fa,fr,tpr,far,far_per_hour,far_per_word" and len(lines) == 3
    assert json.loads((tmp_path / "r.json").read_text())["num_targets"] == 6


def test_config_validation():
    with pytest.raises(ValueError):
        StreamingConfig(stride_s=0)
    with pytest.raises(ValueError):
        StreamingConfig(time_reference="middle")
    assert StreamingConfig().smoothing_frames == 5 and StreamingConfig().suppression_frames == 25
