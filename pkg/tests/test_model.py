import dataclasses

import numpy as np
import pytest

from mkws import checkpoint, nn
from mkws.audio import FrontendConfig
from mkws.dataset import DatasetManifest, ManifestEntry
from mkws.errors import ChecksumError, ManifestError, ModelFormatError, ShapeError
from mkws.model import (
    BACKGROUND,
    EmbeddingNetSpec,
    TrainingConfig,
    accuracy_table,
    build_model,
    cross_dataset_eval,
    extract_features,
    inspect_model,
    load_model,
    save_model,
    train_embedding,
    validate,
)


def closed_form_count(spec: EmbeddingNetSpec) -> int:
    total, cin = 2, 1  # standardize shift + scale
    for s in spec.trunk:
        total += s.kernel * s.kernel * cin * s.filters + s.filters
        total += s.kernel * s.kernel * s.filters * s.filters + s.filters
        cin = s.filters
    width = cin
    for u in spec.dense_units:
        total += width * u + u
        width = u
    total += width * spec.embedding_units + spec.embedding_units
    total += spec.embedding_units * spec.num_classes + spec.num_classes
    return total


def test_parameter_count_matches_closed_form():
    spec = EmbeddingNetSpec()
    model = build_model(spec, 0)
    assert nn.count_parameters(model.params()) == closed_form_count(spec) == 88955


def test_minimal_model_forward():
    model = build_model(EmbeddingNetSpec(num_classes=2), 0)
    assert model.logits(np.zeros((49, 40), np.float32)).shape == (1, 2)


def test_same_seed_same_init_and_hash():
    a, b = build_model(EmbeddingNetSpec(), 5), build_model(EmbeddingNetSpec(), 5)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.params(), b.params()))
    assert a.checkpoint_hash() == b.checkpoint_hash() != build_model(EmbeddingNetSpec(), 6).checkpoint_hash()


@pytest.mark.parametrize("kwargs", [dict(embedding_units=1), dict(num_classes=1), dict(trunk=())])
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        EmbeddingNetSpec(**kwargs)


def test_spec_must_match_frontend():
    with pytest.raises(ValueError):
        build_model(EmbeddingNetSpec(input_shape=(50, 40)), 0)


def test_features_deterministic_batch_independent():
    model = build_model(EmbeddingNetSpec(), 1)
    x = np.random.default_rng(0).normal(size=(5, 49, 40)).astype(np.float32)
    f = extract_features(model, x)
    assert f.shape == (5, 64)
    assert np.array_equal(f, extract_features(model, x))
    np.testing.assert_allclose(extract_features(model, x[2:3])[0], f[2], atol=1e-6)
    silence = np.full((2, 49, 40), np.log(1e-6), np.float32)
    s = extract_features(model, silence)
    assert np.array_equal(s[0], s[1])
    with pytest.raises(ShapeError):
        extract_features(model, np.zeros((1, 48, 40), np.float32))


def test_accuracy_table_recount():
    pred = np.array([1, 2, 2, 0, 1, 1])
    labels = np.array([1, 2, 1, 0, 1, 2])
    langs = ["a", "a", "a", "b", "b", "b"]
    table, overall = accuracy_table(pred, labels, langs)
    assert table["a"] == {"correct": 2, "total": 3, "accuracy": 2 / 3}
    assert table["b"]["accuracy"] == 2 / 3 and overall == 4 / 6
    assert accuracy_table(labels, labels, langs)[1] == 1.0


def test_save_load_round_trip(tmp_path):
    model = build_model(EmbeddingNetSpec(num_classes=4), 3, [BACKGROUND, "a", "b", "c"])
    model.fingerprint = {"config_hash": "x", "data_hash": "y"}
    save_model(model, tmp_path / "m.mkws")
    back = load_model(tmp_path / "m.mkws")
    x = np.random.default_rng(0).normal(size=(3, 49, 40)).astype(np.float32)
    assert np.array_equal(back.features(x), model.features(x))
    assert back.classes == model.classes and back.fingerprint == model.fingerprint
    assert back.checkpoint_hash() == model.checkpoint_hash()
    header = inspect_model(tmp_path / "m.mkws")
    assert EmbeddingNetSpec.from_dict(header["spec"]) == model.spec and header["classes"] == model.classes


def test_corrupted_and_truncated_files(tmp_path):
    model = build_model(EmbeddingNetSpec(num_classes=2), 0)
    save_model(model, tmp_path / "m.mkws")
    data = (tmp_path / "m.mkws").read_bytes()
    (tmp_path / "t.mkws").write_bytes(data[: len(data) // 2])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "t.mkws")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    (tmp_path / "f.mkws").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_model(tmp_path / "f.mkws")


def test_container_version_and_magic(tmp_path):
    blob = bytearray(checkpoint.encode({"kind": "x"}, {"a": np.arange(3, dtype=np.int32)}))
    header, tensors = checkpoint.decode(bytes(blob))
    assert header["kind"] == "x" and tensors["a"].tolist() == [0, 1, 2]
    bad = bytearray(blob)
    bad[0:4] = b"NOPE"
    with pytest.raises(ModelFormatError):
        checkpoint.decode(bytes(bad))
    newer = bytearray(blob)
    newer[4] = 99  # version field follows the magic
    with pytest.raises(ModelFormatError):
        checkpoint.decode(bytes(newer))


def test_training_requires_noise_when_fraction_positive(tiny_corpus):
    corpus, manifest = tiny_corpus
    words = corpus.roles["embedding"]
    model = build_model(EmbeddingNetSpec(num_classes=len(words) + 1), 0, [BACKGROUND] + sorted(words))
    with pytest.raises(FileNotFoundError):
        train_embedding(model, manifest, [], TrainingConfig(epochs=1))


def test_training_rejects_unknown_classes(tiny_corpus):
    corpus, manifest = tiny_corpus
    model = build_model(EmbeddingNetSpec(num_classes=2), 0, [BACKGROUND, "notaword"])
    with pytest.raises(ManifestError):
        train_embedding(model, manifest, corpus.noise_dir, TrainingConfig(epochs=1))


def test_noise_rows_are_six_or_seven(tiny_corpus, monkeypatch):
    import mkws.model as M

    corpus, manifest = tiny_corpus
    words = sorted(corpus.roles["embedding"])
    counts = []
    real = M.nn.softmax_xent

    def spy(logits, labels):
        if len(labels) == 64:
            counts.append(int(np.sum(labels == 0)))
        return real(logits, labels)

    monkeypatch.setattr(M.nn, "softmax_xent", spy)
    # duplicate the train split so full batches of 64 exist
    entries = manifest.entries + [dataclasses.replace(e, path=str(manifest.resolve(e)), clip_id=e.clip_id + "b")
                                  for e in manifest.entries]
    big = DatasetManifest(entries, manifest.root)
    model = build_model(EmbeddingNetSpec(num_classes=len(words) + 1), 0, [BACKGROUND] + words)
    train_embedding(model, big, corpus.noise_dir, TrainingConfig(epochs=3, seed=2))
    assert counts and set(counts) <= {6, 7}


def test_training_is_deterministic_and_fingerprinted(tiny_corpus, tmp_path):
    corpus, manifest = tiny_corpus
    words = sorted(corpus.roles["embedding"])
    runs = []
    for _ in range(2):
        model = build_model(EmbeddingNetSpec(num_classes=len(words) + 1), 0, [BACKGROUND] + words)
        rep = train_embedding(model, manifest, corpus.noise_dir, TrainingConfig(epochs=2, seed=4))
        runs.append((rep, model))
    (r1, m1), (r2, m2) = runs
    assert r1.losses == r2.losses and m1.checkpoint_hash() == m2.checkpoint_hash()
    assert m1.fingerprint == m2.fingerprint and m1.fingerprint["config_hash"]
    m3 = build_model(EmbeddingNetSpec(num_classes=len(words) + 1), 0, [BACKGROUND] + words)
    train_embedding(m3, manifest, corpus.noise_dir, TrainingConfig(epochs=1, seed=4))
    assert m3.fingerprint["config_hash"] != m1.fingerprint["config_hash"]
    assert m3.fingerprint["data_hash"] == m1.fingerprint["data_hash"]
    assert all(0 <= e["val_accuracy"] <= 1 and 0 <= e["train_accuracy"] <= 1 for e in r1.epochs)
    r1.write(tmp_path / "r.json", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().count("\n") == 3


def test_validate_matches_recount(tiny_corpus):
    corpus, manifest = tiny_corpus
    words = sorted(corpus.roles["embedding"])
    model = build_model(EmbeddingNetSpec(num_classes=len(words) + 1), 0, [BACKGROUND] + words)
    table, overall = validate(model, manifest, "train")
    from mkws.model import load_clips, spectrogram_batch

    entries = manifest.select(words=words, splits=["train"], padding_modes=["silence"])
    pred = model.predict(spectrogram_batch(load_clips(manifest, entries, 16000), FrontendConfig()))
    truth = np.array([model.classes.index(e.word) for e in entries])
    assert overall == pytest.approx(float(np.mean(pred == truth)))
    assert sum(v["total"] for v in table.values()) == len(entries)


def test_cross_dataset_grid_symmetric_for_identical_data(tiny_corpus):
    corpus, manifest = tiny_corpus
    word = sorted(corpus.roles["embedding"])[0]
    grid = cross_dataset_eval(manifest, manifest, word, FrontendConfig(), epochs=2, seed=0)
    assert grid[0][0] == grid[0][1] and grid[1][0] == grid[1][1]
