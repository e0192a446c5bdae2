from pathlib import Path

import pytest

from mkws.dataset import build_manifest, extract_corpus, parse_alignments
from mkws.synthetic import generate_corpus


def extract_all(corpus, out_dir: Path, modes=("silence",), seed=0):
    exs = []
    for c in corpus.corpora:
        exs += extract_corpus(parse_alignments(c["alignments"]).records, c["audio_root"], c["language"], modes, None,
                              out_dir)
    man = build_manifest(exs, seed=seed)
    man.to_jsonl(out_dir / "manifest.jsonl")
    man.root = out_dir
    return man


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Six words x 15 samples, one language: fast enough for unit tests."""
    root = tmp_path_factory.mktemp("tiny")
    corpus = generate_corpus(root / "corpus", seed=1, n_embedding=3, n_heldout=1, n_bank=1, n_novel=1,
                             samples_per_word=15, languages=("xa",), num_speakers=10)
    manifest = extract_all(corpus, root / "clips")
    return corpus, manifest


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one criterion's outcome for the end-of-run summary, then assert it."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str) -> None:
        results[number] = (bool(passed), detail)
        assert passed, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
