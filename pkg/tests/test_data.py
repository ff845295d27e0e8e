"""Synthetic corpus generation, label noise, and JSONL round-trips."""

import json

import numpy as np
import pytest

from gradmask.data import (
    CorpusSpec,
    corrupt_pseudo_labels,
    generate_corpus,
    generate_split,
    inject_label_noise,
    make_utterance,
    make_utterance_with_alignment,
    read_corpus,
    token_means,
    write_corpus,
)
from gradmask.decode import edit_distance
from gradmask.seeds import substream

TINY = CorpusSpec(n_labeled=6, n_unlabeled=8, n_dev=4, n_test=4, seed=5)


def test_token_means_geometry():
    spec = CorpusSpec()
    means = token_means(spec)
    assert means.shape == (16, 8)
    radii = np.linalg.norm(means, axis=1)
    assert np.allclose(radii, spec.mean_radius, atol=1e-12)
    # pairwise separation honored
    for i in range(16):
        for j in range(i):
            assert np.linalg.norm(means[i] - means[j]) >= spec.min_separation


def test_separation_failure_raises():
    spec = CorpusSpec(n_vocab=64, n_features=2, mean_radius=1.0, min_separation=1.9)
    with pytest.raises(ValueError, match="separation"):
        token_means(spec)


def test_generation_is_deterministic():
    a = generate_corpus(TINY)
    b = generate_corpus(TINY)
    for split in ("labeled", "unlabeled", "dev", "test"):
        assert len(a[split]) == len(b[split])
        for ua, ub in zip(a[split], b[split]):
            assert ua.id == ub.id
            assert ua.split == split
            assert np.array_equal(ua.reference, ub.reference)
            assert ua.features.tobytes() == ub.features.tobytes()


def test_utterance_independent_of_split_size():
    # the same id renders identically no matter how many neighbours exist
    means = token_means(TINY)
    solo = make_utterance(TINY, means, "dev-00002")
    batch = generate_split(TINY, means, "dev", 4)[2]
    assert batch.id == "dev-00002"
    assert solo.features.tobytes() == batch.features.tobytes()
    assert np.array_equal(solo.reference, batch.reference)


def test_split_sizes_and_disjoint_ids():
    splits = generate_corpus(TINY)
    assert (len(splits["labeled"]), len(splits["unlabeled"])) == (6, 8)
    assert (len(splits["dev"]), len(splits["test"])) == (4, 4)
    ids = [u.id for split in splits.values() for u in split]
    assert len(ids) == len(set(ids))


def test_utterance_shape_bounds():
    spec = TINY
    for utt in generate_corpus(spec)["labeled"]:
        L = len(utt.reference)
        assert spec.tokens_per_utt[0] <= L <= spec.tokens_per_utt[1]
        min_frames = L * spec.frames_per_token[0]
        # silence only between tokens: at most L - 1 gaps
        max_frames = L * spec.frames_per_token[1] + (L - 1) * spec.silence_frames[1]
        assert min_frames <= utt.n_frames <= max_frames
        assert utt.features.shape[1] == spec.n_features
        assert utt.pseudo is None


def test_low_noise_frames_sit_near_their_means():
    spec = CorpusSpec(noise_std=0.01, silence_frames=(0, 0), n_labeled=5, seed=9)
    means = token_means(spec)
    for i in range(5):
        utt, alignment = make_utterance_with_alignment(spec, means, f"labeled-{i:05d}")
        assert len(alignment) == utt.n_frames
        assert np.all(alignment >= 0)  # silence disabled
        # nearest mean classifies every frame correctly at tiny noise
        frame_tokens = utt.reference[alignment]
        d = np.linalg.norm(utt.features[:, None, :] - means[None, :, :], axis=2)
        assert np.array_equal(d.argmin(axis=1), frame_tokens)


def test_noiseless_frames_repeat_means_exactly():
    spec = CorpusSpec(noise_std=0.0, frames_per_token=(3, 3), silence_frames=(0, 0), seed=2)
    means = token_means(spec)
    utt, alignment = make_utterance_with_alignment(spec, means, "labeled-00000")
    assert utt.n_frames == 3 * len(utt.reference)
    frame_tokens = utt.reference[alignment]
    assert np.array_equal(utt.features, means[frame_tokens])


def test_alignment_covers_every_token_in_order():
    spec = TINY
    means = token_means(spec)
    utt, alignment = make_utterance_with_alignment(spec, means, "dev-00000")
    spoken = alignment[alignment >= 0]
    # positions appear consecutively and in order, each at least min-frames long
    assert np.array_equal(np.unique(spoken), np.arange(len(utt.reference)))
    changes = np.flatnonzero(np.diff(spoken) != 0)
    assert np.all(np.diff(spoken)[changes] == 1)
    counts = np.bincount(spoken)
    assert counts.min() >= spec.frames_per_token[0]
    assert counts.max() <= spec.frames_per_token[1]


def test_round_trip_plain_and_gzip(tmp_path):
    corpus = generate_corpus(TINY)["dev"]
    corpus.utterances[1].pseudo = np.array([3, 0, 5], dtype=np.int64)
    for name in ("c.jsonl", "c.jsonl.gz"):
        path = tmp_path / name
        write_corpus(path, corpus)
        back = read_corpus(path, n_vocab=corpus.n_vocab)
        assert back.n_vocab == corpus.n_vocab
        assert back.n_features == corpus.n_features
        assert len(back) == len(corpus)
        for ua, ub in zip(corpus, back):
            assert ua.id == ub.id
            assert ua.split == ub.split
            assert np.array_equal(ua.reference, ub.reference)
            assert ua.features.tobytes() == ub.features.tobytes()  # exact floats
        assert back[0].pseudo is None
        assert np.array_equal(back[1].pseudo, [3, 0, 5])


def test_record_layout_is_one_utterance_per_line(tmp_path):
    corpus = generate_corpus(TINY)["dev"]
    path = tmp_path / "c.jsonl"
    write_corpus(path, corpus)
    lines = path.read_text().splitlines()
    assert len(lines) == len(corpus)
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "split", "features", "reference"}
    assert rec["split"] == "dev"


def test_vocab_inferred_when_not_given(tmp_path):
    corpus = generate_corpus(TINY)["dev"]
    path = tmp_path / "c.jsonl"
    write_corpus(path, corpus)
    back = read_corpus(path)
    biggest = max(int(u.reference.max()) for u in corpus)
    assert back.n_vocab == biggest + 1


def test_read_errors_name_line_and_utterance(tmp_path):
    path = tmp_path / "bad.jsonl"
    ok = '{"id": "u0", "split": "dev", "features": [[0.0, 0.0]], "reference": [1]}\n'

    path.write_text(ok + "{nope\n")
    with pytest.raises(ValueError, match="line 2"):
        read_corpus(path)

    path.write_text(ok + '{"id": "u1", "split": "dev", "features": [[0.0, 0.0]], "reference": [9]}\n')
    with pytest.raises(ValueError, match="line 2.*u1.*out of range"):
        read_corpus(path, n_vocab=4)

    path.write_text(ok + '{"id": "u0", "split": "dev", "features": [[0.0, 0.0]], "reference": [2]}\n')
    with pytest.raises(ValueError, match="line 2.*duplicate"):
        read_corpus(path)

    path.write_text(ok + '{"id": "u1", "split": "dev", "features": [[0.0], [0.0, 1.0]], "reference": [1]}\n')
    with pytest.raises(ValueError, match="line 2.*u1"):
        read_corpus(path)

    path.write_text(ok + '{"id": "u1", "split": "dev", "features": [[0.0, 0.0]]}\n')
    with pytest.raises(ValueError, match="line 2.*u1.*reference"):
        read_corpus(path)

    path.write_text(
        ok + '{"id": "u1", "split": "dev", "features": [[0.0, 0.0]], "reference": [1], "pseudo": [7]}\n'
    )
    with pytest.raises(ValueError, match="line 2.*u1.*pseudo"):
        read_corpus(path, n_vocab=4)


def test_empty_file_reads_as_empty_corpus(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    corpus = read_corpus(path, n_vocab=16)
    assert len(corpus) == 0
    assert corpus.n_vocab == 16


def test_noise_rate_monte_carlo():
    rng = substream(0, "noise")
    total_tokens = 0
    total_edits = 0
    for _ in range(300):
        tokens = rng.integers(0, 16, size=40)
        noisy, n = inject_label_noise(tokens, 0.15, 16, rng)
        total_tokens += len(tokens)
        total_edits += n
        # reported edit count matches the true edit distance most directly
        assert edit_distance(tokens.tolist(), noisy.tolist()).distance <= n + 2
    rate = total_edits / total_tokens
    assert 0.13 <= rate <= 0.17


def test_substitution_never_reproduces_original():
    rng = substream(1, "noise")
    tokens = np.full(2000, 7, dtype=np.int64)
    noisy, n = inject_label_noise(tokens, 0.5, 16, rng, kinds=("substitute",))
    changed = noisy != 7
    assert changed.sum() == n
    assert np.all((noisy >= 0) & (noisy < 16))


def test_zero_rate_is_identity():
    rng = substream(2, "noise")
    tokens = rng.integers(0, 16, size=50)
    noisy, n = inject_label_noise(tokens, 0.0, 16, rng)
    assert n == 0
    assert np.array_equal(tokens, noisy)


def test_corrupt_pseudo_preserves_features_and_references():
    corpus = generate_corpus(TINY)["labeled"]
    noisy, total = corrupt_pseudo_labels(corpus, 0.3, seed=11)
    assert total > 0
    for orig, nz in zip(corpus, noisy):
        assert orig.id == nz.id
        assert orig.features is nz.features  # no copies of the audio
        assert np.array_equal(orig.reference, nz.reference)
        assert nz.pseudo is not None
    again, total2 = corrupt_pseudo_labels(corpus, 0.3, seed=11)
    assert total == total2
    for a, b in zip(noisy, again):
        assert np.array_equal(a.pseudo, b.pseudo)


def test_noise_parameter_validation():
    rng = substream(0, "noise")
    with pytest.raises(ValueError):
        inject_label_noise(np.array([1]), 1.5, 4, rng)
    with pytest.raises(ValueError):
        inject_label_noise(np.array([1]), 0.5, 4, rng, kinds=("swap",))


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(n_vocab=1)
    CorpusSpec(noise_std=0.0)  # noiseless corpora are legal
    with pytest.raises(ValueError):
        CorpusSpec(noise_std=-0.1)
    with pytest.raises(ValueError):
        CorpusSpec(frames_per_token=(5, 2))
    with pytest.raises(ValueError):
        CorpusSpec(tokens_per_utt=(0, 4))
    with pytest.raises(ValueError):
        CorpusSpec(n_dev=0)
