"""Synthetic speech-like corpus: generation, label noise, JSONL I/O.

Each token owns a fixed mean vector in feature space; an utterance renders
its token sequence as a few noisy frames per token with short silence
(zero-mean noise) gaps between tokens. Token sequences follow a first-order
Markov chain with a strongly preferred successor per token — the same
kind of heavy sequential structure real label streams have, and the
property that makes inferring a masked stretch from its surroundings a
learnable task rather than a coin toss. Every utterance is generated from
its own named substream keyed by a stable hash of its id, so corpora are
reproducible utterance by utterance and independent of generation order.

An utterance carries its ground-truth `reference` labels and, once a model
(or the noise injector) has labeled it, an optional `pseudo` sequence.

Files are JSON Lines, one utterance per line with keys "id", "split",
"features", "reference", and "pseudo" when present. Floats survive the
round trip exactly (shortest-repr decimal encoding).
"""

from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass

import numpy as np

from .seeds import stable_hash, substream


@dataclass(frozen=True)
class CorpusSpec:
    """Knobs for the synthetic corpus. Defaults give the standard setup."""

    n_vocab: int = 16
    n_features: int = 8
    noise_std: float = 0.3
    mean_radius: float = 1.5
    min_separation: float = 1.2
    frames_per_token: tuple[int, int] = (2, 5)
    silence_frames: tuple[int, int] = (0, 2)
    tokens_per_utt: tuple[int, int] = (4, 12)
    n_labeled: int = 200
    n_unlabeled: int = 1800
    n_dev: int = 100
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_vocab < 2 or self.n_features < 1:
            raise ValueError("need n_vocab >= 2 and n_features >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for name in ("frames_per_token", "silence_frames", "tokens_per_utt"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range ({lo}, {hi}) is invalid")
        if self.frames_per_token[0] < 1 or self.tokens_per_utt[0] < 1:
            raise ValueError("tokens need at least one frame and utterances one token")
        for name in ("n_labeled", "n_unlabeled", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    reference: np.ndarray
    pseudo: np.ndarray | None = None
    split: str = ""

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance]
    n_vocab: int
    n_features: int

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]


def token_means(spec: CorpusSpec) -> np.ndarray:
    """Per-token mean vectors: random directions at `mean_radius`, kept at
    least `min_separation` apart by rejection sampling."""
    rng = substream(spec.seed, "means")
    means = np.zeros((spec.n_vocab, spec.n_features))
    for k in range(spec.n_vocab):
        for _ in range(1000):
            v = rng.normal(size=spec.n_features)
            v *= spec.mean_radius / np.linalg.norm(v)
            if k == 0 or np.linalg.norm(means[:k] - v, axis=1).min() >= spec.min_separation:
                means[k] = v
                break
        else:
            raise ValueError(
                f"could not place {spec.n_vocab} token means with separation "
                f"{spec.min_separation} at radius {spec.mean_radius}"
            )
    return means


def token_transitions(spec: CorpusSpec) -> np.ndarray:
    """Bigram law for token sequences, deterministic from the seed.

    Each token gets one strongly preferred successor (probability 0.85 on
    top of a uniform floor), so a token hidden from view is largely
    pinned down by its left neighbour — the property that makes masked
    prediction from context work — while the floor keeps every
    continuation possible and sequences aperiodic. Rows sum to one; the
    initial token is drawn uniformly.
    """
    rng = substream(spec.seed, "chain")
    K = spec.n_vocab
    trans = np.full((K, K), 0.15 / K)
    for a in range(K):
        favored = int(rng.integers(0, K))
        trans[a, favored] += 0.85
    return trans


def sample_token_sequence(trans: np.ndarray, n_tok: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a length-`n_tok` token sequence from the chain."""
    K = trans.shape[0]
    tokens = np.empty(n_tok, dtype=np.int64)
    cur = int(rng.integers(0, K))
    tokens[0] = cur
    for i in range(1, n_tok):
        cur = int(rng.choice(K, p=trans[cur]))
        tokens[i] = cur
    return tokens


SILENCE_LABEL = -1


def _render(
    spec: CorpusSpec, means: np.ndarray, tokens: np.ndarray, rng
) -> tuple[np.ndarray, np.ndarray]:
    """Features plus per-frame labels (token position, or -1 for silence)."""
    lo, hi = spec.frames_per_token
    s_lo, s_hi = spec.silence_frames
    segments = []
    labels: list[int] = []
    for pos, tok in enumerate(tokens):
        if pos:  # silence sits between tokens, not at the edges
            n = int(rng.integers(s_lo, s_hi + 1))
            if n:
                segments.append(rng.normal(0.0, spec.noise_std, size=(n, spec.n_features)))
                labels.extend([SILENCE_LABEL] * n)
        d = int(rng.integers(lo, hi + 1))
        segments.append(means[tok] + rng.normal(0.0, spec.noise_std, size=(d, spec.n_features)))
        labels.extend([pos] * d)
    return np.concatenate(segments, axis=0), np.asarray(labels, dtype=np.int64)


def make_utterance_with_alignment(
    spec: CorpusSpec,
    means: np.ndarray,
    utt_id: str,
    split: str = "",
    trans: np.ndarray | None = None,
) -> tuple[Utterance, np.ndarray]:
    """One utterance from its id-keyed substream, with its frame alignment.

    The alignment maps each frame to the position of the token it renders,
    or to -1 for silence frames. `trans` is the token-transition matrix;
    it is recomputed from the spec when not supplied.
    """
    if trans is None:
        trans = token_transitions(spec)
    rng = substream(spec.seed, "data", stable_hash(utt_id))
    lo, hi = spec.tokens_per_utt
    n_tok = int(rng.integers(lo, hi + 1))
    tokens = sample_token_sequence(trans, n_tok, rng)
    features, alignment = _render(spec, means, tokens, rng)
    utt = Utterance(id=utt_id, features=features, reference=tokens, split=split)
    return utt, alignment


def make_utterance(
    spec: CorpusSpec,
    means: np.ndarray,
    utt_id: str,
    split: str = "",
    trans: np.ndarray | None = None,
) -> Utterance:
    """Generate one utterance from its id-keyed substream."""
    return make_utterance_with_alignment(spec, means, utt_id, split, trans)[0]


SPLIT_SIZES = {
    "labeled": "n_labeled",
    "unlabeled": "n_unlabeled",
    "dev": "n_dev",
    "test": "n_test",
}


def generate_split(
    spec: CorpusSpec,
    means: np.ndarray,
    split: str,
    n: int,
    trans: np.ndarray | None = None,
) -> Corpus:
    if trans is None:
        trans = token_transitions(spec)
    utts = [make_utterance(spec, means, f"{split}-{i:05d}", split, trans) for i in range(n)]
    return Corpus(utterances=utts, n_vocab=spec.n_vocab, n_features=spec.n_features)


def generate_corpus(spec: CorpusSpec) -> dict[str, Corpus]:
    """All four splits, keyed "labeled" / "unlabeled" / "dev" / "test"."""
    means = token_means(spec)
    trans = token_transitions(spec)
    return {
        split: generate_split(spec, means, split, getattr(spec, attr), trans)
        for split, attr in SPLIT_SIZES.items()
    }


# ---------------------------------------------------------------------------
# label noise

NOISE_KINDS = ("substitute", "delete", "insert")


def inject_label_noise(
    tokens: np.ndarray, rate: float, n_vocab: int, rng, kinds=NOISE_KINDS
) -> tuple[np.ndarray, int]:
    """Corrupt a token sequence; returns (new tokens, number of edits).

    Each position independently triggers one edit with probability `rate`:
    a substitution by a different token, a deletion, or an insertion of a
    random token before it, each kind equally likely. The expected token
    error rate of the output against the input is about `rate`.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")
    for k in kinds:
        if k not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {k!r}")
    out: list[int] = []
    n_edits = 0
    for tok in np.asarray(tokens).tolist():
        if rng.random() < rate:
            n_edits += 1
            kind = kinds[int(rng.integers(0, len(kinds)))]
            if kind == "substitute":
                wrong = int(rng.integers(0, n_vocab - 1))
                out.append(wrong if wrong < tok else wrong + 1)
            elif kind == "delete":
                pass
            else:  # insert before, keep the original
                out.append(int(rng.integers(0, n_vocab)))
                out.append(tok)
        else:
            out.append(tok)
    return np.asarray(out, dtype=np.int64), n_edits


def corrupt_pseudo_labels(
    corpus: Corpus, rate: float, seed: int, kinds=NOISE_KINDS
) -> tuple[Corpus, int]:
    """Fill every utterance's pseudo labels with a corrupted copy of its
    reference; features are shared, not copied.

    Returns the labeled corpus and the total number of edits. Each
    utterance draws from its own id-keyed "noise" substream.
    """
    utts = []
    total = 0
    for utt in corpus:
        rng = substream(seed, "noise", stable_hash(utt.id))
        pseudo, n = inject_label_noise(utt.reference, rate, corpus.n_vocab, rng, kinds)
        total += n
        utts.append(
            Utterance(
                id=utt.id,
                features=utt.features,
                reference=utt.reference,
                pseudo=pseudo,
                split=utt.split,
            )
        )
    return Corpus(utterances=utts, n_vocab=corpus.n_vocab, n_features=corpus.n_features), total


# ---------------------------------------------------------------------------
# JSONL I/O


def _open(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_corpus(path: str | os.PathLike, corpus: Corpus) -> None:
    """One utterance per line; the pseudo field appears only when set.
    Paths ending in `.gz` are gzip-compressed."""
    with _open(path, "w") as f:
        for utt in corpus:
            rec = {
                "id": utt.id,
                "split": utt.split,
                "features": utt.features.tolist(),
                "reference": utt.reference.tolist(),
            }
            if utt.pseudo is not None:
                rec["pseudo"] = utt.pseudo.tolist()
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _parse_tokens(rec, key, lineno, utt_id, path, n_vocab, required):
    if key not in rec:
        if required:
            raise ValueError(f"{path}: line {lineno}: utterance {utt_id!r} missing {key!r}")
        return None
    try:
        arr = np.asarray(rec[key], dtype=np.int64)
    except (ValueError, TypeError):
        raise ValueError(
            f"{path}: line {lineno}: utterance {utt_id!r} has malformed {key!r}"
        ) from None
    if arr.ndim != 1:
        raise ValueError(f"{path}: line {lineno}: utterance {utt_id!r} {key!r} must be 1-D")
    if n_vocab is not None and arr.size and (arr.min() < 0 or arr.max() >= n_vocab):
        raise ValueError(
            f"{path}: line {lineno}: utterance {utt_id!r} {key!r} token out of range [0, {n_vocab})"
        )
    return arr


def read_corpus(path: str | os.PathLike, n_vocab: int | None = None) -> Corpus:
    """Read a corpus written by `write_corpus`; validates as it goes.

    Errors name the offending line and utterance id. Token range checks
    run when `n_vocab` is given; otherwise the vocabulary size is inferred
    as one past the largest token seen. An empty file is an empty corpus.
    """
    utts: list[Utterance] = []
    n_features: int | None = None
    seen: set[str] = set()
    with _open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or "id" not in rec:
                raise ValueError(f"{path}: line {lineno}: not an utterance record")
            utt_id = rec["id"]
            if utt_id in seen:
                raise ValueError(f"{path}: line {lineno}: duplicate utterance id {utt_id!r}")
            seen.add(utt_id)
            try:
                features = np.asarray(rec["features"], dtype=np.float64)
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(
                    f"{path}: line {lineno}: utterance {utt_id!r} has malformed features ({e})"
                ) from None
            if features.ndim != 2 or features.shape[0] < 1:
                raise ValueError(
                    f"{path}: line {lineno}: utterance {utt_id!r} features must be a "
                    f"non-empty 2-D array, got shape {features.shape}"
                )
            if n_features is None:
                n_features = features.shape[1]
            if features.shape[1] != n_features:
                raise ValueError(
                    f"{path}: line {lineno}: utterance {utt_id!r} has {features.shape[1]} "
                    f"feature columns, expected {n_features}"
                )
            reference = _parse_tokens(rec, "reference", lineno, utt_id, path, n_vocab, True)
            pseudo = _parse_tokens(rec, "pseudo", lineno, utt_id, path, n_vocab, False)
            utts.append(
                Utterance(
                    id=utt_id,
                    features=features,
                    reference=reference,
                    pseudo=pseudo,
                    split=rec.get("split", ""),
                )
            )
    if n_vocab is None:
        tokens = [u.reference for u in utts] + [u.pseudo for u in utts if u.pseudo is not None]
        n_vocab = max((int(t.max()) + 1 for t in tokens if t.size), default=0)
    return Corpus(utterances=utts, n_vocab=n_vocab, n_features=n_features or 0)
