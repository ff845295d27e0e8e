"""Greedy transducer decoding and word-error accounting.

Decoding walks encoder frames left to right; at each frame the joint's
argmax either emits a token (advancing the predictor) or takes the blank
and moves to the next frame. A per-frame emission cap keeps a bad model
from looping; when the cap is hit the decoder advances without scoring a
blank.

Edit distances are canonicalized: among all minimum-distance alignments
the one with the fewest insertions+deletions is reported, which makes the
substitution count well defined and symmetric under swapping the two
sequences (insertions and deletions trade places).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .rnnt import LogitLattice, rnnt_loss

DEFAULT_EMIT_CAP = 4


@dataclass(frozen=True)
class Hypothesis:
    """One decoded utterance: tokens, summed log-prob, per-frame emissions."""

    tokens: tuple[int, ...]
    score: float
    frame_emits: tuple[int, ...]


def greedy_decode(model, features, emit_cap: int = DEFAULT_EMIT_CAP) -> Hypothesis:
    """Frame-synchronous argmax decoding with a per-frame emission cap."""
    if emit_cap < 1:
        raise ValueError(f"emit_cap must be >= 1, got {emit_cap}")
    h_enc = model.infer_encode(features)
    blank = model.dims.blank
    h = model.pred_start()
    tokens: list[int] = []
    frame_emits: list[int] = []
    score = 0.0
    for t in range(h_enc.shape[0]):
        emits = 0
        while emits < emit_cap:
            lp = model.joint_log_probs(h_enc[t], h)
            best = int(np.argmax(lp))
            score += float(lp[best])
            if best == blank:
                break
            tokens.append(best)
            h = model.pred_step(h, best)
            emits += 1
        frame_emits.append(emits)
    return Hypothesis(tokens=tuple(tokens), score=score, frame_emits=tuple(frame_emits))


def sequence_log_likelihood(model, features, tokens) -> float:
    """Exact ln P(tokens | features) summed over all alignments."""
    tgt = np.asarray(tokens, dtype=np.int64)
    h_enc = model.infer_encode(features)
    h = model.pred_start()
    preds = [h]
    for tok in tgt:
        h = model.pred_step(h, int(tok))
        preds.append(h)
    T, U1 = h_enc.shape[0], len(preds)
    values = np.empty((T, U1, model.dims.n_vocab + 1))
    for t in range(T):
        for u in range(U1):
            values[t, u] = model.joint_log_probs(h_enc[t], preds[u])
    return -rnnt_loss(LogitLattice.from_values(values, validate=False), tgt).loss


@dataclass(frozen=True)
class EditCounts:
    """Minimum edit distance with a canonical substitution/insert/delete split."""

    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> EditCounts:
    """Levenshtein distance; ties broken toward fewest insertions+deletions."""
    n, m = len(ref), len(hyp)
    # cell = (distance, insertions + deletions), minimized lexicographically
    prev = [(j, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i)]
        for j in range(1, m + 1):
            sub_cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            diag = (prev[j - 1][0] + sub_cost, prev[j - 1][1])
            up = (prev[j][0] + 1, prev[j][1] + 1)
            left = (cur[j - 1][0] + 1, cur[j - 1][1] + 1)
            cur.append(min(diag, up, left))
        prev = cur
    dist, ins_plus_del = prev[m]
    delta = m - n  # insertions - deletions along any alignment
    insertions = (ins_plus_del + delta) // 2
    deletions = (ins_plus_del - delta) // 2
    return EditCounts(
        distance=dist,
        substitutions=dist - ins_plus_del,
        insertions=insertions,
        deletions=deletions,
    )


def wer(ref: Sequence[int], hyp: Sequence[int]) -> float:
    """Token error rate for one utterance; an empty reference counts as 1."""
    return edit_distance(ref, hyp).distance / max(1, len(ref))


def corpus_wer(refs: Iterable[Sequence[int]], hyps: Iterable[Sequence[int]]) -> float:
    """Pooled token error rate: total edits over total reference length."""
    refs = list(refs)
    hyps = list(hyps)
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total_edits = sum(edit_distance(r, h).distance for r, h in zip(refs, hyps))
    total_len = sum(len(r) for r in refs)
    return total_edits / max(1, total_len)
