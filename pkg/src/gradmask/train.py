"""Optimization and the semi-supervised pipeline.

One Adam optimizer spans all parameters for a whole run. Training walks a
deterministic round-robin schedule over batch sources (labeled first, then
the pseudo source, in the configured ratio); labeled batches run the plain
supervised mode, pseudo batches run the masked mode with a fresh mask plan
per utterance per visit - or supervised on the pseudo labels when gradient
masking is off (the mixed-data baseline).

Everything is bitwise deterministic for a fixed seed: batch order comes
from named substreams, per-utterance gradients are reduced in utterance
order even when fanned out to worker threads, and metrics files contain no
wall-clock times.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Corpus, Utterance, corrupt_pseudo_labels
from .decode import DEFAULT_EMIT_CAP, corpus_wer, greedy_decode
from .masking import DEFAULT_M, DEFAULT_P, sample_mask
from .model import (
    ModelDims,
    PseudoMasked,
    Supervised,
    TransducerModel,
    build_model,
)
from .seeds import substream

log = logging.getLogger("gradmask.train")


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite and training was aborted."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Shared knobs for seed and student runs."""

    steps: int = 8000
    batch_size: int = 8
    lr_peak: float = 3e-3
    warmup_steps: int = 500
    hold_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ratio_labeled: int = 1
    ratio_pseudo: int = 9
    mask_p: float = DEFAULT_P
    mask_m: int = DEFAULT_M
    gate_polarity: str = "masked"
    grad_mask: bool = True
    eval_interval: int = 500
    patience: int = 3
    workers: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr_peak <= 0 or self.eps <= 0:
            raise ValueError("learning rate and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.warmup_steps < 0 or self.hold_steps < 0:
            raise ValueError("schedule segments must be non-negative")
        if self.ratio_labeled < 1 or self.ratio_pseudo < 1:
            raise ValueError("interleave ratio must be two positive integers")
        if not 0.0 < self.mask_p <= 1.0 or self.mask_m < 1:
            raise ValueError("invalid mask parameters")
        if self.gate_polarity not in ("masked", "visible"):
            raise ValueError("gate_polarity must be 'masked' or 'visible'")
        if self.eval_interval < 1 or self.patience < 1:
            raise ValueError("eval_interval and patience must be >= 1")
        if self.workers < 0:
            raise ValueError("workers must be >= 0")


def config_hash(cfg: TrainConfig) -> str:
    """Stable hex digest of the full resolved config."""
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak, hold, then linear decay to zero.

    `step` is zero-based; the first step already takes a nonzero rate and
    the rate reaches zero only past the final step.
    """
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    hold_end = cfg.warmup_steps + cfg.hold_steps
    if step < hold_end:
        return cfg.lr_peak
    span = cfg.steps - hold_end
    if span <= 0:
        return cfg.lr_peak
    return cfg.lr_peak * max(0.0, (cfg.steps - step) / span)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moments plus the accepted-step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    rejected: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """One in-place update; returns False (and changes nothing) on a
    non-finite gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.rejected += 1
            log.warning("rejected non-finite gradient in %s (event %d)", name, state.rejected)
            return False
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name in params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# ---------------------------------------------------------------------------
# batch plumbing


class CyclicSource:
    """Endless shuffled batches over one corpus.

    Each pass over the corpus draws a fresh permutation from the "shuffle"
    substream keyed by (source tag, pass index), so batch composition
    depends only on the seed, never on how other sources are consumed.
    """

    def __init__(self, corpus: Corpus, seed: int, tag: int):
        if len(corpus) == 0:
            raise ValueError("cannot draw batches from an empty corpus")
        self.utterances = list(corpus)
        self.seed = seed
        self.tag = tag
        self._order: np.ndarray | None = None
        self._pos = 0
        self._pass = 0

    def next_batch(self, n: int) -> list[Utterance]:
        batch = []
        while len(batch) < n:
            if self._order is None or self._pos >= len(self._order):
                rng = substream(self.seed, "shuffle", self.tag, self._pass)
                self._order = rng.permutation(len(self.utterances))
                self._pos = 0
                self._pass += 1
            batch.append(self.utterances[int(self._order[self._pos])])
            self._pos += 1
        return batch


def run_batch(model, jobs, grad_scale: float, executor=None):
    """Forward+backward each (features, targets, mode) job; reduce in order.

    Returns (per-job losses, summed gradients). Jobs may run on worker
    threads, but gradients are accumulated in job order so the sum is
    bitwise identical however the work is scheduled.
    """

    def one(job):
        feats, tgt, mode = job
        res = model.forward(feats, tgt, mode)
        res.backward(grad_scale)
        return res

    if executor is None:
        results = [one(j) for j in jobs]
    else:
        results = list(executor.map(one, jobs))

    losses = [res.loss for res in results]
    total: dict[str, np.ndarray] = {k: np.zeros_like(p) for k, p in model.params.items()}
    for res in results:
        for name, leaf in res.leaves.items():
            if leaf.grad is not None:
                total[name] += leaf.grad
    return losses, total


def evaluate_wer(model, corpus: Corpus, emit_cap: int = DEFAULT_EMIT_CAP) -> float:
    """Greedy-decode the corpus and pool the token error rate."""
    refs = [u.reference for u in corpus]
    hyps = [greedy_decode(model, u.features, emit_cap).tokens for u in corpus]
    return corpus_wer(refs, hyps)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class RunMetrics:
    """Everything a run reports. Deliberately free of wall-clock times so
    identical runs serialize to identical bytes (timings live in the run
    manifest instead)."""

    config_hash: str
    iteration: int
    steps: list[tuple[int, str, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_dev_wer: float = math.inf
    final_test_wer: float | None = None
    rejected_steps: int = 0
    stopped_early: bool = False

    def write(self, out_dir: str | os.PathLike, prefix: str) -> tuple[str, str]:
        """Emit `<prefix>_steps.csv` and `<prefix>_summary.json`."""
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(os.fspath(out_dir), f"{prefix}_steps.csv")
        json_path = os.path.join(os.fspath(out_dir), f"{prefix}_summary.json")
        with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("step,tag,loss\n")
            for step, tag, loss in self.steps:
                f.write(f"{step},{tag},{loss!r}\n")
        summary = {
            "config_hash": self.config_hash,
            "iteration": self.iteration,
            "evals": [[s, w] for s, w in self.evals],
            "best_step": self.best_step,
            "best_dev_wer": self.best_dev_wer,
            "final_test_wer": self.final_test_wer,
            "rejected_steps": self.rejected_steps,
            "stopped_early": self.stopped_early,
            "n_steps": len(self.steps),
        }
        with open(json_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(summary, f, sort_keys=True, indent=2)
            f.write("\n")
        return csv_path, json_path


@dataclass
class TrainResult:
    model: TransducerModel
    metrics: RunMetrics


# ---------------------------------------------------------------------------
# the shared loop


def _loop(
    model: TransducerModel,
    sources,  # list of (tag, CyclicSource, make_job(utterance) -> (targets, mode))
    schedule: list[int],
    cfg: TrainConfig,
    dev: Corpus,
    iteration: int,
    on_step=None,
) -> TrainResult:
    metrics = RunMetrics(config_hash=config_hash(cfg), iteration=iteration)
    adam = init_adam(model.params)
    grad_scale = 1.0 / cfg.batch_size
    best_params: dict[str, np.ndarray] | None = None
    since_best = 0
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 0 else None
    try:
        for step in range(cfg.steps):
            tag, source, make_job = sources[schedule[step % len(schedule)]]
            batch = source.next_batch(cfg.batch_size)
            jobs = [(u.features, *make_job(u)) for u in batch]
            try:
                losses, grads = run_batch(model, jobs, grad_scale, executor)
            except FloatingPointError as e:
                raise TrainingDiverged(step, str(e)) from e
            mean_loss = math.fsum(losses) / len(losses)
            if not math.isfinite(mean_loss):
                raise TrainingDiverged(step, f"batch loss {mean_loss}")
            metrics.steps.append((step, tag, mean_loss))
            adam_step(model.params, grads, adam, lr_at(cfg, step), cfg.beta1, cfg.beta2, cfg.eps)
            if on_step is not None:
                on_step(step, model)

            is_last = step + 1 == cfg.steps
            if (step + 1) % cfg.eval_interval == 0 or is_last:
                dev_wer = evaluate_wer(model, dev)
                metrics.evals.append((step + 1, dev_wer))
                if dev_wer < metrics.best_dev_wer:
                    metrics.best_dev_wer = dev_wer
                    metrics.best_step = step + 1
                    best_params = {k: v.copy() for k, v in model.params.items()}
                    since_best = 0
                else:
                    since_best += 1
                    if since_best >= cfg.patience and not is_last:
                        metrics.stopped_early = True
                        log.info(
                            "early stop at step %d (best dev WER %.4f at step %d)",
                            step + 1,
                            metrics.best_dev_wer,
                            metrics.best_step,
                        )
                        break
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    metrics.rejected_steps = adam.rejected
    if best_params is not None:
        model.params = best_params
    return TrainResult(model=model, metrics=metrics)


# ---------------------------------------------------------------------------
# pipeline operations


def train_seed(
    labeled: Corpus,
    dev: Corpus,
    cfg: TrainConfig,
    dims: ModelDims = ModelDims(),
    on_step=None,
) -> TrainResult:
    """Supervised training on the labeled split only."""
    if len(labeled) == 0:
        raise ValueError("seed training needs a nonempty labeled corpus")
    model = build_model(dims, cfg.seed, stream_extra=(0,))
    sources = [
        ("labeled", CyclicSource(labeled, cfg.seed, tag=0), lambda u: (u.reference, Supervised()))
    ]
    return _loop(model, sources, [0], cfg, dev, iteration=0, on_step=on_step)


def pseudo_label(
    model: TransducerModel,
    unlabeled: Corpus,
    labeled: Corpus | None = None,
    emit_cap: int = DEFAULT_EMIT_CAP,
) -> tuple[Corpus, dict]:
    """Fill U's pseudo labels by greedy decoding; append L labeled by its
    own references.

    The report carries the pseudo-label error rate against the synthetic
    references (absent when U is empty) - measurable here because the
    corpus generator knows the truth; a real corpus would not.
    """
    pseudo_utts = []
    hyps = []
    for utt in unlabeled:
        hyp = greedy_decode(model, utt.features, emit_cap)
        hyps.append(hyp.tokens)
        pseudo_utts.append(
            Utterance(
                id=utt.id,
                features=utt.features,
                reference=utt.reference,
                pseudo=np.asarray(hyp.tokens, dtype=np.int64),
                split=utt.split,
            )
        )
    report: dict = {"n_unlabeled": len(unlabeled), "n_labeled": len(labeled) if labeled else 0}
    if len(unlabeled):
        report["pseudo_wer"] = corpus_wer([u.reference for u in unlabeled], hyps)
    if labeled is not None:
        pseudo_utts.extend(_self_labeled(labeled))
    return (
        Corpus(
            utterances=pseudo_utts,
            n_vocab=unlabeled.n_vocab,
            n_features=unlabeled.n_features,
        ),
        report,
    )


def _self_labeled(corpus: Corpus) -> list[Utterance]:
    """Copies whose pseudo labels are their own references."""
    return [
        Utterance(
            id=u.id, features=u.features, reference=u.reference, pseudo=u.reference, split=u.split
        )
        for u in corpus
    ]


def noisy_reference_pseudo(
    unlabeled: Corpus, labeled: Corpus | None, rate: float, seed: int
) -> tuple[Corpus, dict]:
    """Synthetic stand-in for pseudo labels: references corrupted at `rate`.

    Isolates label quality from model quality for controlled sweeps; the
    returned corpus has the same shape as `pseudo_label`'s output.
    """
    noisy, n_edits = corrupt_pseudo_labels(unlabeled, rate, seed)
    report: dict = {"n_unlabeled": len(unlabeled), "noise_rate": rate, "n_edits": n_edits}
    if len(unlabeled):
        report["pseudo_wer"] = corpus_wer(
            [u.reference for u in unlabeled], [n.pseudo for n in noisy]
        )
    utts = list(noisy)
    if labeled is not None:
        utts.extend(_self_labeled(labeled))
        report["n_labeled"] = len(labeled)
    return Corpus(utterances=utts, n_vocab=unlabeled.n_vocab, n_features=unlabeled.n_features), report


def train_student(
    labeled: Corpus,
    pseudo: Corpus,
    dev: Corpus,
    cfg: TrainConfig,
    dims: ModelDims = ModelDims(),
    iteration: int = 1,
    on_step=None,
) -> TrainResult:
    """Interleaved training: labeled batches supervised, pseudo batches
    masked (or supervised-on-pseudo-labels when gradient masking is off)."""
    if len(labeled) == 0 or len(pseudo) == 0:
        raise ValueError("student training needs nonempty labeled and pseudo corpora")
    missing = [u.id for u in pseudo if u.pseudo is None]
    if missing:
        raise ValueError(
            f"{len(missing)} utterances are missing pseudo labels (first: {missing[0]!r})"
        )
    if cfg.grad_mask and dims.receptive_halfwidth < math.ceil(cfg.mask_m / 2):
        log.warning(
            "encoder half-width %d < half the mask span %d: masked frames may "
            "lack enough unmasked context to be predicted",
            dims.receptive_halfwidth,
            cfg.mask_m,
        )
    model = build_model(dims, cfg.seed, stream_extra=(iteration,))
    mask_rng = substream(cfg.seed, "mask", iteration)

    def pseudo_job(utt: Utterance):
        if not cfg.grad_mask:
            return utt.pseudo, Supervised()
        plan = sample_mask(utt.n_frames, cfg.mask_p, cfg.mask_m, mask_rng)
        return utt.pseudo, PseudoMasked(plan=plan, gate_polarity=cfg.gate_polarity)

    sources = [
        ("labeled", CyclicSource(labeled, cfg.seed, tag=0), lambda u: (u.reference, Supervised())),
        ("pseudo", CyclicSource(pseudo, cfg.seed, tag=1), pseudo_job),
    ]
    schedule = [0] * cfg.ratio_labeled + [1] * cfg.ratio_pseudo
    return _loop(model, sources, schedule, cfg, dev, iteration=iteration, on_step=on_step)


@dataclass
class IterationReport:
    """Per-iteration table (seed model is row 0) plus artifacts."""

    rows: list[dict]
    models: list[TransducerModel]
    metrics: list[RunMetrics]


def iterate_pseudo_labeling(
    labeled: Corpus,
    unlabeled: Corpus,
    dev: Corpus,
    seed_cfg: TrainConfig,
    student_cfg: TrainConfig,
    dims: ModelDims = ModelDims(),
    n_iters: int = 3,
    test: Corpus | None = None,
) -> IterationReport:
    """Seed, then `n_iters` rounds of label refresh + fresh student."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    seed_res = train_seed(labeled, dev, seed_cfg, dims)
    rows = [
        {
            "iteration": 0,
            "dev_wer": seed_res.metrics.best_dev_wer,
            "test_wer": evaluate_wer(seed_res.model, test) if test is not None else None,
            "pseudo_wer": None,
        }
    ]
    models = [seed_res.model]
    metrics = [seed_res.metrics]
    current = seed_res.model
    for i in range(1, n_iters + 1):
        pseudo, report = pseudo_label(current, unlabeled, labeled)
        res = train_student(labeled, pseudo, dev, student_cfg, dims, iteration=i)
        res.metrics.final_test_wer = evaluate_wer(res.model, test) if test is not None else None
        rows.append(
            {
                "iteration": i,
                "dev_wer": res.metrics.best_dev_wer,
                "test_wer": res.metrics.final_test_wer,
                "pseudo_wer": report.get("pseudo_wer"),
            }
        )
        models.append(res.model)
        metrics.append(res.metrics)
        current = res.model
    return IterationReport(rows=rows, models=models, metrics=metrics)
