"""Command-line front end.

One process per command; every command resolves a config (JSON file plus
flag overrides, flags winning), echoes it into a run manifest next to its
outputs, and seeds all randomness from the single --seed via named
substreams. Checkpoints and metrics are bitwise reproducible for a fixed
seed and build; the manifest is the one artifact that records wall-clock
times.

Exit codes: 0 success, 1 usage, 2 bad input (missing file, invalid
config), 3 numerical failure (divergence, non-finite values, failed
gradient checks). Partially written outputs are removed on failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import (
    Corpus,
    CorpusSpec,
    generate_corpus,
    read_corpus,
    write_corpus,
)
from .gradcheck import run_all
from .kernel import BACKEND as KERNEL_BACKEND
from .model import ModelDims, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError
from .train import (
    TrainConfig,
    TrainingDiverged,
    config_hash,
    evaluate_wer,
    iterate_pseudo_labeling,
    noisy_reference_pseudo,
    pseudo_label,
    train_seed,
    train_student,
)

SPLITS = ("labeled", "unlabeled", "dev", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config plumbing


def _dataclass_from(cls, data: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ValueError(f"unknown key {where}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"invalid config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"invalid config {path}: expected a JSON object")
    unknown = set(doc) - {"corpus", "train", "dims"}
    if unknown:
        raise ValueError(f"invalid config {path}: unknown sections {sorted(unknown)}")
    return doc


def resolve_config(args) -> tuple[CorpusSpec, TrainConfig, ModelDims]:
    """Config file sections mirror the dataclass field names; flags win."""
    doc = load_config(getattr(args, "config", None))
    corpus_kw = dict(doc.get("corpus", {}))
    train_kw = dict(doc.get("train", {}))
    dims_kw = dict(doc.get("dims", {}))

    if getattr(args, "seed", None) is not None:
        corpus_kw["seed"] = args.seed
        train_kw["seed"] = args.seed
    if getattr(args, "no_grad_mask", False):
        train_kw["grad_mask"] = False
    for flag, key in (("mask_p", "mask_p"), ("mask_m", "mask_m"), ("workers", "workers")):
        value = getattr(args, flag, None)
        if value is not None:
            train_kw[key] = value
    ratio = getattr(args, "ratio", None)
    if ratio is not None:
        train_kw["ratio_labeled"], train_kw["ratio_pseudo"] = ratio

    spec = _dataclass_from(CorpusSpec, corpus_kw, "corpus")
    cfg = _dataclass_from(TrainConfig, train_kw, "train")
    dims = _dataclass_from(ModelDims, dims_kw, "dims")
    if dims.n_vocab != spec.n_vocab or dims.n_features != spec.n_features:
        raise ValueError(
            f"model dims (vocab {dims.n_vocab}, features {dims.n_features}) do not "
            f"match the corpus ({spec.n_vocab}, {spec.n_features})"
        )
    return spec, cfg, dims


def parse_ratio(text: str) -> tuple[int, int]:
    try:
        left, right = text.split(":")
        return int(left), int(right)
    except ValueError:
        raise UsageError(f"--ratio expects L:U (e.g. 1:9), got {text!r}") from None


def parse_rates(text: str) -> list[float]:
    try:
        rates = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise UsageError(f"--noise-rates expects comma-separated numbers, got {text!r}") from None
    if not rates:
        raise UsageError("--noise-rates needs at least one rate")
    return rates


# ---------------------------------------------------------------------------
# run bookkeeping


class Run:
    """Tracks a command's output files so failures leave no partial runs,
    and writes the manifest that makes the run reproducible."""

    def __init__(self, out_dir: str, command: str, argv: list[str], resolved: dict):
        self.out_dir = out_dir
        self.outputs: list[str] = []
        os.makedirs(out_dir, exist_ok=True)
        self.manifest = {
            "command": command,
            "argv": argv,
            "config": resolved,
            "config_hash": _hash_resolved(resolved),
            "package_version": __version__,
            "kernel_backend": KERNEL_BACKEND,
            "started": _now(),
            "finished": None,
            "outputs": [],
        }
        self._manifest_path = os.path.join(out_dir, "manifest.json")
        self._write_manifest()
        self.outputs.append(self._manifest_path)

    def path(self, name: str) -> str:
        p = os.path.join(self.out_dir, name)
        self.outputs.append(p)
        return p

    def _write_manifest(self):
        tmp = self._manifest_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, self._manifest_path)

    def finish(self):
        self.manifest["finished"] = _now()
        self.manifest["outputs"] = sorted(
            os.path.relpath(p, self.out_dir) for p in self.outputs
        )
        self._write_manifest()

    def discard(self):
        for p in self.outputs:
            try:
                os.unlink(p)
            except OSError:
                pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _hash_resolved(resolved: dict) -> str:
    import hashlib

    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _resolved_dict(spec: CorpusSpec, cfg: TrainConfig, dims: ModelDims) -> dict:
    return {
        "corpus": dataclasses.asdict(spec),
        "train": dataclasses.asdict(cfg),
        "dims": dataclasses.asdict(dims),
    }


def _load_split(corpus_dir: str, split: str, n_vocab: int) -> Corpus:
    path = os.path.join(corpus_dir, f"{split}.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing corpus file {path}")
    return read_corpus(path, n_vocab=n_vocab)


def _write_metrics(run: Run, metrics, prefix: str):
    csv_path, json_path = metrics.write(run.out_dir, prefix)
    run.outputs.extend([csv_path, json_path])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, argv) -> int:
    spec, cfg, dims = resolve_config(args)
    run = Run(args.out, "gen-data", argv, _resolved_dict(spec, cfg, dims))
    try:
        splits = generate_corpus(spec)
        for name in SPLITS:
            write_corpus(run.path(f"{name}.jsonl"), splits[name])
        run.finish()
    except BaseException:
        run.discard()
        raise
    sizes = {name: len(splits[name]) for name in SPLITS}
    print(json.dumps({"out": args.out, "sizes": sizes}))
    return 0


def cmd_train_seed(args, argv) -> int:
    spec, cfg, dims = resolve_config(args)
    run = Run(args.out, "train-seed", argv, _resolved_dict(spec, cfg, dims))
    try:
        labeled = _load_split(args.corpus, "labeled", spec.n_vocab)
        dev = _load_split(args.corpus, "dev", spec.n_vocab)
        result = train_seed(labeled, dev, cfg, dims)
        save_checkpoint(run.path("seed.ckpt"), result.model)
        _write_metrics(run, result.metrics, "seed")
        run.finish()
    except BaseException:
        run.discard()
        raise
    print(
        json.dumps(
            {
                "best_dev_wer": result.metrics.best_dev_wer,
                "best_step": result.metrics.best_step,
                "checkpoint": os.path.join(args.out, "seed.ckpt"),
            }
        )
    )
    return 0


def cmd_pseudo_label(args, argv) -> int:
    spec, cfg, dims = resolve_config(args)
    run = Run(args.out, "pseudo-label", argv, _resolved_dict(spec, cfg, dims))
    try:
        model, _ = load_checkpoint(args.checkpoint)
        unlabeled = _load_split(args.corpus, "unlabeled", spec.n_vocab)
        labeled = _load_split(args.corpus, "labeled", spec.n_vocab)
        pseudo, report = pseudo_label(model, unlabeled, labeled)
        write_corpus(run.path("pseudo.jsonl"), pseudo)
        with open(run.path("pseudo_report.json"), "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        run.finish()
    except BaseException:
        run.discard()
        raise
    print(json.dumps(report))
    return 0


def cmd_train_student(args, argv) -> int:
    spec, cfg, dims = resolve_config(args)
    run = Run(args.out, "train-student", argv, _resolved_dict(spec, cfg, dims))
    try:
        labeled = _load_split(args.corpus, "labeled", spec.n_vocab)
        dev = _load_split(args.corpus, "dev", spec.n_vocab)
        if not os.path.exists(args.pseudo_corpus):
            raise FileNotFoundError(f"missing pseudo corpus {args.pseudo_corpus}")
        pseudo = read_corpus(args.pseudo_corpus, n_vocab=spec.n_vocab)
        result = train_student(labeled, pseudo, dev, cfg, dims, iteration=args.iteration)
        save_checkpoint(run.path("student.ckpt"), result.model)
        _write_metrics(run, result.metrics, "student")
        run.finish()
    except BaseException:
        run.discard()
        raise
    print(
        json.dumps(
            {
                "best_dev_wer": result.metrics.best_dev_wer,
                "best_step": result.metrics.best_step,
                "checkpoint": os.path.join(args.out, "student.ckpt"),
            }
        )
    )
    return 0


def cmd_iterate(args, argv) -> int:
    spec, cfg, dims = resolve_config(args)
    run = Run(args.out, "iterate", argv, _resolved_dict(spec, cfg, dims))
    try:
        labeled = _load_split(args.corpus, "labeled", spec.n_vocab)
        unlabeled = _load_split(args.corpus, "unlabeled", spec.n_vocab)
        dev = _load_split(args.corpus, "dev", spec.n_vocab)
        test = _load_split(args.corpus, "test", spec.n_vocab)
        report = iterate_pseudo_labeling(
            labeled, unlabeled, dev, cfg, cfg, dims, n_iters=args.iters, test=test
        )
        for i, model in enumerate(report.models):
            name = "seed.ckpt" if i == 0 else f"student_iter{i}.ckpt"
            save_checkpoint(run.path(name), model)
        for i, metrics in enumerate(report.metrics):
            _write_metrics(run, metrics, "seed" if i == 0 else f"student_iter{i}")
        with open(run.path("iterations.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write("iteration,dev_wer,test_wer,pseudo_wer\n")
            for row in report.rows:
                cells = [str(row["iteration"])] + [
                    "" if row[k] is None else repr(row[k])
                    for k in ("dev_wer", "test_wer", "pseudo_wer")
                ]
                f.write(",".join(cells) + "\n")
        run.finish()
    except BaseException:
        run.discard()
        raise
    print(json.dumps({"rows": report.rows}))
    return 0


def cmd_eval(args, argv) -> int:
    spec, cfg, dims = resolve_config(args)
    scores: dict[str, float] = {}
    model, _ = load_checkpoint(args.checkpoint)
    if os.path.isdir(args.corpus):
        for split in ("dev", "test"):
            corpus = _load_split(args.corpus, split, spec.n_vocab)
            scores[split] = evaluate_wer(model, corpus)
    else:
        if not os.path.exists(args.corpus):
            raise FileNotFoundError(f"missing corpus {args.corpus}")
        corpus = read_corpus(args.corpus, n_vocab=spec.n_vocab)
        scores[os.path.basename(args.corpus)] = evaluate_wer(model, corpus)
    if args.out is not None:
        run = Run(args.out, "eval", argv, _resolved_dict(spec, cfg, dims))
        try:
            with open(run.path("eval.json"), "w", encoding="utf-8") as f:
                json.dump(scores, f, indent=2, sort_keys=True)
                f.write("\n")
            run.finish()
        except BaseException:
            run.discard()
            raise
    print(json.dumps(scores))
    return 0


def cmd_gradcheck(args, argv) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_all(seed=seed)
    ok = True
    for res in results:
        print(res.line())
        ok = ok and res.passed
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
        return 3
    print("gradcheck OK")
    return 0


def cmd_noise_sweep(args, argv) -> int:
    spec, cfg, dims = resolve_config(args)
    rates = args.noise_rates
    run = Run(args.out, "noise-sweep", argv, _resolved_dict(spec, cfg, dims))
    try:
        labeled = _load_split(args.corpus, "labeled", spec.n_vocab)
        unlabeled = _load_split(args.corpus, "unlabeled", spec.n_vocab)
        dev = _load_split(args.corpus, "dev", spec.n_vocab)
        rows = []
        for rate in rates:
            pseudo, report = noisy_reference_pseudo(unlabeled, labeled, rate, cfg.seed)
            wers = {}
            for grad_mask in (True, False):
                cfg_i = dataclasses.replace(cfg, grad_mask=grad_mask)
                result = train_student(labeled, pseudo, dev, cfg_i, dims, iteration=1)
                tag = "grad_mask" if grad_mask else "no_mask"
                wers[tag] = result.metrics.best_dev_wer
                _write_metrics(run, result.metrics, f"rho{rate:g}_{tag}")
            rows.append(
                {
                    "noise_rate": rate,
                    "pseudo_wer": report.get("pseudo_wer"),
                    "dev_wer_grad_mask": wers["grad_mask"],
                    "dev_wer_no_mask": wers["no_mask"],
                }
            )
        with open(run.path("noise_sweep.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write("noise_rate,dev_wer_grad_mask,dev_wer_no_mask\n")
            for row in rows:
                f.write(
                    f"{row['noise_rate']:g},{row['dev_wer_grad_mask']!r},"
                    f"{row['dev_wer_no_mask']!r}\n"
                )
        run.finish()
    except BaseException:
        run.discard()
        raise
    print(json.dumps({"rows": rows}))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p: _Parser, *, out_required=True):
    p.add_argument("--config", help="JSON config file (sections: corpus, train, dims)")
    p.add_argument("--seed", type=int, help="master seed for all substreams")
    if out_required:
        p.add_argument("--out", required=True, help="output directory for this run")


def _add_train_flags(p: _Parser):
    p.add_argument("--no-grad-mask", action="store_true", help="disable the gradient mask")
    p.add_argument("--mask-p", type=float, dest="mask_p", help="span start probability")
    p.add_argument("--mask-m", type=int, dest="mask_m", help="span length in frames")
    p.add_argument("--ratio", type=parse_ratio, help="labeled:pseudo batch ratio, e.g. 1:9")
    p.add_argument("--workers", type=int, help="worker threads per training step")


def build_parser() -> _Parser:
    parser = _Parser(prog="gradmask", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gradmask {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate the four synthetic corpus splits")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-seed", help="supervised training on the labeled split")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="directory holding <split>.jsonl files")
    p.add_argument("--workers", type=int, help="worker threads per training step")
    p.set_defaults(fn=cmd_train_seed)

    p = sub.add_parser("pseudo-label", help="label the unlabeled split with a checkpoint")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_pseudo_label)

    p = sub.add_parser("train-student", help="interleaved training on labeled + pseudo data")
    p.add_argument("pseudo_corpus", help="pseudo-labeled corpus file (from pseudo-label)")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--iteration", type=int, default=1, help="iteration index for seeding")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("iterate", help="seed + repeated pseudo-label/student rounds")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--iters", type=int, default=3)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_iterate)

    p = sub.add_parser("eval", help="decode a corpus and report WER")
    p.add_argument("--config", help="JSON config file (sections: corpus, train, dims)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="optional output directory for eval.json")
    p.add_argument("--corpus", required=True, help="corpus directory or single .jsonl file")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("noise-sweep", help="masked vs unmasked students across noise rates")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument(
        "--noise-rates",
        type=parse_rates,
        dest="noise_rates",
        default=[0.0, 0.3],
        help="comma-separated label noise rates (default 0,0.3)",
    )
    _add_train_flags(p)
    p.set_defaults(fn=cmd_noise_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.fn(args, argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
