"""Operator command line: mine, build, train, predict, evaluate, ablate.

All commands read one JSON config file; individual flags override config
values, which override defaults. Every command writes a manifest (config
digest, seed, package version) next to its outputs, and a lock file keeps
two commands from sharing a workdir concurrently.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from . import delta_model as dm
from . import trainer as tr
from .change_builder import EMBED_SUBTRACT_DUO, VARIANTS, BuiltExample, build_example
from .delta_model import EncodedBatch
from .encoder import EncoderConfig
from .evaluation import EvalReport, emit_report, evaluate, write_report
from .inference import predict_corpus, read_predictions_jsonl, write_predictions_jsonl
from .repo_miner import (
    NVF,
    VF,
    CommitRecord,
    LabelError,
    MiningError,
    attach_labels,
    downsample_nvf,
    load_labels,
    mine_repository,
    read_commits_jsonl,
    write_commits_jsonl,
)
from .tokenizer import Vocabulary, train_vocab
from .trainer import SplitError, SplitSpec, TrainConfig, TrainingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    repos: list[str] = field(default_factory=list)
    labels_file: str = ""
    workdir: str = "fixhound_out"
    k: int = 3
    max_len: int = 512
    vocab_size: int = 512
    encoder: dict = field(default_factory=lambda: {"dim": 32, "layers": 1, "heads": 2, "ffn_mult": 2})
    variant: str = EMBED_SUBTRACT_DUO
    train: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: {"strategy": "Temporal", "test_start": None})
    cost_effort_levels: list[float] = field(default_factory=lambda: [5, 20])
    downsample_ratio: float = 38.0
    seed: int = 0
    since: int = 0
    until: int = 2**62

    def validate(self) -> None:
        if self.k < 0:
            raise UsageError("k must be non-negative")
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for level in self.cost_effort_levels:
            if not 0 < level <= 100:
                raise UsageError(f"CostEffort level {level} outside (0, 100]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def train_config(self, seed: int | None = None) -> TrainConfig:
        tc = TrainConfig(**self.train)
        tc.seed = self.seed if seed is None else seed
        return tc

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, max_len=self.max_len, **self.encoder)

    def split_spec(self) -> SplitSpec:
        return SplitSpec.from_dict(self.split)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise UsageError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


@contextlib.contextmanager
def workdir_lock(workdir: Path):
    workdir.mkdir(parents=True, exist_ok=True)
    lock = workdir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"workdir {workdir} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(workdir: Path, command: str, cfg: RunConfig, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "outputs": outputs,
    }
    (workdir / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- mine

def cmd_mine(cfg: RunConfig, workdir: Path) -> int:
    if not cfg.labels_file or not Path(cfg.labels_file).exists():
        raise DataError(f"labels file not found: {cfg.labels_file!r}")
    labels = load_labels(cfg.labels_file)
    records: list[CommitRecord] = []
    for repo in cfg.repos:
        if not Path(repo).exists():
            raise DataError(f"repository path not found: {repo}")
        records.extend(attach_labels(mine_repository(repo, cfg.since, cfg.until), labels))
    out = workdir / "commits.jsonl"
    write_commits_jsonl(records, out)
    counts = {
        "VF": sum(1 for r in records if r.label == VF),
        "NVF": sum(1 for r in records if r.label == NVF),
        "commits": len(records),
        "files": sum(len(r.files) for r in records),
    }
    (workdir / "mine_summary.json").write_text(json.dumps(counts, indent=2), encoding="utf-8")
    print(f"{'':12s}{'VF':>8s}{'NVF':>10s}{'Commits':>10s}{'Files':>10s}")
    print(f"{'mined':12s}{counts['VF']:>8d}{counts['NVF']:>10d}{counts['commits']:>10d}{counts['files']:>10d}")
    write_manifest(workdir, "mine", cfg, ["commits.jsonl", "mine_summary.json"])
    return EXIT_OK


# ---------------------------------------------------------------- build

def _build_examples(commits: list[CommitRecord], k: int) -> list[BuiltExample]:
    out = []
    for rec in commits:
        for fc in rec.files:
            out.append(build_example(fc, k, rec.label, rec.repo_id, rec.commit_hash))
    return out


def _split_and_downsample(cfg: RunConfig, commits: list[CommitRecord]):
    parts = tr.split_dataset(commits, cfg.split_spec(), cfg.seed)
    for name in ("train", "val"):
        if any(r.label == VF for r in parts[name]):
            parts[name] = downsample_nvf(parts[name], cfg.downsample_ratio, cfg.seed)
    return parts


def write_examples_jsonl(examples: list[BuiltExample], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


def read_examples_jsonl(path: Path) -> list[BuiltExample]:
    with open(path, encoding="utf-8") as fh:
        return [BuiltExample.from_dict(json.loads(line)) for line in fh if line.strip()]


def cmd_build(cfg: RunConfig, workdir: Path) -> int:
    commits_path = workdir / "commits.jsonl"
    if not commits_path.exists():
        raise DataError(f"mined commits not found: {commits_path} (run mine first)")
    commits = read_commits_jsonl(commits_path)
    parts = _split_and_downsample(cfg, commits)
    outputs = []
    for name in ("train", "val"):
        examples = _build_examples(parts[name], cfg.k)
        write_examples_jsonl(examples, workdir / f"{name}.jsonl")
        outputs.append(f"{name}.jsonl")
    write_commits_jsonl(parts["test"], workdir / "test_commits.jsonl")
    outputs.append("test_commits.jsonl")
    header = {"k": cfg.k, "variant_agnostic": True, "source_digest": _sha256_file(commits_path)}
    (workdir / "built_header.json").write_text(json.dumps(header, indent=2), encoding="utf-8")
    outputs.append("built_header.json")
    write_manifest(workdir, "build", cfg, outputs)
    print(
        f"built train={len(parts['train'])} val={len(parts['val'])} "
        f"test={len(parts['test'])} commits at k={cfg.k}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- train

def _encode_examples(examples: list[BuiltExample], variant: str, vocab: Vocabulary, max_len: int) -> EncodedBatch:
    from .change_builder import VariantInput

    seqs = []
    labels = []
    for ex in examples:
        vi = VariantInput(variant=variant, texts=ex.variant_texts(variant))
        seqs.append(dm.encode_input(vi, vocab, max_len))
        labels.append(1.0 if ex.label == VF else 0.0)
    return dm.batch_from_sequences(seqs, labels)


def _train_one(
    cfg: RunConfig,
    variant: str,
    train_examples: list[BuiltExample],
    val_examples: list[BuiltExample],
    vocab: Vocabulary,
) -> tr.TrainResult:
    enc_config = cfg.encoder_config(vocab.size)
    train_batch = _encode_examples(train_examples, variant, vocab, cfg.max_len)
    val_batch = _encode_examples(val_examples, variant, vocab, cfg.max_len)
    return tr.train(variant, enc_config, train_batch, val_batch, cfg.train_config())


def _corpus(examples: list[BuiltExample]) -> list[str]:
    texts = []
    for ex in examples:
        texts.append(ex.code_before)
        texts.append(ex.code_after)
    return texts


def cmd_train(cfg: RunConfig, workdir: Path) -> int:
    train_path = workdir / "train.jsonl"
    val_path = workdir / "val.jsonl"
    if not train_path.exists() or not val_path.exists():
        raise DataError(f"built dataset not found in {workdir} (run build first)")
    train_examples = read_examples_jsonl(train_path)
    val_examples = read_examples_jsonl(val_path)
    vocab = train_vocab(_corpus(train_examples), cfg.vocab_size, cfg.seed)
    vocab.save(workdir / "vocab.json")
    result = _train_one(cfg, cfg.variant, train_examples, val_examples, vocab)
    extra = {"k": cfg.k, "max_len": cfg.max_len, "seed": cfg.seed}
    tr.save_checkpoint(result.model, workdir / "checkpoint.bin", extra)
    tr.write_loss_log(result.loss_log, workdir / "loss_log.csv")
    write_manifest(workdir, "train", cfg, ["checkpoint.bin", "vocab.json", "loss_log.csv"])
    print(f"trained {cfg.variant}: best epoch {result.best_epoch}, val F1 {result.best_val_f1:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- predict / evaluate

def _load_model(cfg: RunConfig, checkpoint_path: Path):
    if not checkpoint_path.exists():
        raise DataError(f"checkpoint not found: {checkpoint_path}")
    model, extra = tr.load_checkpoint(checkpoint_path)
    if extra.get("max_len") != cfg.max_len:
        raise DataError(
            f"checkpoint max_len {extra.get('max_len')} does not match configured max_len {cfg.max_len}"
        )
    if extra.get("k") != cfg.k:
        raise DataError(f"checkpoint context window k={extra.get('k')} does not match configured k={cfg.k}")
    return model, extra


def cmd_predict(cfg: RunConfig, workdir: Path, checkpoint: str | None) -> int:
    ckpt_path = Path(checkpoint) if checkpoint else workdir / "checkpoint.bin"
    model, extra = _load_model(cfg, ckpt_path)
    vocab_path = workdir / "vocab.json"
    if not vocab_path.exists():
        raise DataError(f"vocabulary not found: {vocab_path}")
    vocab = Vocabulary.load(vocab_path)
    test_path = workdir / "test_commits.jsonl"
    if not test_path.exists():
        raise DataError(f"test commits not found: {test_path} (run build first)")
    commits = read_commits_jsonl(test_path)
    preds = predict_corpus(commits, model, vocab, extra["k"])
    write_predictions_jsonl(preds, workdir / "predictions.jsonl")
    write_manifest(workdir, "predict", cfg, ["predictions.jsonl"])
    print(f"predicted {len(preds)} commits")
    return EXIT_OK


def _labels_from_commits(commits: list[CommitRecord]) -> dict[tuple[str, str], str]:
    return {(c.repo_id, c.commit_hash): c.label for c in commits}


def cmd_evaluate(cfg: RunConfig, workdir: Path, predictions: str | None) -> int:
    preds_path = Path(predictions) if predictions else workdir / "predictions.jsonl"
    if not preds_path.exists():
        raise DataError(f"predictions not found: {preds_path}")
    test_path = workdir / "test_commits.jsonl"
    if not test_path.exists():
        raise DataError(f"test commits not found: {test_path}")
    preds = read_predictions_jsonl(preds_path)
    labels = _labels_from_commits(read_commits_jsonl(test_path))
    report = evaluate(preds, labels, cfg.cost_effort_levels)
    reports = {cfg.variant: report}
    write_report(reports, workdir / "report.csv", "csv", cfg.cost_effort_levels)
    write_report(reports, workdir / "report.json", "json", cfg.cost_effort_levels)
    print(emit_report(reports, "text", cfg.cost_effort_levels), end="")
    write_manifest(workdir, "evaluate", cfg, ["report.csv", "report.json"])
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def _run_variant(cfg: RunConfig, variant: str, parts, vocab: Vocabulary, workdir: Path, tag: str | None = None) -> EvalReport:
    tag = tag or variant
    train_examples = _build_examples(parts["train"], cfg.k)
    val_examples = _build_examples(parts["val"], cfg.k)
    result = _train_one(cfg, variant, train_examples, val_examples, vocab)
    tr.save_checkpoint(result.model, workdir / f"checkpoint_{tag}.bin", {"k": cfg.k, "max_len": cfg.max_len, "seed": cfg.seed})
    tr.write_loss_log(result.loss_log, workdir / f"loss_log_{tag}.csv")
    preds = predict_corpus(parts["test"], result.model, vocab, cfg.k)
    write_predictions_jsonl(preds, workdir / f"predictions_{tag}.jsonl")
    labels = _labels_from_commits(parts["test"])
    return evaluate(preds, labels, cfg.cost_effort_levels)


def cmd_ablate(cfg: RunConfig, workdir: Path, sweep_k: list[int] | None) -> int:
    commits_path = workdir / "commits.jsonl"
    if not commits_path.exists():
        raise DataError(f"mined commits not found: {commits_path} (run mine first)")
    commits = read_commits_jsonl(commits_path)
    parts = _split_and_downsample(cfg, commits)
    base_train = _build_examples(parts["train"], cfg.k)
    vocab = train_vocab(_corpus(base_train), cfg.vocab_size, cfg.seed)
    vocab.save(workdir / "vocab.json")

    if sweep_k is not None:
        reports: dict[str, EvalReport] = {}
        for k in sweep_k:
            sub = RunConfig(**{**cfg.to_dict(), "k": k})
            reports[f"{cfg.variant}@k={k}"] = _run_variant(sub, cfg.variant, parts, vocab, workdir, tag=f"{cfg.variant}_k{k}")
            write_report(reports, workdir / "sweep_report.csv", "csv", cfg.cost_effort_levels)
        print(emit_report(reports, "text", cfg.cost_effort_levels), end="")
        write_manifest(workdir, "ablate", cfg, ["sweep_report.csv"])
        return EXIT_OK

    reports = {}
    for variant in VARIANTS:
        reports[variant] = _run_variant(cfg, variant, parts, vocab, workdir)
        # partial results stay on disk if a later variant fails
        write_report(reports, workdir / "ablation_report.csv", "csv", cfg.cost_effort_levels)
    write_report(reports, workdir / "ablation_report.json", "json", cfg.cost_effort_levels)
    print(emit_report(reports, "text", cfg.cost_effort_levels), end="")
    write_manifest(workdir, "ablate", cfg, ["ablation_report.csv", "ablation_report.json"])
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fixhound", description="Silent vulnerability-fix detection pipeline")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--k", type=int, help="override context window size")
    parser.add_argument("--variant", help="override model variant")
    parser.add_argument("--out", help="override workdir")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("mine", help="mine commit records from configured repositories")
    sub.add_parser("build", help="split, downsample, and cut context windows")
    sub.add_parser("train", help="train the configured variant")
    p_predict = sub.add_parser("predict", help="predict commit probabilities for the test split")
    p_predict.add_argument("--checkpoint", help="checkpoint path (default workdir/checkpoint.bin)")
    p_eval = sub.add_parser("evaluate", help="score predictions against labels")
    p_eval.add_argument("--predictions", help="predictions path (default workdir/predictions.jsonl)")
    p_ablate = sub.add_parser("ablate", help="train and evaluate all six variants")
    p_ablate.add_argument("--sweep-k", help="comma-separated context sizes; sweep the configured variant instead")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, {"seed": args.seed, "k": args.k, "variant": args.variant, "workdir": args.out})
        workdir = Path(cfg.workdir)
        sweep_k = None
        if getattr(args, "sweep_k", None):
            try:
                sweep_k = [int(x) for x in args.sweep_k.split(",") if x.strip()]
            except ValueError:
                raise UsageError(f"bad --sweep-k list {args.sweep_k!r}")
        with workdir_lock(workdir):
            if args.command == "mine":
                return cmd_mine(cfg, workdir)
            if args.command == "build":
                return cmd_build(cfg, workdir)
            if args.command == "train":
                return cmd_train(cfg, workdir)
            if args.command == "predict":
                return cmd_predict(cfg, workdir, args.checkpoint)
            if args.command == "evaluate":
                return cmd_evaluate(cfg, workdir, args.predictions)
            if args.command == "ablate":
                return cmd_ablate(cfg, workdir, sweep_k)
            raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MiningError, LabelError, SplitError, tr.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
