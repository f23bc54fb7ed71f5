"""Dataset splitting, the joint single-phase training loop, and checkpoints.

One AdamW optimizer drives every parameter (both encoders and the head)
from the first step; there is no frozen-embedding stage. Checkpoints use
a fixed little-endian binary layout and round-trip bit-exactly, so two
runs with the same seed and config produce byte-identical files.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import delta_model as dm
from .change_builder import EMBED_SUBTRACT_DUO
from .delta_model import DeltaModel, EncodedBatch
from .encoder import EncoderConfig, Params
from .repo_miner import VF, CommitRecord

CROSS_PROJECT = "CrossProject"
TEMPORAL = "Temporal"

CHECKPOINT_MAGIC = b"VFDC"
CHECKPOINT_VERSION = 1


class SplitError(Exception):
    pass


class TrainingError(Exception):
    def __init__(self, message: str, step: int | None = None, batch_indices=None):
        super().__init__(message)
        self.step = step
        self.batch_indices = batch_indices


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class SplitSpec:
    strategy: str
    # CrossProject: explicit repo partitions
    train_repos: tuple[str, ...] = ()
    val_repos: tuple[str, ...] = ()
    test_repos: tuple[str, ...] = ()
    # Temporal: VF fraction boundaries plus the held-out test range start
    train_frac: float = 0.9
    val_frac: float = 0.1
    test_start: int | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "train_repos": list(self.train_repos),
            "val_repos": list(self.val_repos),
            "test_repos": list(self.test_repos),
            "train_frac": self.train_frac,
            "val_frac": self.val_frac,
            "test_start": self.test_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            strategy=d["strategy"],
            train_repos=tuple(d.get("train_repos", ())),
            val_repos=tuple(d.get("val_repos", ())),
            test_repos=tuple(d.get("test_repos", ())),
            train_frac=d.get("train_frac", 0.9),
            val_frac=d.get("val_frac", 0.1),
            test_start=d.get("test_start"),
        )


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 128
    micro_batch: int | None = None  # gradient-accumulation chunk size
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def split_dataset(records: list[CommitRecord], spec: SplitSpec, seed: int = 0) -> dict[str, list[CommitRecord]]:
    """Partition commit records per the split spec; deterministic."""
    del seed  # both strategies are deterministic given the spec
    if spec.strategy == CROSS_PROJECT:
        return _split_cross_project(records, spec)
    if spec.strategy == TEMPORAL:
        return _split_temporal(records, spec)
    raise SplitError(f"unknown split strategy {spec.strategy!r}")


def _split_cross_project(records, spec: SplitSpec):
    assignment: dict[str, str] = {}
    for part, repos in (("train", spec.train_repos), ("val", spec.val_repos), ("test", spec.test_repos)):
        for repo in repos:
            if repo in assignment:
                raise SplitError(f"repo {repo!r} listed in both {assignment[repo]} and {part}")
            assignment[repo] = part
    out = {"train": [], "val": [], "test": []}
    for rec in records:
        part = assignment.get(rec.repo_id)
        if part is None:
            raise SplitError(f"repo {rec.repo_id!r} has commits but is listed in no partition")
        out[part].append(rec)
    return out


def _split_temporal(records, spec: SplitSpec):
    if spec.test_start is None:
        raise SplitError("Temporal split requires test_start")
    pre = [r for r in records if r.timestamp < spec.test_start]
    test = [r for r in records if r.timestamp >= spec.test_start]
    vf = sorted((r for r in pre if r.label == VF), key=lambda r: (r.timestamp, r.repo_id, r.commit_hash))
    n_train = int(len(vf) * spec.train_frac)
    # extend past timestamp ties so the train/val boundary is strict
    while 0 < n_train < len(vf) and vf[n_train].timestamp == vf[n_train - 1].timestamp:
        n_train += 1
    boundary = vf[n_train - 1].timestamp if n_train > 0 else None
    out = {"train": [], "val": [], "test": list(test)}
    for rec in pre:
        if boundary is not None and rec.timestamp <= boundary:
            out["train"].append(rec)
        else:
            out["val"].append(rec)
    for part in out.values():
        part.sort(key=lambda r: (r.timestamp, r.repo_id, r.commit_hash))
    return out


class AdamW:
    """Decoupled-weight-decay adaptive-moments optimizer over a flat param dict."""

    def __init__(self, params: Params, config: TrainConfig):
        self.params = params
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Params) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            g = grads[name].astype(p.dtype)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            p -= p.dtype.type(c.learning_rate) * (update + p.dtype.type(c.weight_decay) * p)


def f1_at_half(probs: np.ndarray, labels: np.ndarray) -> float:
    pred = probs > 0.5
    actual = labels > 0.5
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    fn = int(np.sum(~pred & actual))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


@dataclass
class TrainResult:
    model: DeltaModel
    loss_log: list[tuple[int, int, float, str]]  # (step, epoch, loss, split)
    val_history: list[tuple[int, float]]  # (epoch, val F1)
    best_epoch: int
    best_val_f1: float


def _accumulate(model: DeltaModel, batch: EncodedBatch, micro: int | None):
    """Loss and grads over a logical batch, optionally in micro-batch chunks."""
    n = batch.size
    if micro is None or micro >= n:
        return dm.loss_and_grads(model, batch)[:2]
    total_loss = 0.0
    total_grads: Params | None = None
    for lo in range(0, n, micro):
        chunk = batch.slice(lo, min(lo + micro, n))
        loss, grads, _ = dm.loss_and_grads(model, chunk)
        w = chunk.size / n
        total_loss += loss * w
        if total_grads is None:
            total_grads = {k: g * w for k, g in grads.items()}
        else:
            for k, g in grads.items():
                total_grads[k] += g * w
    return total_loss, total_grads


def predict_in_chunks(model: DeltaModel, batch: EncodedBatch, chunk: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, batch.size, chunk):
        out.append(dm.predict_batch(model, batch.slice(lo, min(lo + chunk, batch.size))))
    return np.concatenate(out) if out else np.zeros(0)


def train(
    variant: str,
    enc_config: EncoderConfig,
    train_batch: EncodedBatch,
    val_batch: EncodedBatch,
    config: TrainConfig,
    max_steps: int | None = None,
) -> TrainResult:
    """Joint single-phase optimization; returns the best-validation-F1 model.

    The per-step training loss and per-epoch validation loss are logged as
    (step, epoch, loss, split) rows.
    """
    if train_batch.size == 0 or val_batch.size == 0:
        raise TrainingError("train and validation sets must be non-empty")
    if not np.any(train_batch.labels > 0.5):
        raise TrainingError("training set contains no VF example")

    model = dm.init_model(variant, enc_config, config.seed)
    opt = AdamW(model.all_params(), config)
    rng = np.random.default_rng(config.seed)

    loss_log: list[tuple[int, int, float, str]] = []
    val_history: list[tuple[int, float]] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state: Params | None = None
    step = 0
    stop = False

    for epoch in range(config.epochs):
        perm = rng.permutation(train_batch.size)
        for lo in range(0, train_batch.size, config.batch_size):
            batch = train_batch.take(perm[lo : lo + config.batch_size])
            loss, grads = _accumulate(model, batch, config.micro_batch)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at step {step}",
                    step=step,
                    batch_indices=perm[lo : lo + config.batch_size].tolist(),
                )
            step += 1
            opt.step(grads)
            loss_log.append((step, epoch, float(loss), "train"))
            if max_steps is not None and step >= max_steps:
                stop = True
                break

        val_probs = predict_in_chunks(model, val_batch)
        val_loss = dm.batch_loss(val_probs, val_batch.labels)
        val_f1 = f1_at_half(val_probs, val_batch.labels)
        loss_log.append((step, epoch, float(val_loss), "val"))
        val_history.append((epoch, val_f1))
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_state = copy.deepcopy(model.all_params())
        if stop:
            break

    assert best_state is not None
    for name, arr in model.all_params().items():
        arr[...] = best_state[name]
    return TrainResult(model=model, loss_log=loss_log, val_history=val_history, best_epoch=best_epoch, best_val_f1=best_f1)


def write_loss_log(loss_log, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,epoch,loss,split\n")
        for step, epoch, loss, split in loss_log:
            fh.write(f"{step},{epoch},{loss!r},{split}\n")


def save_checkpoint(model: DeltaModel, path: str | Path, extra_config: dict | None = None) -> None:
    """Write the binary checkpoint (magic VFDC, versioned, little-endian)."""
    config = {
        "variant": model.variant,
        "encoder": model.config.to_dict(),
        "shared_encoders": model.shared_encoders,
        "extra": extra_config or {},
    }
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(config_bytes)))
        fh.write(config_bytes)
        params = model.all_params()
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[DeltaModel, dict]:
    """Read a checkpoint; returns the model and the extra config dict."""
    data = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated {what} at offset {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    (config_len,) = struct.unpack("<Q", take(8, "config length"))
    config = json.loads(take(config_len, "config").decode("utf-8"))

    tensors: Params = {}
    while off < len(data):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r} at offset {off}")
        (rank,) = struct.unpack("<B", take(1, "tensor rank"))
        shape = tuple(struct.unpack("<Q", take(8, "tensor dim"))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(count * 4, f"tensor {name!r} values")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    enc_config = EncoderConfig.from_dict(config["encoder"])
    before = {k.removeprefix("enc_before."): v for k, v in tensors.items() if k.startswith("enc_before.")}
    head = {k.removeprefix("head."): v for k, v in tensors.items() if k.startswith("head.")}
    if config["shared_encoders"]:
        after = before
    else:
        after = {k.removeprefix("enc_after."): v for k, v in tensors.items() if k.startswith("enc_after.")}
    model = DeltaModel(
        variant=config["variant"],
        config=enc_config,
        encoder_before=before,
        encoder_after=after,
        head=head,
    )
    return model, config.get("extra", {})
