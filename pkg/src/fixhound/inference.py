"""Commit-level prediction by averaging file-level probabilities."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .change_builder import build_contextual_change, render_variant_input
from .delta_model import DeltaModel, predict_file
from .repo_miner import NVF, VF, CommitRecord
from .tokenizer import Vocabulary


@dataclass(frozen=True)
class CommitPrediction:
    repo_id: str
    commit_hash: str
    file_probs: tuple[tuple[str, float], ...]
    commit_prob: float
    predicted: str  # VF or NVF
    commit_loc: int  # removed + added lines over all files

    def to_dict(self) -> dict:
        return {
            "repo_id": self.repo_id,
            "commit_hash": self.commit_hash,
            "file_probs": [[p, pr] for p, pr in self.file_probs],
            "commit_prob": self.commit_prob,
            "predicted": self.predicted,
            "commit_loc": self.commit_loc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CommitPrediction":
        return cls(
            repo_id=d["repo_id"],
            commit_hash=d["commit_hash"],
            file_probs=tuple((p, pr) for p, pr in d["file_probs"]),
            commit_prob=d["commit_prob"],
            predicted=d["predicted"],
            commit_loc=d["commit_loc"],
        )


def predict_commit(commit: CommitRecord, model: DeltaModel, vocab: Vocabulary, k: int) -> CommitPrediction:
    """Mean file probability, strict > 0.5 for a VF verdict.

    Files are processed in sorted-path order and summed in 64-bit, so the
    result is bitwise independent of the input file order.
    """
    if not commit.files:
        raise ValueError(f"commit {commit.commit_hash} has no file changes")
    file_probs: list[tuple[str, float]] = []
    for fc in sorted(commit.files, key=lambda f: f.path):
        cc = build_contextual_change(fc, k, commit.label, commit.repo_id, commit.commit_hash)
        vi = render_variant_input(cc, fc, model.variant)
        file_probs.append((fc.path, predict_file(vi, model, vocab)))
    total = 0.0
    for _, p in file_probs:
        total += p
    commit_prob = total / len(file_probs)
    loc = sum(fc.removed_loc + fc.added_loc for fc in commit.files)
    return CommitPrediction(
        repo_id=commit.repo_id,
        commit_hash=commit.commit_hash,
        file_probs=tuple(file_probs),
        commit_prob=commit_prob,
        predicted=VF if commit_prob > 0.5 else NVF,
        commit_loc=loc,
    )


def predict_corpus(commits: Iterable[CommitRecord], model: DeltaModel, vocab: Vocabulary, k: int) -> list[CommitPrediction]:
    """One prediction per commit, input order preserved."""
    return [predict_commit(c, model, vocab, k) for c in commits]


def write_predictions_jsonl(preds: Iterable[CommitPrediction], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_predictions_jsonl(path: str | Path) -> list[CommitPrediction]:
    with open(path, encoding="utf-8") as fh:
        return [CommitPrediction.from_dict(json.loads(line)) for line in fh if line.strip()]
