"""Mine commit-level change records from local git repositories.

Commits are decomposed into per-file line diffs (hunks) together with the
full pre- and post-change file contents, so downstream stages can cut
context windows of any size without touching git again. Labels come from
an offline CSV feed mapping (repo_id, commit_hash) to a vulnerability id.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import subprocess
from dataclasses import dataclass, field, replace
from difflib import SequenceMatcher
from pathlib import Path
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

VF = "VF"
NVF = "NVF"

# Bytes of file head inspected for the binary heuristic (NUL byte sniff).
_BINARY_SNIFF_BYTES = 8000


class MiningError(Exception):
    """Fatal repository-level problem (not a git repo, unreadable path)."""


class LabelError(Exception):
    """Malformed or inconsistent label feed."""


@dataclass(frozen=True)
class Hunk:
    old_start: int  # 1-based; for pure insertions, the line the insert precedes
    removed_lines: tuple[str, ...]
    new_start: int
    added_lines: tuple[str, ...]

    def __post_init__(self):
        if not self.removed_lines and not self.added_lines:
            raise ValueError("hunk with neither removed nor added lines")

    def to_dict(self) -> dict:
        return {
            "old_start": self.old_start,
            "removed_lines": list(self.removed_lines),
            "new_start": self.new_start,
            "added_lines": list(self.added_lines),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hunk":
        return cls(
            old_start=d["old_start"],
            removed_lines=tuple(d["removed_lines"]),
            new_start=d["new_start"],
            added_lines=tuple(d["added_lines"]),
        )


@dataclass(frozen=True)
class FileChange:
    path: str
    hunks: tuple[Hunk, ...]
    old_file_lines: tuple[str, ...]
    new_file_lines: tuple[str, ...]
    removed_loc: int
    added_loc: int

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "hunks": [h.to_dict() for h in self.hunks],
            "old_file_lines": list(self.old_file_lines),
            "new_file_lines": list(self.new_file_lines),
            "removed_loc": self.removed_loc,
            "added_loc": self.added_loc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FileChange":
        return cls(
            path=d["path"],
            hunks=tuple(Hunk.from_dict(h) for h in d["hunks"]),
            old_file_lines=tuple(d["old_file_lines"]),
            new_file_lines=tuple(d["new_file_lines"]),
            removed_loc=d["removed_loc"],
            added_loc=d["added_loc"],
        )


@dataclass(frozen=True)
class CommitRecord:
    repo_id: str
    commit_hash: str
    timestamp: int  # UTC seconds
    label: str  # VF or NVF
    files: tuple[FileChange, ...]

    def to_dict(self) -> dict:
        return {
            "repo_id": self.repo_id,
            "commit_hash": self.commit_hash,
            "timestamp": self.timestamp,
            "label": self.label,
            "files": [f.to_dict() for f in self.files],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CommitRecord":
        return cls(
            repo_id=d["repo_id"],
            commit_hash=d["commit_hash"],
            timestamp=d["timestamp"],
            label=d["label"],
            files=tuple(FileChange.from_dict(f) for f in d["files"]),
        )


@dataclass
class LabelMap:
    entries: dict[tuple[str, str], str] = field(default_factory=dict)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def diff_lines(old: tuple[str, ...] | list[str], new: tuple[str, ...] | list[str]) -> tuple[Hunk, ...]:
    """Line-level diff of two file versions as a tuple of hunks.

    Hunks are sorted by old-file position and non-overlapping; applying
    them to `old` reproduces `new` (see apply_hunks).
    """
    matcher = SequenceMatcher(a=list(old), b=list(new), autojunk=False)
    hunks = []
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag == "equal":
            continue
        hunks.append(
            Hunk(
                old_start=i1 + 1,
                removed_lines=tuple(old[i1:i2]),
                new_start=j1 + 1,
                added_lines=tuple(new[j1:j2]),
            )
        )
    return tuple(hunks)


def apply_hunks(old: tuple[str, ...], hunks: tuple[Hunk, ...]) -> tuple[str, ...]:
    """Reconstruct the new file version from the old one plus hunks."""
    out: list[str] = []
    cursor = 0  # 0-based index into old
    for h in hunks:
        start = h.old_start - 1
        out.extend(old[cursor:start])
        out.extend(h.added_lines)
        cursor = start + len(h.removed_lines)
    out.extend(old[cursor:])
    return tuple(out)


def _split_lines(text: str) -> tuple[str, ...]:
    if not text:
        return ()
    if text.endswith("\n"):
        text = text[:-1]
    return tuple(text.split("\n"))


def _git(repo_path: Path, *args: str) -> bytes:
    proc = subprocess.run(
        ["git", "-C", str(repo_path), *args],
        capture_output=True,
        check=True,
    )
    return proc.stdout


def _is_binary(blob: bytes) -> bool:
    return b"\x00" in blob[:_BINARY_SNIFF_BYTES]


def _file_change(repo_path: Path, commit: str, status: str, path: str) -> FileChange | None:
    old_blob = b"" if status == "A" else _git(repo_path, "show", f"{commit}^:{path}")
    new_blob = b"" if status == "D" else _git(repo_path, "show", f"{commit}:{path}")
    if _is_binary(old_blob) or _is_binary(new_blob):
        return None
    old_lines = _split_lines(old_blob.decode("utf-8", errors="replace"))
    new_lines = _split_lines(new_blob.decode("utf-8", errors="replace"))
    hunks = diff_lines(old_lines, new_lines)
    if not hunks:
        return None
    removed = sum(len(h.removed_lines) for h in hunks)
    added = sum(len(h.added_lines) for h in hunks)
    return FileChange(
        path=path,
        hunks=hunks,
        old_file_lines=old_lines,
        new_file_lines=new_lines,
        removed_loc=removed,
        added_loc=added,
    )


def mine_repository(
    repo_path: str | Path,
    since: int = 0,
    until: int = 2**62,
    repo_id: str | None = None,
) -> Iterator[CommitRecord]:
    """Yield one unlabeled CommitRecord per non-merge commit in [since, until].

    Records come out in ascending (timestamp, commit_hash) order. Merge
    commits, binary files, and files with zero changed lines are skipped;
    commits left with no files are dropped. Renames are not followed, so a
    rename appears as a delete plus an add.
    """
    repo_path = Path(repo_path)
    if repo_id is None:
        repo_id = repo_path.name
    try:
        _git(repo_path, "rev-parse", "--git-dir")
    except (subprocess.CalledProcessError, FileNotFoundError) as exc:
        raise MiningError(f"not a git repository: {repo_path}") from exc

    try:
        _git(repo_path, "rev-parse", "--verify", "HEAD")
    except subprocess.CalledProcessError:
        return  # no commits yet

    listing = _git(repo_path, "log", "--no-merges", "--format=%H %ct", "HEAD").decode()
    commits = []
    for line in listing.splitlines():
        sha, ts = line.split()
        ts = int(ts)
        if since <= ts <= until:
            commits.append((ts, sha))
    commits.sort()

    for ts, sha in commits:
        try:
            record = _mine_commit(repo_path, repo_id, sha, ts)
        except subprocess.CalledProcessError as exc:
            log.warning("skipping unreadable commit %s in %s: %s", sha, repo_path, exc)
            continue
        if record is not None:
            yield record


def _mine_commit(repo_path: Path, repo_id: str, sha: str, ts: int) -> CommitRecord | None:
    raw = _git(repo_path, "diff-tree", "-r", "--root", "--no-renames", "--name-status", "-z", sha)
    fields = raw.decode("utf-8", errors="replace").split("\0")
    # diff-tree echoes the commit id first when given a commit object
    if fields and fields[0] == sha:
        fields = fields[1:]
    files = []
    for status, path in zip(fields[::2], fields[1::2]):
        if not status:
            continue
        fc = _file_change(repo_path, sha, status[0], path)
        if fc is not None:
            files.append(fc)
    if not files:
        return None
    files.sort(key=lambda f: f.path)
    return CommitRecord(repo_id=repo_id, commit_hash=sha, timestamp=ts, label=NVF, files=tuple(files))


def load_labels(labels_file: str | Path) -> LabelMap:
    """Parse the label feed CSV (header repo_id,commit_hash,vuln_id)."""
    labels_file = Path(labels_file)
    entries: dict[tuple[str, str], str] = {}
    with open(labels_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["repo_id", "commit_hash", "vuln_id"]:
            raise LabelError(f"{labels_file}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 or not all(row):
                raise LabelError(f"{labels_file}:{lineno}: malformed row {row!r}")
            repo_id, commit_hash, vuln_id = row
            key = (repo_id, commit_hash)
            if key in entries and entries[key] != vuln_id:
                raise LabelError(
                    f"{labels_file}:{lineno}: conflicting vuln_id for {key}: "
                    f"{entries[key]!r} vs {vuln_id!r}"
                )
            entries[key] = vuln_id
    return LabelMap(entries=entries)


def attach_labels(records: Iterable[CommitRecord], labels: LabelMap) -> Iterator[CommitRecord]:
    """Mark each record VF iff its (repo_id, commit_hash) is in the label map."""
    for rec in records:
        label = VF if (rec.repo_id, rec.commit_hash) in labels else NVF
        yield replace(rec, label=label)


def downsample_nvf(records: list[CommitRecord], ratio: float, seed: int) -> list[CommitRecord]:
    """Keep all VF records and a seeded uniform sample of NVF records.

    Target NVF count is ceil(ratio * VF count), clamped to availability.
    Output is re-sorted by (timestamp, repo_id, commit_hash).
    """
    vf = [r for r in records if r.label == VF]
    nvf = [r for r in records if r.label == NVF]
    if not vf:
        raise ValueError("cannot downsample: no VF records present")
    target = min(len(nvf), math.ceil(ratio * len(vf)))
    kept_nvf = random.Random(seed).sample(nvf, target)
    out = vf + kept_nvf
    out.sort(key=lambda r: (r.timestamp, r.repo_id, r.commit_hash))
    return out


def write_commits_jsonl(records: Iterable[CommitRecord], path: str | Path) -> int:
    """Write records as JSON-lines in ascending timestamp order; returns count."""
    records = sorted(records, key=lambda r: (r.timestamp, r.repo_id, r.commit_hash))
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
    return len(records)


def read_commits_jsonl(path: str | Path) -> list[CommitRecord]:
    with open(path, encoding="utf-8") as fh:
        return [CommitRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
