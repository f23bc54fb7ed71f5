"""Context-reserved before/after pair construction and ablation-variant rendering.

A FileChange is cut into change regions: each hunk plus up to k surrounding
lines, with regions whose context windows touch or overlap merged into one.
code_before renders the regions from the pre-change file, code_after from
the post-change file. The alternative single-stream renderings used by the
ablation variants (code concatenation with and without context, raw-diff
ordering) are derived from the same regions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .repo_miner import FileChange, Hunk

EMBED_SUBTRACT_DUO = "EmbedSubtract_Duo"
EMBED_SUBTRACT_SINGLE = "EmbedSubtract_Single"
EMBED_CONCAT_DUO = "EmbedConcat_Duo"
CODE_CONCAT = "CodeConcat"
CODE_CONCAT_NOCONTEXT = "CodeConcat_NoContext"
RAW_GIT_DIFF = "RawGitDiff"

VARIANTS = (
    EMBED_SUBTRACT_DUO,
    EMBED_SUBTRACT_SINGLE,
    EMBED_CONCAT_DUO,
    CODE_CONCAT,
    CODE_CONCAT_NOCONTEXT,
    RAW_GIT_DIFF,
)

# Variants whose model consumes two separate text streams.
DUAL_STREAM_VARIANTS = (EMBED_SUBTRACT_DUO, EMBED_SUBTRACT_SINGLE, EMBED_CONCAT_DUO)

# Separator marker inside single-stream texts; replaced by the tokenizer's
# SEP special token at encode time, never tokenized literally.
SEP_MARKER = " ⟨SEP⟩ "

DEFAULT_CONTEXT = 3


@dataclass(frozen=True)
class Region:
    """A maximal run of hunks whose k-line context windows touch or overlap.

    Bounds are 1-based inclusive line indices into the old and new file
    versions, already clamped to the file; an empty side is lo > hi.
    """

    old_lo: int
    old_hi: int
    new_lo: int
    new_hi: int
    hunks: tuple[Hunk, ...]


@dataclass(frozen=True)
class ContextualChange:
    repo_id: str
    commit_hash: str
    path: str
    k: int
    code_before: str
    code_after: str
    removed_loc: int
    added_loc: int
    label: str


@dataclass(frozen=True)
class VariantInput:
    variant: str
    texts: tuple[str, ...]

    def __post_init__(self):
        expected = 2 if self.variant in DUAL_STREAM_VARIANTS else 1
        if len(self.texts) != expected:
            raise ValueError(f"{self.variant} requires {expected} text segment(s), got {len(self.texts)}")


def _hunk_spans(h: Hunk, k: int) -> tuple[int, int, int, int]:
    # Unclamped context-extended spans; a pure insertion/deletion yields an
    # empty core span that still grows k lines to each side.
    old_lo = h.old_start - k
    old_hi = h.old_start + len(h.removed_lines) - 1 + k
    new_lo = h.new_start - k
    new_hi = h.new_start + len(h.added_lines) - 1 + k
    return old_lo, old_hi, new_lo, new_hi


def context_regions(fc: FileChange, k: int) -> tuple[Region, ...]:
    """Group hunks into merged context regions at window size k."""
    if k < 0:
        raise ValueError("context window must be non-negative")
    regions: list[Region] = []
    cur: list[Hunk] = []
    cur_span = (0, -1, 0, -1)
    for h in fc.hunks:
        span = _hunk_spans(h, k)
        if not cur:
            cur = [h]
            cur_span = span
            continue
        touches_old = span[0] <= cur_span[1] + 1
        touches_new = span[2] <= cur_span[3] + 1
        if touches_old or touches_new:
            cur.append(h)
            cur_span = (cur_span[0], max(cur_span[1], span[1]), cur_span[2], max(cur_span[3], span[3]))
        else:
            regions.append(_clamp_region(cur, cur_span, fc))
            cur = [h]
            cur_span = span
    if cur:
        regions.append(_clamp_region(cur, cur_span, fc))
    return tuple(regions)


def _clamp_region(hunks: list[Hunk], span: tuple[int, int, int, int], fc: FileChange) -> Region:
    old_lo, old_hi, new_lo, new_hi = span
    return Region(
        old_lo=max(1, old_lo),
        old_hi=min(len(fc.old_file_lines), old_hi),
        new_lo=max(1, new_lo),
        new_hi=min(len(fc.new_file_lines), new_hi),
        hunks=tuple(hunks),
    )


def region_old_lines(region: Region, fc: FileChange) -> tuple[str, ...]:
    return fc.old_file_lines[region.old_lo - 1 : region.old_hi]


def region_new_lines(region: Region, fc: FileChange) -> tuple[str, ...]:
    return fc.new_file_lines[region.new_lo - 1 : region.new_hi]


def _join_regions(line_groups: Iterable[tuple[str, ...]], k: int) -> str:
    # One blank line between regions; at k=0 the pair must collapse to the
    # bare removed/added lines, so no separator is inserted there.
    groups = [list(g) for g in line_groups]
    if k == 0:
        return "\n".join(line for g in groups for line in g)
    lines: list[str] = []
    for i, g in enumerate(groups):
        if i:
            lines.append("")
        lines.extend(g)
    return "\n".join(lines)


def build_contextual_change(
    fc: FileChange,
    k: int,
    label: str,
    repo_id: str = "",
    commit_hash: str = "",
) -> ContextualChange:
    """Cut the paper-style (code_before, code_after) pair at window size k."""
    regions = context_regions(fc, k)
    code_before = _join_regions((region_old_lines(r, fc) for r in regions), k)
    code_after = _join_regions((region_new_lines(r, fc) for r in regions), k)
    return ContextualChange(
        repo_id=repo_id,
        commit_hash=commit_hash,
        path=fc.path,
        k=k,
        code_before=code_before,
        code_after=code_after,
        removed_loc=fc.removed_loc,
        added_loc=fc.added_loc,
        label=label,
    )


def removed_code(fc: FileChange) -> str:
    return "\n".join(line for h in fc.hunks for line in h.removed_lines)


def added_code(fc: FileChange) -> str:
    return "\n".join(line for h in fc.hunks for line in h.added_lines)


def raw_diff_text(fc: FileChange, k: int) -> str:
    """Single-stream rendering in raw-diff order: context-before, added,
    removed, context-after, per merged region."""
    groups = []
    for r in context_regions(fc, k):
        first = r.hunks[0]
        last = r.hunks[-1]
        pre = fc.old_file_lines[r.old_lo - 1 : first.old_start - 1]
        post = fc.old_file_lines[last.old_start + len(last.removed_lines) - 1 : r.old_hi]
        added = [line for h in r.hunks for line in h.added_lines]
        removed = [line for h in r.hunks for line in h.removed_lines]
        groups.append(tuple(pre) + tuple(added) + tuple(removed) + tuple(post))
    return _join_regions(groups, k)


def render_variant_input(cc: ContextualChange, fc: FileChange, variant: str) -> VariantInput:
    """Render the model input for one ablation variant."""
    if variant in DUAL_STREAM_VARIANTS:
        return VariantInput(variant=variant, texts=(cc.code_before, cc.code_after))
    if variant == CODE_CONCAT:
        return VariantInput(variant=variant, texts=(cc.code_before + SEP_MARKER + cc.code_after,))
    if variant == CODE_CONCAT_NOCONTEXT:
        return VariantInput(variant=variant, texts=(removed_code(fc) + SEP_MARKER + added_code(fc),))
    if variant == RAW_GIT_DIFF:
        return VariantInput(variant=variant, texts=(raw_diff_text(fc, cc.k),))
    raise ValueError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class BuiltExample:
    """One file-level training/evaluation example with every variant's text
    rendering precomputed, so built datasets are variant-agnostic."""

    repo_id: str
    commit_hash: str
    path: str
    k: int
    label: str
    removed_loc: int
    added_loc: int
    code_before: str
    code_after: str
    removed_code: str
    added_code: str
    raw_diff: str

    def variant_texts(self, variant: str) -> tuple[str, ...]:
        if variant in DUAL_STREAM_VARIANTS:
            return (self.code_before, self.code_after)
        if variant == CODE_CONCAT:
            return (self.code_before + SEP_MARKER + self.code_after,)
        if variant == CODE_CONCAT_NOCONTEXT:
            return (self.removed_code + SEP_MARKER + self.added_code,)
        if variant == RAW_GIT_DIFF:
            return (self.raw_diff,)
        raise ValueError(f"unknown variant {variant!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "BuiltExample":
        return cls(**d)


def build_example(
    fc: FileChange,
    k: int,
    label: str,
    repo_id: str = "",
    commit_hash: str = "",
) -> BuiltExample:
    cc = build_contextual_change(fc, k, label, repo_id, commit_hash)
    return BuiltExample(
        repo_id=repo_id,
        commit_hash=commit_hash,
        path=fc.path,
        k=k,
        label=label,
        removed_loc=fc.removed_loc,
        added_loc=fc.added_loc,
        code_before=cc.code_before,
        code_after=cc.code_after,
        removed_code=removed_code(fc),
        added_code=added_code(fc),
        raw_diff=raw_diff_text(fc, k),
    )
