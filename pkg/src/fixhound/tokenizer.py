"""Byte-level BPE vocabulary and fixed-length encoding.

Ids 0..4 are the special tokens, 5..260 the raw bytes, and everything
above comes from merges learned on the training corpus (most frequent
adjacent pair first, ties broken by lexicographically smaller pair of
token byte strings). Encoding wraps content in BOS/EOS and pads to a
fixed length; overlong content is truncated head-preserving.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIALS = {"PAD": PAD, "BOS": BOS, "EOS": EOS, "SEP": SEP, "UNK": UNK}
NUM_SPECIALS = 5
BYTE_BASE = NUM_SPECIALS  # byte b maps to id BYTE_BASE + b
MIN_VOCAB = NUM_SPECIALS + 256


@dataclass
class Vocabulary:
    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self._token_bytes: dict[int, bytes] = {BYTE_BASE + b: bytes([b]) for b in range(256)}
        self._merge_ranks: dict[tuple[int, int], int] = {}
        self._merge_ids: dict[tuple[int, int], int] = {}
        for rank, pair in enumerate(self.merges):
            pair = (int(pair[0]), int(pair[1]))
            new_id = MIN_VOCAB + rank
            self._token_bytes[new_id] = self._token_bytes[pair[0]] + self._token_bytes[pair[1]]
            self._merge_ranks[pair] = rank
            self._merge_ids[pair] = new_id

    @property
    def size(self) -> int:
        return MIN_VOCAB + len(self.merges)

    def token_bytes(self, token_id: int) -> bytes:
        return self._token_bytes[token_id]

    def to_dict(self) -> dict:
        return {
            "specials": dict(SPECIALS),
            "byte_tokens": [BYTE_BASE + b for b in range(256)],
            "merges": [[l, r] for l, r in self.merges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        if d.get("specials") != SPECIALS:
            raise ValueError("vocabulary file has unexpected special-token table")
        return cls(merges=[(int(l), int(r)) for l, r in d["merges"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_length: int
    truncated: bool


def _byte_ids(text: str) -> list[int]:
    return [BYTE_BASE + b for b in text.encode("utf-8")]


def _pair_key(vocab: Vocabulary, pair: tuple[int, int]) -> tuple[bytes, bytes]:
    return (vocab.token_bytes(pair[0]), vocab.token_bytes(pair[1]))


def _merge_sequence(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out: list[int] = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_vocab(corpus: Iterable[str], vocab_size: int, seed: int = 0) -> Vocabulary:
    """Learn byte-pair merges on the corpus until the vocabulary is full.

    Fully deterministic for a fixed corpus order; `seed` is accepted for
    interface symmetry with the other pipeline stages but unused.
    """
    del seed
    if vocab_size < MIN_VOCAB:
        raise ValueError(f"vocab_size must be at least {MIN_VOCAB}")
    sequences = [_byte_ids(text) for text in corpus]
    if not sequences:
        raise ValueError("cannot train a vocabulary on an empty corpus")
    vocab = Vocabulary()
    while vocab.size < vocab_size:
        counts: Counter[tuple[int, int]] = Counter()
        for seq in sequences:
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] += 1
        if not counts:
            break
        top = max(counts.values())
        best = min((p for p, c in counts.items() if c == top), key=lambda p: _pair_key(vocab, p))
        new_id = vocab.size
        sequences = [_merge_sequence(s, best, new_id) for s in sequences]
        vocab = Vocabulary(merges=vocab.merges + [best])
    return vocab


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Content token ids for a text (no specials, no padding)."""
    seq = _byte_ids(text)
    while len(seq) > 1:
        best_rank = None
        best_pair = None
        for a, b in zip(seq, seq[1:]):
            rank = vocab._merge_ranks.get((a, b))
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank = rank
                best_pair = (a, b)
        if best_pair is None:
            break
        seq = _merge_sequence(seq, best_pair, vocab._merge_ids[best_pair])
    return seq


def _finish(content: list[int], max_len: int, truncated: bool) -> TokenSequence:
    ids = [BOS] + content + [EOS]
    attention_length = len(ids)
    ids.extend([PAD] * (max_len - len(ids)))
    return TokenSequence(ids=tuple(ids), attention_length=attention_length, truncated=truncated)


def encode(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """BOS + content + EOS, PAD-filled to max_len; tail truncated if over."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    content = tokenize(text, vocab)
    budget = max_len - 2
    truncated = len(content) > budget
    return _finish(content[:budget], max_len, truncated)


def encode_pair(text_a: str, text_b: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """BOS + a + SEP + b + EOS, PAD-filled to max_len.

    Overlong pairs are truncated proportionally to their untruncated
    lengths; a side already within half the budget is never touched.
    """
    if max_len < 3:
        raise ValueError("max_len must be at least 3 for pair encoding")
    a = tokenize(text_a, vocab)
    b = tokenize(text_b, vocab)
    budget = max_len - 3
    if len(a) + len(b) <= budget:
        keep_a, keep_b = len(a), len(b)
    elif len(a) <= budget / 2:
        keep_a, keep_b = len(a), budget - len(a)
    elif len(b) <= budget / 2:
        keep_a, keep_b = budget - len(b), len(b)
    else:
        keep_a = math.ceil(budget * len(a) / (len(a) + len(b)))
        keep_b = budget - keep_a
    truncated = keep_a < len(a) or keep_b < len(b)
    ids = [BOS] + a[:keep_a] + [SEP] + b[:keep_b] + [EOS]
    attention_length = len(ids)
    ids.extend([PAD] * (max_len - len(ids)))
    return TokenSequence(ids=tuple(ids), attention_length=attention_length, truncated=truncated)


def decode(seq: TokenSequence | Iterable[int], vocab: Vocabulary) -> str:
    """Inverse of encode for untruncated sequences; SEP renders as the
    textual separator marker used by the single-stream variants."""
    from .change_builder import SEP_MARKER

    ids = seq.ids if isinstance(seq, TokenSequence) else tuple(seq)
    out = bytearray()
    for i in ids:
        if i in (PAD, BOS, EOS, UNK):
            continue
        if i == SEP:
            out.extend(SEP_MARKER.encode("utf-8"))
        else:
            out.extend(vocab.token_bytes(i))
    return out.decode("utf-8", errors="replace")
