"""Parser-free tokenization of raw document bytes.

Documents are never decoded. A token is either a maximal run of non-ASCII
bytes or a maximal run of ASCII word bytes; everything else is a separator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Tuple

N_CHUNKS = 16

# On a bytes pattern \w is ASCII-only: [A-Za-z0-9_].
TOKEN_PATTERN = re.compile(rb"([^\x00-\x7F]+|\w+)")


@dataclass(frozen=True)
class TokenStream:
    tokens: List[bytes]
    source_len: int

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ChunkPlan:
    """Half-open token index ranges, one per chunk."""

    ranges: List[Tuple[int, int]]
    stepsize: int
    n_tokens: int = field(default=0)

    def covered(self) -> List[int]:
        return [i for start, stop in self.ranges for i in range(start, stop)]

    def n_covered(self) -> int:
        return sum(stop - start for start, stop in self.ranges)


def tokenize(document: bytes) -> TokenStream:
    if isinstance(document, str):
        raise TypeError("tokenize operates on bytes, not decoded text")
    return TokenStream(TOKEN_PATTERN.findall(document), len(document))


def plan_chunks(n_tokens: int, steps: int = N_CHUNKS) -> ChunkPlan:
    """Split ``n_tokens`` token indices into ``steps`` sequential chunks.

    For ``n_tokens >= steps`` chunk ``k`` starts at ``floor(n * k / steps)``
    and holds ``floor(n / steps)`` tokens, so up to ``steps - 1`` tokens are
    skipped (some between chunks, the rest at the tail). Shorter streams put
    one token in each of the first ``n_tokens`` chunks.
    """
    if n_tokens < 0:
        raise ValueError(f"n_tokens must be non-negative, got {n_tokens}")
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")
    if n_tokens >= steps:
        stepsize = n_tokens // steps
        ranges = []
        for k in range(steps):
            start = n_tokens * k // steps
            ranges.append((start, start + stepsize))
    else:
        stepsize = 1 if n_tokens else 0
        ranges = [(k, k + 1) if k < n_tokens else (n_tokens, n_tokens) for k in range(steps)]
    return ChunkPlan(ranges, stepsize, n_tokens)


def tokenize_chunks(document: bytes, steps: int = N_CHUNKS) -> List[List[bytes]]:
    stream = tokenize(document)
    plan = plan_chunks(len(stream), steps)
    return [stream.tokens[a:b] for a, b in plan.ranges]
