"""Bipartite soft matching over a token sequence.

Tokens are split into two disjoint sets by global index: destinations (DST)
take the even positions, sources (SRC) the odd ones. Matching keeps, for
every SRC token, only its single most similar DST partner, then selects the
r SRC tokens whose best edge scores highest. The class token at position 0
lands in DST by construction, so it can never be selected as a source.

Scores are cosine similarities computed in float64 so that rankings are
deterministic; ties break toward the lower global SRC index, then the lower
global DST index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Partition:
    """Disjoint SRC/DST split of global token indices 0..n-1."""

    src: np.ndarray  # odd global indices, ascending
    dst: np.ndarray  # even global indices, ascending
    protect_cls: bool = False

    @property
    def n_tokens(self) -> int:
        return len(self.src) + len(self.dst)


@dataclass(frozen=True)
class MatchResult:
    """The r selected cross-set pairs, highest similarity first.

    idx_src entries are distinct SRC members; idx_dst entries are DST
    members and may repeat (several sources can share one destination).
    `clamped` is set when the requested r exceeded |SRC| and was reduced.
    """

    partition: Partition
    idx_src: np.ndarray
    idx_dst: np.ndarray
    scores: np.ndarray  # float64, non-increasing
    clamped: bool = False


def partition(n_tokens: int, protect_cls: bool = False) -> Partition:
    """Alternating split: even global indices -> DST, odd -> SRC."""
    if n_tokens < 2:
        raise ValueError(f"cannot partition {n_tokens} tokens, need at least 2")
    idx = np.arange(n_tokens)
    return Partition(src=idx[1::2], dst=idx[0::2], protect_cls=protect_cls)


def similarity_matrix(metric: np.ndarray, p: Partition) -> np.ndarray:
    """Cosine similarity of every SRC row against every DST row.

    metric is an (N, C) slice indexed by global token position. Zero-norm
    rows get similarity -1 to every partner so degenerate tokens sort last.
    Returned matrix is float64, shape (|SRC|, |DST|).
    """
    m = np.asarray(metric, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != p.n_tokens:
        raise ValueError(
            f"metric shape {m.shape} does not cover {p.n_tokens} tokens")
    norms = np.sqrt((m * m).sum(axis=1))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = m / safe[:, None]
    sims = unit[p.src] @ unit[p.dst].T
    sims[zero[p.src], :] = -1.0
    sims[:, zero[p.dst]] = -1.0
    return sims


def bipartite_soft_match(metric: np.ndarray, p: Partition, r: int) -> MatchResult:
    """Select the top-r most similar SRC->DST pairs.

    Each SRC token contributes one candidate edge: its highest-similarity
    DST partner. The r candidates with the largest scores win. r greater
    than |SRC| is clamped (flagged on the result, never an error).
    """
    if r < 0:
        raise ValueError(f"r must be non-negative, got {r}")
    clamped = r > len(p.src)
    r = min(r, len(p.src))
    empty = np.empty(0, dtype=np.int64)
    if r == 0:
        return MatchResult(p, empty, empty, np.empty(0), clamped=clamped)

    sims = similarity_matrix(metric, p)
    # argmax returns the first maximum; DST is ascending, so ties already
    # resolve to the lower global DST index
    best_dst_pos = sims.argmax(axis=1)
    best_score = sims[np.arange(len(p.src)), best_dst_pos]
    # stable sort on descending score keeps ascending SRC order within ties
    order = np.argsort(-best_score, kind="stable")[:r]
    return MatchResult(
        partition=p,
        idx_src=p.src[order].astype(np.int64),
        idx_dst=p.dst[best_dst_pos[order]].astype(np.int64),
        scores=best_score[order],
        clamped=clamped,
    )
