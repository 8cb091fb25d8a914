"""Artificial-mix batch construction.

Given N view triples (ref, A, B), the artificial mixes are
art[i] = A[i] + B[(i - 1) mod N], so each ref has exactly two positives
among the artificial mixes: art[i] and art[(i + 1) mod N].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Batch", "build_batch", "positive_indices"]


@dataclass
class Batch:
    """N ref views, N artificial views, and per-art source-song provenance."""

    refs: np.ndarray  # (N, bins, frames)
    arts: np.ndarray  # (N, bins, frames)
    ref_songs: list[str]
    art_songs: list[tuple[str, str]]  # (song of A_i, song of B_{(i-1) mod N})

    @property
    def n(self) -> int:
        return self.refs.shape[0]


def positive_indices(i: int, n: int) -> tuple[int, int]:
    """Artificial-mix indices that are positives for ref i."""
    return i, (i + 1) % n


def build_batch(
    triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    songs: list[str],
    vanilla: bool = False,
) -> Batch:
    """Assemble a batch from (ref, A, B) view triples.

    With ``vanilla=True`` the circular shift is skipped and art[i] is just
    A[i] (the standard single-positive contrastive construction used as the
    ablation baseline).
    """
    n = len(triples)
    if n < 1:
        raise ValueError("empty batch")
    if len(songs) != n:
        raise ValueError("need one source song per triple")
    shape = triples[0][0].shape
    for ref, a, b in triples:
        if ref.shape != shape or a.shape != shape or b.shape != shape:
            raise ValueError("all views must share one shape")

    refs = np.stack([t[0] for t in triples])
    a_views = np.stack([t[1] for t in triples])
    if vanilla:
        arts = a_views
        art_songs = [(songs[i], songs[i]) for i in range(n)]
    else:
        b_views = np.stack([t[2] for t in triples])
        arts = a_views + np.roll(b_views, 1, axis=0)
        art_songs = [(songs[i], songs[(i - 1) % n]) for i in range(n)]
    return Batch(refs=refs, arts=arts, ref_songs=list(songs), art_songs=art_songs)
