"""Similar-patch retrieval: exact euclidean, learned-embedding, and local modes.

All searches operate on an immutable :class:`~nlbayes.imaging.PatchGrid` and
return the k most similar patches for one reference anchor.  Candidates are
restricted to a square window of anchor positions around the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SearchError
from .imaging import PatchGrid

MODE_NONLOCAL_EXACT = "nonlocal-exact"
MODE_NONLOCAL_EMBEDDING = "nonlocal-embedding"
MODE_LOCAL_ADJACENT = "local-adjacent"
SEARCH_MODES = (MODE_NONLOCAL_EXACT, MODE_NONLOCAL_EMBEDDING, MODE_LOCAL_ADJACENT)


@dataclass
class SearchConfig:
    k: int = 8
    window_radius: int = 10  # candidate anchors within a (2r+1)^2 pixel window
    mode: str = MODE_NONLOCAL_EXACT
    exclude_self: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")
        if self.mode not in SEARCH_MODES:
            raise ValueError(f"unknown search mode {self.mode!r}")


@dataclass
class NeighborSet:
    """The k patches selected for one reference patch.

    ``distances`` are squared euclidean values in the space the selection
    ran in: raw intensities for the exact and local modes, embedding
    features for the embedding mode.
    """

    reference_index: int
    neighbor_indices: np.ndarray  # (k,)
    neighbor_patches: np.ndarray  # (k, d)
    distances: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return len(self.neighbor_indices)


def _window_candidates(grid: PatchGrid, ref: int, cfg: SearchConfig) -> np.ndarray:
    """Flat candidate indices inside the window, in scan order."""
    n = len(grid)
    if not 0 <= ref < n:
        raise IndexError(f"reference index {ref} out of range")
    r0, c0 = grid.anchors[ref]
    radius = cfg.window_radius
    rlo = np.searchsorted(grid.rows, r0 - radius, side="left")
    rhi = np.searchsorted(grid.rows, r0 + radius, side="right")
    clo = np.searchsorted(grid.cols, c0 - radius, side="left")
    chi = np.searchsorted(grid.cols, c0 + radius, side="right")
    ncols = len(grid.cols)
    row_idx = np.arange(rlo, rhi, dtype=np.int64)
    col_idx = np.arange(clo, chi, dtype=np.int64)
    cand = (row_idx[:, None] * ncols + col_idx[None, :]).ravel()
    if cfg.exclude_self:
        cand = cand[cand != ref]
    return cand


def _select_top_k(cand, d2, k, patches, ref):
    if len(cand) < k:
        raise SearchError(
            f"only {len(cand)} candidates in window for k={k} (reference {ref})"
        )
    order = np.argsort(d2, kind="stable")[:k]  # ties break by scan order
    picked = cand[order]
    return NeighborSet(ref, picked, patches[picked].copy(), d2[order].copy())


def knn_exact(grid: PatchGrid, ref: int, cfg: SearchConfig) -> NeighborSet:
    """The k candidates minimizing squared euclidean distance to the reference."""
    cand = _window_candidates(grid, ref, cfg)
    diff = grid.patches[cand] - grid.patches[ref]
    d2 = np.einsum("ij,ij->i", diff, diff)
    return _select_top_k(cand, d2, cfg.k, grid.patches, ref)


def knn_embedding(
    grid: PatchGrid,
    ref: int,
    cfg: SearchConfig,
    embeddings: np.ndarray,
    temperature: float = 0.1,
    rng=None,
    sample: bool = False,
) -> NeighborSet:
    """k-round categorical selection over candidates in an embedding space.

    ``embeddings`` holds one feature vector per grid anchor (see
    ``networks.embed_anchors``); selection logits are the negated squared
    embedding distances divided by ``temperature``.  With ``sample`` a
    candidate is drawn each round without replacement; otherwise each round
    deterministically takes the most likely remaining candidate, which
    reduces to a stable top-k.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(grid):
        raise ValueError("one embedding row per grid anchor required")
    cand = _window_candidates(grid, ref, cfg)
    diff = embeddings[cand] - embeddings[ref]
    d2 = np.einsum("ij,ij->i", diff, diff)
    if not sample:
        return _select_top_k(cand, d2, cfg.k, grid.patches, ref)
    if len(cand) < cfg.k:
        raise SearchError(
            f"only {len(cand)} candidates in window for k={cfg.k} (reference {ref})"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    elif isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    logits = -d2 / temperature
    avail = np.ones(len(cand), dtype=bool)
    picked_pos = []
    for _ in range(cfg.k):
        live = np.flatnonzero(avail)
        z = logits[live]
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        choice = live[rng.choice(len(live), p=p)]
        picked_pos.append(choice)
        avail[choice] = False
    picked_pos = np.asarray(picked_pos)
    picked = cand[picked_pos]
    return NeighborSet(ref, picked, grid.patches[picked].copy(), d2[picked_pos].copy())


def local_adjacent(grid: PatchGrid, ref: int, cfg: SearchConfig) -> NeighborSet:
    """The k nearest tiles of a non-overlapping tiling, by lattice distance.

    The grid must have been extracted with stride equal to the patch side.
    Tiles are ranked by Chebyshev distance on the (row index, col index)
    lattice with scan-order tie-break; rings extend outward until k tiles
    are found, so border references still succeed.
    """
    nrows, ncols = len(grid.rows), len(grid.cols)
    if nrows > 1 and not (np.diff(grid.rows)[:-1] == grid.side).all():
        raise SearchError("local mode needs a stride == side tiling grid")
    if ncols > 1 and not (np.diff(grid.cols)[:-1] == grid.side).all():
        raise SearchError("local mode needs a stride == side tiling grid")
    if cfg.k > nrows * ncols - (1 if cfg.exclude_self else 0):
        raise SearchError(f"grid has too few tiles for k={cfg.k}")
    ri, ci = divmod(ref, ncols)
    picked = []
    if not cfg.exclude_self:
        picked.append(ref)
    ring = 1
    while len(picked) < cfg.k:
        if ring > max(nrows, ncols):
            raise SearchError(f"cannot collect k={cfg.k} tiles")  # pragma: no cover
        members = []
        for r in range(max(0, ri - ring), min(nrows, ri + ring + 1)):
            for c in range(max(0, ci - ring), min(ncols, ci + ring + 1)):
                if max(abs(r - ri), abs(c - ci)) == ring:
                    members.append(r * ncols + c)
        picked.extend(members)  # already in scan order
        ring += 1
    picked = np.asarray(picked[: cfg.k], dtype=np.int64)
    diff = grid.patches[picked] - grid.patches[ref]
    d2 = np.einsum("ij,ij->i", diff, diff)
    return NeighborSet(ref, picked, grid.patches[picked].copy(), d2)
