"""Random-walk transition powers, reachability queries and a Monte-Carlo oracle.

r(i -> j | t) is the probability that a t-step uniform random walk from i
ends at j, i.e. entry (i, j) of P^t with P the row-stochastic transition
matrix D^-1 A. All powers P^1..P^T are computed exactly by sparse
multiplication and kept (and optionally persisted) for position encodings
and for the k-NN sampling distributions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import DataFormatError
from .graph import Graph
from .rng import derive_rng

CACHE_MAGIC = b"UDPR"

# Entries below this magnitude are dropped after each multiplication to
# bound fill-in; the probability mass lost is negligible at t <= 9.
PRUNE_EPS = 1e-15


def build_transition(graph: Graph) -> sparse.csr_matrix:
    """Row-stochastic transition matrix; rows of isolated nodes are all-zero."""
    deg = graph.degrees().astype(np.float64)
    src, dst = graph.edge_arrays()
    data = 1.0 / deg[src]
    mat = sparse.csr_matrix(
        (data, dst, graph.csr_offsets), shape=(graph.num_nodes, graph.num_nodes)
    )
    mat.sort_indices()
    return mat


@dataclass
class ReachabilityCache:
    """powers[t-1] holds P^t for 1 <= t <= max_step."""

    max_step: int
    powers: list

    @property
    def num_nodes(self) -> int:
        return self.powers[0].shape[0]

    def power(self, t: int) -> sparse.csr_matrix:
        if not 1 <= t <= self.max_step:
            raise ValueError(f"step t={t} outside [1, {self.max_step}]")
        return self.powers[t - 1]


def build_cache(transition: sparse.csr_matrix, max_step: int) -> ReachabilityCache:
    if max_step < 1:
        raise ValueError("max_step must be >= 1")
    powers = [transition]
    for _ in range(max_step - 1):
        nxt = (powers[-1] @ transition).tocsr()
        nxt.data[np.abs(nxt.data) < PRUNE_EPS] = 0.0
        nxt.eliminate_zeros()
        nxt.sort_indices()
        powers.append(nxt)
    return ReachabilityCache(max_step=max_step, powers=powers)


def reach(cache: ReachabilityCache, i: int, j: int, t: int) -> float:
    """Entry (i, j) of P^t; 0.0 when absent from the sparse structure."""
    mat = cache.power(t)
    row = mat.indices[mat.indptr[i]:mat.indptr[i + 1]]
    pos = np.searchsorted(row, j)
    if pos < row.shape[0] and row[pos] == j:
        return float(mat.data[mat.indptr[i] + pos])
    return 0.0


def reach_row(cache: ReachabilityCache, i: int, t: int) -> np.ndarray:
    """Dense row i of P^t (reachabilities from i to every node)."""
    mat = cache.power(t)
    out = np.zeros(mat.shape[1])
    lo, hi = mat.indptr[i], mat.indptr[i + 1]
    out[mat.indices[lo:hi]] = mat.data[lo:hi]
    return out


def total_reach(cache: ReachabilityCache, t: int) -> np.ndarray:
    """Column sums of P^t: entry j = sum_i r(i -> j | t)."""
    return np.asarray(cache.power(t).sum(axis=0)).ravel()


def monte_carlo_reach(
    graph: Graph, i: int, j: int, t: int, walks: int, seed: int
) -> float:
    """Empirical fraction of t-step uniform walks from i that end at j.

    Verification oracle for the exact cache: simulates ``walks`` independent
    walks, vectorized over the walk axis. A walk that reaches a degree-0 node
    before completing t steps cannot end anywhere and counts as a miss.
    """
    if walks < 1:
        raise ValueError("need at least one walk")
    rng = derive_rng(seed, "mc-reach", i, j, t)
    deg = graph.degrees()
    cur = np.full(walks, i, dtype=np.int64)
    alive = np.ones(walks, dtype=bool)
    for _ in range(t):
        d = deg[cur]
        alive &= d > 0
        act = np.nonzero(alive)[0]
        if act.size == 0:
            return 0.0
        step = rng.integers(0, d[act])
        cur[act] = graph.csr_targets[graph.csr_offsets[cur[act]] + step]
    return float(np.mean(alive & (cur == j)))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_cache(cache: ReachabilityCache, path) -> None:
    n = cache.num_nodes
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<QQ", n, cache.max_step))
        for mat in cache.powers:
            fh.write(struct.pack("<Q", mat.nnz))
            fh.write(mat.indptr.astype("<u8").tobytes())
            fh.write(mat.indices.astype("<u8").tobytes())
            fh.write(mat.data.astype("<f8").tobytes())


def load_cache(path) -> ReachabilityCache:
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:4] != CACHE_MAGIC:
            raise DataFormatError(f"{path}: not a reachability cache")
        n, max_step = struct.unpack("<QQ", head[4:20])
        powers = []
        for _ in range(max_step):
            raw = fh.read(8)
            if len(raw) < 8:
                raise DataFormatError(f"{path}: truncated cache")
            (nnz,) = struct.unpack("<Q", raw)
            indptr = np.frombuffer(fh.read(8 * (n + 1)), dtype="<u8")
            indices = np.frombuffer(fh.read(8 * nnz), dtype="<u8")
            data = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
            if indptr.shape[0] != n + 1 or indices.shape[0] != nnz or data.shape[0] != nnz:
                raise DataFormatError(f"{path}: truncated cache")
            powers.append(
                sparse.csr_matrix(
                    (data.copy(), indices.astype(np.int64), indptr.astype(np.int64)),
                    shape=(n, n),
                )
            )
    return ReachabilityCache(max_step=int(max_step), powers=powers)
