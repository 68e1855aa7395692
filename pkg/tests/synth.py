"""Synthetic stochastic-block-model datasets for tests and demos."""

import numpy as np

from dualprompt.graph import Graph, build_graph


def make_sbm(
    n: int,
    blocks: int,
    p_in: float,
    p_out: float,
    feat_dim: int = 16,
    feat_shift: float = 0.5,
    noise: float = 1.0,
    seed: int = 0,
) -> Graph:
    """Planted-partition graph with class-correlated Gaussian features.

    Block membership is cyclic (node i -> block i % blocks). Each block
    shifts one feature coordinate by ``feat_shift``; ``noise`` scales the
    isotropic Gaussian background, so feat_shift/noise controls how much
    of the signal lives in features vs. structure.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % blocks
    same = labels[:, None] == labels[None, :]
    probs = np.where(same, p_in, p_out)
    mask = np.triu(rng.random((n, n)) < probs, k=1)
    edges = np.argwhere(mask)
    feats = rng.normal(size=(n, feat_dim)) * noise
    feats[np.arange(n), labels % feat_dim] += feat_shift
    return build_graph(edges, feats, labels)
