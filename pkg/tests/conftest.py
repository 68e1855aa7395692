import numpy as np
import pytest

from dualprompt.graph import Graph, build_graph


def path_graph(n: int, d: int = 1) -> Graph:
    edges = np.array([[i, i + 1] for i in range(n - 1)])
    return build_graph(edges, np.ones((n, d)))


def star_graph(leaves: int, d: int = 1) -> Graph:
    edges = np.array([[0, i] for i in range(1, leaves + 1)])
    return build_graph(edges, np.ones((leaves + 1, d)))


def triangle_graph(d: int = 1) -> Graph:
    return build_graph(np.array([[0, 1], [1, 2], [0, 2]]), np.ones((3, d)))


def cycle_graph(n: int, d: int = 1) -> Graph:
    edges = np.array([[i, (i + 1) % n] for i in range(n)])
    return build_graph(edges, np.ones((n, d)))


def random_graph(n: int, p: float, seed: int, d: int = 4) -> Graph:
    """Erdos-Renyi graph with random features."""
    rng = np.random.default_rng(seed)
    mask = np.triu(rng.random((n, n)) < p, k=1)
    edges = np.argwhere(mask)
    return build_graph(edges, rng.normal(size=(n, d)))


@pytest.fixture
def tiny_labeled_graph():
    """10 nodes, 2 classes, a path with some chords."""
    rng = np.random.default_rng(0)
    edges = np.array(
        [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 6], [6, 7], [7, 8],
         [8, 9], [0, 2], [4, 6], [5, 9]]
    )
    labels = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    return build_graph(edges, rng.normal(size=(10, 3)), labels)
