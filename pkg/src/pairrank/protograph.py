"""Residue contact graphs: construction, normalization, stochastic augmentation.

Residues become nodes; an undirected edge joins two residues whenever the
minimum Euclidean distance between any of their atoms is strictly below the
contact threshold (4.5 A by default). The adjacency handed to the encoders is
the symmetric normalization D^(-1/2) (A + I) D^(-1/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

CONTACT_THRESHOLD = 4.5  # Angstrom, strict "<"

# Dense adjacency only; refuse to allocate beyond this many residues.
MAX_RESIDUES = 512


@dataclass
class ResidueStructure:
    """One molecule: sequence plus per-residue atom coordinates."""

    sequence: str
    coords: list  # list of (n_atoms_i, 3) float arrays, one per residue

    def __post_init__(self):
        if len(self.sequence) == 0:
            raise ValueError("empty structure")
        if len(self.sequence) != len(self.coords):
            raise ValueError("sequence length != coordinate row count")
        for xyz in self.coords:
            if not np.all(np.isfinite(xyz)):
                raise ValueError("non-finite coordinate")

    def __len__(self):
        return len(self.sequence)


@dataclass
class ResidueGraph:
    """Contact graph ready for the GCN encoders."""

    n_nodes: int
    edges: list  # sorted list of (u, v) with u < v, no self-loops
    features: np.ndarray  # (L, d_in)
    adjacency: np.ndarray  # normalized, (L, L)


@dataclass
class AugmentConfig:
    edge_drop_prob: float = 0.0
    feature_mask_prob: float = 0.0

    def __post_init__(self):
        for p in (self.edge_drop_prob, self.feature_mask_prob):
            if not (0.0 <= p < 1.0):
                raise ValueError("augmentation probabilities must be in [0, 1)")


WEAK_AUGMENT = AugmentConfig(edge_drop_prob=0.1)
STRONG_AUGMENT = AugmentConfig(edge_drop_prob=0.3, feature_mask_prob=0.3)


def contact_edges(structure, threshold=CONTACT_THRESHOLD):
    """Edge list of residue pairs with min inter-atom distance < threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    L = len(structure)
    if L > MAX_RESIDUES:
        raise ValueError(f"structure has {L} residues, dense limit is {MAX_RESIDUES}")
    atoms = np.concatenate(structure.coords, axis=0)
    counts = [len(c) for c in structure.coords]
    starts = np.cumsum([0] + counts)
    dist = cdist(atoms, atoms)
    # min over the atom blocks of each residue pair
    red = np.minimum.reduceat(dist, starts[:-1], axis=0)
    red = np.minimum.reduceat(red, starts[:-1], axis=1)
    edges = []
    for u in range(L):
        for v in range(u + 1, L):
            if red[u, v] < threshold:
                edges.append((u, v))
    return edges


def normalize_adjacency(edges, n_nodes):
    """D^(-1/2) (A + I) D^(-1/2) as a dense matrix."""
    a = np.eye(n_nodes)
    for u, v in edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def build_graph(structure, features, threshold=CONTACT_THRESHOLD):
    edges = contact_edges(structure, threshold)
    L = len(structure)
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != L:
        raise ValueError("feature rows must match residue count")
    return ResidueGraph(L, edges, features, normalize_adjacency(edges, L))


def augment(graph, cfg, rng):
    """Edge dropout plus optional feature masking; adjacency re-normalized."""
    edges = graph.edges
    if cfg.edge_drop_prob > 0.0 and edges:
        keep = rng.random(len(edges)) >= cfg.edge_drop_prob
        edges = [e for e, k in zip(edges, keep) if k]
    feats = graph.features
    if cfg.feature_mask_prob > 0.0:
        mask = rng.random(graph.n_nodes) >= cfg.feature_mask_prob
        feats = feats * mask[:, None]
    return ResidueGraph(graph.n_nodes, edges, feats,
                        normalize_adjacency(edges, graph.n_nodes))
