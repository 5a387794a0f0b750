"""Ranking-list construction, sequence similarity, and the split regimes.

Homologous lists grow from a labeled seed pair: every other member must share
high antigen similarity with the seed while differing from its affinity by
more than the margin. Heterogeneous lists instead force pairwise-distinct
antigen families. The three split regimes (random / ag / ab) decide both the
train/test partition and the sampling mixture.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .pretrain import kmeans_prototypes

REGIMES = ("random", "ag", "ab")


@dataclass
class SamplerConfig:
    delta_seq: float = 0.9
    y_cutoff: float = 0.5
    k: int = 5
    homologous_ratio: float = 0.5  # homologous fraction for random/ag regimes
    regime: str = "random"

    def __post_init__(self):
        if not (0.0 <= self.delta_seq <= 1.0):
            raise ValueError("delta_seq must be in [0, 1]")
        if self.y_cutoff < 0:
            raise ValueError("y_cutoff must be >= 0")
        if self.k < 2:
            raise ValueError("list size must be >= 2")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")

    @classmethod
    def for_regime(cls, regime, k=5):
        """Split-specific defaults: ab is homologous-only with margin 1.0."""
        if regime == "ab":
            return cls(y_cutoff=1.0, k=k, homologous_ratio=1.0, regime="ab")
        return cls(y_cutoff=0.5, k=k, homologous_ratio=0.5, regime=regime)


@dataclass
class RankingList:
    list_id: int
    members: list  # dataset indices, seed first for homologous lists
    labels: list  # observed log-Kd per member
    seed_index: int
    kind: str  # "homologous" | "heterogeneous"


def levenshtein(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = np.arange(len(b) + 1)
    for i, ca in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ca != cb))
        prev = cur
    return int(prev[-1])


@lru_cache(maxsize=200_000)
def _cached_similarity(a, b):
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def seq_similarity(a, b):
    """1 - normalized edit distance; symmetric, 1 iff equal."""
    if not a or not b:
        raise ValueError("empty sequence")
    if a > b:
        a, b = b, a
    return _cached_similarity(a, b)


def candidate_pool(seed_idx, dataset, labeled_indices, cfg):
    """Labeled pairs homologous to the seed with sufficient affinity margin."""
    seed = dataset.pairs[seed_idx]
    if seed.affinity is None:
        raise ValueError("seed must be labeled")
    pool = []
    for i in labeled_indices:
        if i == seed_idx:
            continue
        cand = dataset.pairs[i]
        if abs(seed.affinity - cand.affinity) <= cfg.y_cutoff:
            continue
        if seq_similarity(cand.ag_seq, seed.ag_seq) >= cfg.delta_seq:
            pool.append(i)
    return pool


class PoolRejection(Exception):
    """Raised when a seed's candidate pool cannot fill a list."""


def sample_list(seed_idx, pool, dataset, k, rng, list_id=0):
    if len(pool) < k - 1:
        raise PoolRejection(f"pool of {len(pool)} cannot fill a list of {k}")
    picks = [pool[j] for j in rng.choice(len(pool), size=k - 1, replace=False)]
    members = [seed_idx] + picks
    labels = [dataset.pairs[i].affinity for i in members]
    return RankingList(list_id, members, labels, seed_idx, "homologous")


def _sample_heterogeneous(dataset, labeled_indices, k, rng, list_id):
    by_family = {}
    for i in labeled_indices:
        by_family.setdefault(dataset.pairs[i].family, []).append(i)
    families = sorted(by_family)
    if len(families) < k:
        raise PoolRejection("fewer antigen families than the list size")
    fams = [families[j] for j in rng.choice(len(families), size=k, replace=False)]
    members = [by_family[f][int(rng.integers(0, len(by_family[f])))] for f in fams]
    labels = [dataset.pairs[i].affinity for i in members]
    return RankingList(list_id, members, labels, members[0], "heterogeneous")


def sample_epoch(dataset, labeled_indices, cfg, n_lists, rng,
                 max_seed_retries=50):
    """Draw a collection of lists under the regime's sampling mixture."""
    labeled_indices = list(labeled_indices)
    if len(labeled_indices) < cfg.k:
        raise ValueError("dataset too small for any list")
    lists = []
    for list_id in range(n_lists):
        homologous = cfg.regime == "ab" or rng.random() < cfg.homologous_ratio
        if homologous:
            built = None
            for _ in range(max_seed_retries):
                seed_idx = labeled_indices[int(rng.integers(0, len(labeled_indices)))]
                pool = candidate_pool(seed_idx, dataset, labeled_indices, cfg)
                if len(pool) >= cfg.k - 1:
                    built = sample_list(seed_idx, pool, dataset, cfg.k, rng,
                                        list_id)
                    break
            if built is None:
                raise PoolRejection("no seed with a sufficient pool found")
            lists.append(built)
        else:
            lists.append(_sample_heterogeneous(dataset, labeled_indices,
                                               cfg.k, rng, list_id))
    return lists


# --- splits ---------------------------------------------------------------

def _kmer_profiles(sequences, k=3):
    vocab = sorted({s[i:i + k] for s in sequences for i in range(len(s) - k + 1)})
    index = {m: j for j, m in enumerate(vocab)}
    profiles = np.zeros((len(sequences), len(vocab)))
    for r, s in enumerate(sequences):
        for i in range(len(s) - k + 1):
            profiles[r, index[s[i:i + k]]] += 1.0
        total = profiles[r].sum()
        if total:
            profiles[r] /= total
    return profiles


def _divergent_clusters(profiles, n_clusters, n_pick):
    assign, centroids = kmeans_prototypes(profiles, n_clusters)
    dists = []
    for c in range(n_clusters):
        rest = profiles[assign != c]
        if len(rest) == 0:
            dists.append(0.0)
        else:
            dists.append(float(np.linalg.norm(centroids[c] - rest.mean(axis=0))))
    order = sorted(range(n_clusters), key=lambda c: (-dists[c], c))
    return assign, order[:n_pick]


def make_splits(dataset, regime, fold=0, seed=0, n_folds=5, n_clusters=6):
    """(train, test) index sets for the requested regime, deterministic."""
    rng = np.random.default_rng(seed)
    n = len(dataset)
    if regime == "random":
        order = rng.permutation(n)
        folds = np.array_split(order, n_folds)
        test = sorted(int(i) for i in folds[fold % n_folds])
        train = sorted(set(range(n)) - set(test))
        return train, test
    if regime == "ag":
        seqs = [p.ag_seq for p in dataset.pairs]
        n_pick = 1
    elif regime == "ab":
        seqs = [p.ab_seq for p in dataset.pairs]
        n_pick = 2
    else:
        raise ValueError(f"unknown regime {regime!r}")
    profiles = _kmer_profiles(seqs)
    k = min(n_clusters, n)
    assign, picked = _divergent_clusters(profiles, k, n_pick)
    test, train = [], []
    for c in range(k):
        members = [i for i in range(n) if assign[i] == c]
        if c in picked:
            perm = rng.permutation(len(members))
            cut = int(round(0.7 * len(members)))
            test.extend(members[j] for j in perm[:cut])
            train.extend(members[j] for j in perm[cut:])
        else:
            train.extend(members)
    return sorted(train), sorted(test)


# --- list file format -----------------------------------------------------
# One record per line: list_id  kind  pair_id x K  observed-label x K

def save_lists(lists, dataset, path):
    with open(path, "w") as fh:
        for rl in lists:
            ids = [str(dataset.pairs[i].pair_id) for i in rl.members]
            ys = [repr(float(y)) for y in rl.labels]
            fh.write("\t".join([str(rl.list_id), rl.kind] + ids + ys) + "\n")


def load_lists(path, dataset):
    id_to_index = {p.pair_id: i for i, p in enumerate(dataset.pairs)}
    lists = []
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 4 or len(parts) % 2 != 0:
                raise ValueError(f"malformed list record: {line!r}")
            k = (len(parts) - 2) // 2
            list_id, kind = int(parts[0]), parts[1]
            members = [id_to_index[int(v)] for v in parts[2:2 + k]]
            labels = [float(v) for v in parts[2 + k:]]
            lists.append(RankingList(list_id, members, labels, members[0], kind))
    return lists
