"""Synthetic antibody/antigen pairs with a hidden ground-truth affinity oracle.

Families of antigens descend from a common ancestor by point mutation, so
within-family sequence similarity is high by construction. Each antigen is
paired with several random antibody CDR sequences. The hidden oracle scores a
pair from the CDR composition, a CDR-epitope match term, and a per-family
offset, then maps the score into a log-Kd-like range. Observed labels add
Gaussian noise; a fraction of labels is hidden to form the unlabeled pool.

Training code only ever sees observed labels; the noiseless oracle is a
separate handle used by tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .protograph import ResidueStructure

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
_AA_INDEX = {a: i for i, a in enumerate(AMINO_ACIDS)}

CA_STEP = 3.8  # consecutive C-alpha spacing, Angstrom
MIN_CA_SEPARATION = 3.0  # self-avoidance radius for non-adjacent residues

N_POS_FEATURES = 12
FEATURE_DIM = 20 + N_POS_FEATURES


@dataclass
class SynthConfig:
    n_families: int = 6
    antigens_per_family: int = 5
    antibodies_per_antigen: int = 20
    mutation_rate: float = 0.02
    ab_len_range: tuple = (20, 60)
    ag_len_range: tuple = (40, 120)
    labeled_fraction: float = 0.2
    label_noise: float = 0.3
    epitope_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ValueError("labeled_fraction must be in (0, 1]")
        for n in (self.n_families, self.antigens_per_family, self.antibodies_per_antigen):
            if n < 1:
                raise ValueError("counts must be >= 1")


@dataclass
class AbAgPair:
    pair_id: int
    ab_seq: str
    ag_seq: str
    ab_structure: ResidueStructure
    ag_structure: ResidueStructure
    affinity: float | None  # observed log-Kd; None when unlabeled
    family: int
    _graphs: tuple = field(default=None, repr=False, compare=False)


@dataclass
class SynthDataset:
    pairs: list

    @property
    def labeled_indices(self):
        return [i for i, p in enumerate(self.pairs) if p.affinity is not None]

    @property
    def unlabeled_indices(self):
        return [i for i, p in enumerate(self.pairs) if p.affinity is None]

    def __len__(self):
        return len(self.pairs)


class AffinityOracle:
    """Noiseless scoring rule; deterministic given the generator seed.

    Higher ``strength`` means stronger binding; ``log_kd`` maps strength
    into roughly [-12, -3] (lower log-Kd = stronger).
    """

    def __init__(self, cdr_weights, ag_weights, epitope_windows, family_offsets,
                 interaction_weight=0.3):
        # center so the composition terms have ~zero mean; keeps the tanh
        # squashing below out of its saturated region
        self.cdr_weights = cdr_weights - cdr_weights.mean()  # (20,)
        self.ag_weights = ag_weights - ag_weights.mean()  # (20,)
        self.epitope_windows = epitope_windows  # family -> (start_frac, length)
        self.family_offsets = family_offsets  # (n_families,)
        self.interaction_weight = interaction_weight

    def _epitope(self, ag_seq, family):
        frac, length = self.epitope_windows[family]
        start = int(frac * max(1, len(ag_seq) - length))
        return ag_seq[start:start + length]

    def strength(self, ab_seq, ag_seq, family):
        f_ab = aa_frequencies(ab_seq)
        f_ag = aa_frequencies(ag_seq)
        f_ep = aa_frequencies(self._epitope(ag_seq, family))
        raw = (float(self.cdr_weights @ f_ab)
               + self.interaction_weight * float(f_ab @ f_ep)
               + 0.3 * float(self.ag_weights @ f_ag)
               + 0.1 * self.family_offsets[family])
        return raw

    def log_kd(self, ab_seq, ag_seq, family):
        return -7.5 - 4.5 * np.tanh(6.0 * self.strength(ab_seq, ag_seq, family))

    def pair_strength(self, pair):
        return self.strength(pair.ab_seq, pair.ag_seq, pair.family)

    def pair_log_kd(self, pair):
        return self.log_kd(pair.ab_seq, pair.ag_seq, pair.family)

    def true_class(self, pair, t_low, t_high):
        y = self.pair_log_kd(pair)
        if y <= t_low:
            return -1
        return 0 if y <= t_high else 1

    def rank(self, pairs):
        """Candidates ordered strongest first, ties by pair id."""
        keyed = [(-self.pair_strength(p), p.pair_id) for p in pairs]
        order = sorted(range(len(pairs)), key=lambda i: keyed[i])
        return [pairs[i] for i in order]


def aa_frequencies(seq):
    counts = np.zeros(20)
    for ch in seq:
        counts[_AA_INDEX[ch]] += 1.0
    return counts / max(1, len(seq))


def residue_features(seq):
    """One-hot(20) plus sinusoidal position encodings; (L, 32)."""
    L = len(seq)
    feats = np.zeros((L, FEATURE_DIM))
    for i, ch in enumerate(seq):
        feats[i, _AA_INDEX[ch]] = 1.0
    pos = np.arange(L)[:, None]
    k = np.arange(N_POS_FEATURES // 2)[None, :]
    freq = 1.0 / np.power(100.0, 2.0 * k / N_POS_FEATURES)
    feats[:, 20:20 + N_POS_FEATURES // 2] = np.sin(pos * freq)
    feats[:, 20 + N_POS_FEATURES // 2:] = np.cos(pos * freq)
    return feats


def gen_structure(seq, seed):
    """Self-avoiding 3-D backbone walk plus jittered side-chain pseudo-atoms."""
    rng = np.random.default_rng(seed)
    L = len(seq)
    ca = np.zeros((L, 3))
    for i in range(1, L):
        placed = False
        for _ in range(64):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            cand = ca[i - 1] + CA_STEP * direction
            if i < 2 or np.min(np.linalg.norm(ca[:i - 1] - cand, axis=1)) >= MIN_CA_SEPARATION:
                placed = True
                break
        if not placed:  # dense fold; accept the last proposal
            cand = ca[i - 1] + CA_STEP * direction
        ca[i] = cand
    coords = []
    for i in range(L):
        n_side = rng.integers(1, 5)
        side = ca[i] + rng.uniform(-1.0, 1.0, size=(n_side, 3)) * 2.0 / np.sqrt(3.0)
        coords.append(np.vstack([ca[i][None, :], side]))
    return ResidueStructure(seq, coords)


def _random_seq(rng, lo, hi):
    length = int(rng.integers(lo, hi + 1))
    return "".join(AMINO_ACIDS[i] for i in rng.integers(0, 20, size=length))


def _mutate(seq, rate, rng):
    out = list(seq)
    for i in range(len(out)):
        if rng.random() < rate:
            out[i] = AMINO_ACIDS[int(rng.integers(0, 20))]
    return "".join(out)


def gen_dataset(cfg):
    """Build (dataset, oracle); bit-reproducible for a given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    oracle = AffinityOracle(
        cdr_weights=rng.uniform(-1.0, 1.0, size=20),
        ag_weights=rng.uniform(-1.0, 1.0, size=20),
        epitope_windows={f: (float(rng.random()), cfg.epitope_len)
                         for f in range(cfg.n_families)},
        family_offsets=rng.normal(size=cfg.n_families),
    )
    pairs = []
    pair_id = 0
    for fam in range(cfg.n_families):
        ancestor = _random_seq(rng, *cfg.ag_len_range)
        for _ in range(cfg.antigens_per_family):
            ag_seq = _mutate(ancestor, cfg.mutation_rate, rng)
            ag_struct = gen_structure(ag_seq, int(rng.integers(0, 2**31)))
            for _ in range(cfg.antibodies_per_antigen):
                ab_seq = _random_seq(rng, *cfg.ab_len_range)
                ab_struct = gen_structure(ab_seq, int(rng.integers(0, 2**31)))
                y = oracle.log_kd(ab_seq, ag_seq, fam)
                y_obs = y + cfg.label_noise * rng.normal()
                pairs.append(AbAgPair(pair_id, ab_seq, ag_seq, ab_struct,
                                      ag_struct, float(y_obs), fam))
                pair_id += 1
    # hide labels uniformly at random
    n = len(pairs)
    n_labeled = max(1, int(round(cfg.labeled_fraction * n)))
    labeled = set(rng.permutation(n)[:n_labeled].tolist())
    for i, p in enumerate(pairs):
        if i not in labeled:
            p.affinity = None
    return SynthDataset(pairs), oracle


def reveal_with_oracle(dataset, oracle):
    """Evaluation view: every pair labeled with its noiseless oracle log-Kd.

    Structures (and any cached graphs) are shared with the source pairs, so
    encoders see identical inputs; only the labels change.
    """
    pairs = [AbAgPair(p.pair_id, p.ab_seq, p.ag_seq, p.ab_structure,
                      p.ag_structure, float(oracle.pair_log_kd(p)), p.family,
                      _graphs=p._graphs)
             for p in dataset.pairs]
    return SynthDataset(pairs)


# --- dataset file format -------------------------------------------------
# One record per line, tab-separated:
#   id  ab_seq  ag_seq  ab_atom_counts  ab_coords  ag_atom_counts  ag_coords
#   affinity  family
# atom counts are comma-joined ints; coords are comma-joined repr() floats
# (byte-exact round trip); affinity is "-" when unlabeled.

def _coords_fields(structure):
    counts = ",".join(str(len(c)) for c in structure.coords)
    flat = np.concatenate(structure.coords, axis=0).reshape(-1)
    return counts, ",".join(repr(float(v)) for v in flat)


def _parse_coords(seq, counts_field, coords_field):
    counts = [int(v) for v in counts_field.split(",")]
    flat = np.array([float(v) for v in coords_field.split(",")])
    coords = []
    offset = 0
    for c in counts:
        coords.append(flat[offset:offset + 3 * c].reshape(c, 3))
        offset += 3 * c
    return ResidueStructure(seq, coords)


def save_dataset(dataset, path):
    with open(path, "w") as fh:
        for p in dataset.pairs:
            ab_counts, ab_coords = _coords_fields(p.ab_structure)
            ag_counts, ag_coords = _coords_fields(p.ag_structure)
            aff = "-" if p.affinity is None else repr(float(p.affinity))
            fh.write("\t".join([str(p.pair_id), p.ab_seq, p.ag_seq,
                                ab_counts, ab_coords, ag_counts, ag_coords,
                                aff, str(p.family)]) + "\n")


def load_dataset(path):
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            (pid, ab_seq, ag_seq, ab_counts, ab_coords,
             ag_counts, ag_coords, aff, fam) = line.split("\t")
            pairs.append(AbAgPair(
                int(pid), ab_seq, ag_seq,
                _parse_coords(ab_seq, ab_counts, ab_coords),
                _parse_coords(ag_seq, ag_counts, ag_coords),
                None if aff == "-" else float(aff), int(fam)))
    return SynthDataset(pairs)
