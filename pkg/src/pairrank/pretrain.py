"""PU pre-training: contrastive objectives, pseudo-label meta refinement, loop.

The stage trains the dual encoders plus classifier on labeled and unlabeled
pairs together. Each batch always pays the instance-contrastive alignment
between weak and strong views; after the warm-up epochs it additionally runs
the bi-level meta refinement of the unlabeled soft targets and the
cluster-aware contrastive term over robust positive sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import encoder

N_CLASSES = 3


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    knn_k: int = 5
    n_prototypes: int = 3
    warmup_epochs: int = 20
    rho_range: tuple = (0.8, 0.95)
    use_confidence_filter: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")


@dataclass
class PretrainConfig:
    epochs: int = 400
    batch_size: int = 64
    lr: float = 0.001
    meta_lr: float = 0.001
    meta_steps: int = 1
    virtual_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_momentum: float = 0.9
    val_fraction: float = 0.1
    meta_batch_cap: int = 16
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)


# --- target discretization ------------------------------------------------

def affinity_thresholds(labels):
    """Tertile cut points (t_low, t_high) of the labeled log-Kd values."""
    labels = np.asarray(labels, dtype=float)
    return float(np.quantile(labels, 1 / 3)), float(np.quantile(labels, 2 / 3))


def discretize_affinity(y, t_low, t_high):
    """Map log-Kd to class -1 (strong), 0 (medium) or 1 (weak)."""
    if not math.isfinite(y):
        raise ValueError("non-finite affinity")
    if y <= t_low:
        return -1
    return 0 if y <= t_high else 1


def class_to_column(cls):
    return cls + 1


def one_hot(cls_column):
    row = np.zeros(N_CLASSES)
    row[cls_column] = 1.0
    return row


@dataclass
class PseudoLabelState:
    """Soft target rows for the whole dataset plus the labeled mask."""

    targets: np.ndarray  # (N, 3) probability rows
    labeled_mask: np.ndarray  # (N,) bool
    beta: float
    warmup_epochs: int

    @classmethod
    def initialize(cls, dataset, t_low, t_high, beta, warmup_epochs):
        n = len(dataset)
        targets = np.zeros((n, N_CLASSES))
        mask = np.zeros(n, dtype=bool)
        for i, p in enumerate(dataset.pairs):
            if p.affinity is not None:
                col = class_to_column(discretize_affinity(p.affinity, t_low, t_high))
                mask[i] = True
            else:
                col = class_to_column(0)  # unlabeled start as the medium class
            targets[i] = one_hot(col)
        return cls(targets, mask, beta, warmup_epochs)


# --- contrastive losses ---------------------------------------------------

_NEG_MASK = -1e9  # exp() underflows to exactly 0, keeping values finite


def _log_denominator(e_weak_n, e_strong_n, tau):
    """Row-wise log Omega over both cross-view and intra-view negatives."""
    b = e_weak_n.shape[0]
    s_cross = dc.scale(dc.matmul(e_weak_n, dc.transpose(e_strong_n)), 1.0 / tau)
    s_intra = dc.scale(dc.matmul(e_weak_n, dc.transpose(e_weak_n)), 1.0 / tau)
    diag = dc.tensor(np.eye(b) * _NEG_MASK)
    stacked = dc.concat_cols([dc.add(s_cross, diag), dc.add(s_intra, diag)])
    return dc.logsumexp_rows(stacked)


def instance_loss(e_weak, e_strong, tau):
    """Align weak/strong views of the same pair against in-batch negatives.

    As written, the denominator sums only over j != i terms and does not
    include the positive pair itself.
    """
    b = e_weak.shape[0]
    if b < 2:
        raise ValueError("instance loss needs a batch of at least 2")
    e1 = dc.l2_normalize_rows(e_weak)
    e2 = dc.l2_normalize_rows(e_strong)
    pos = dc.sum_rows(dc.mul(e1, e2))  # (B, 1) of e'_i . e''_i
    log_num = dc.scale(pos, 1.0 / tau)
    loss = dc.sum_all(dc.sub(_log_denominator(e1, e2, tau), log_num))
    return dc.scale(loss, 1.0 / b)


def cluster_loss(e_weak, e_strong, positive_sets, tau):
    """Pull each query toward its semantic neighbors (weak-view rows)."""
    b = e_weak.shape[0]
    if all(len(s) == 0 for s in positive_sets):
        raise ValueError("all positive sets are empty")
    e1 = dc.l2_normalize_rows(e_weak)
    e2 = dc.l2_normalize_rows(e_strong)
    sims = dc.scale(dc.matmul(e1, dc.transpose(e1)), 1.0 / tau)  # (B, B)
    log_om = _log_denominator(e1, e2, tau)
    terms = []
    n_active = 0
    for i, pset in enumerate(positive_sets):
        if not pset:
            continue  # skipped; callers may log these
        n_active += 1
        row = dc.slice_rows(sims, i, i + 1)
        pos = dc.transpose(dc.gather_rows(dc.transpose(row), sorted(pset)))
        om_i = dc.slice_rows(log_om, i, i + 1)
        per = dc.sub(dc.scale(dc.sum_all(pos), 1.0 / len(pset)), dc.sum_all(om_i))
        terms.append(dc.neg(per))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / b)


# --- robust positive sets -------------------------------------------------

def kmeans_prototypes(points, n_proto, max_iter=100):
    """Lloyd's algorithm with deterministic farthest-point seeding."""
    points = np.asarray(points, dtype=float)
    b = points.shape[0]
    if b < n_proto:
        raise ValueError("fewer points than prototypes")
    center = points.mean(axis=0)
    first = int(np.argmax(np.linalg.norm(points - center, axis=1)))
    chosen = [first]
    for _ in range(1, n_proto):
        d = np.min(np.linalg.norm(points[:, None, :] - points[chosen][None, :, :],
                                  axis=2), axis=1)
        chosen.append(int(np.argmax(d)))
    centroids = points[chosen].copy()
    assign = None
    for _ in range(max_iter):
        d = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
        new_assign = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(n_proto):
            members = points[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return assign, centroids


def build_positive_set(i, embeddings_n, pred_classes, prototypes, k,
                       eligible=None):
    """(same-cluster AND same-prediction) UNION top-k cosine neighbors.

    ``eligible`` optionally restricts which other samples may serve as
    positives (the confidence-ramp filter); the query itself never appears.
    """
    b = embeddings_n.shape[0]
    if b < 2:
        raise ValueError("cannot build positive sets for a singleton batch")
    if eligible is None:
        eligible = np.ones(b, dtype=bool)
    others = [j for j in range(b) if j != i and eligible[j]]
    consensus = {j for j in others
                 if prototypes[j] == prototypes[i]
                 and pred_classes[j] == pred_classes[i]}
    sims = embeddings_n @ embeddings_n[i]
    ranked = sorted(others, key=lambda j: (-sims[j], j))
    knn = set(ranked[:k])
    return consensus | knn


# --- bi-level meta refinement --------------------------------------------

def ce_loss(logits, targets):
    """Mean cross-entropy against (possibly soft or perturbed) target rows."""
    b = logits.shape[0]
    t = targets if isinstance(targets, dc.Tensor) else dc.tensor(targets)
    return dc.scale(dc.neg(dc.sum_all(dc.mul(t, dc.log_softmax_rows(logits)))),
                    1.0 / b)


def virtual_update(params, train_embeddings, soft_targets, alpha):
    """One retained-graph SGD step of the classification branch.

    Returns a params dict whose tensors keep their dependence on whatever
    leaves ``soft_targets`` involves (the perturbation, during meta steps).
    """
    loss = ce_loss(encoder.classify_logits(train_embeddings, params), soft_targets)
    grads = dc.backward(loss, retain=True)
    updated = {}
    for name, p in params.items():
        g = grads.get(id(p))
        updated[name] = p if g is None else dc.sub(p, dc.scale(g, alpha))
    return updated


def meta_delta(params, train_pairs, train_targets, labeled_rows,
               val_pairs, val_target_rows, cfg, rng):
    """Optimal perturbation of the batch soft targets via second-order descent.

    Labeled rows of the perturbation are pinned to zero throughout.
    Returns (delta, descent_achieved) where descent compares validation CE
    at the returned perturbation against the unperturbed virtual step.
    """
    if len(val_pairs) == 0:
        raise ValueError("empty validation batch")
    b = len(train_pairs)
    mask = np.ones((b, 1))
    mask[np.asarray(labeled_rows, dtype=bool)] = 0.0
    mask_t = dc.tensor(np.broadcast_to(mask, (b, N_CLASSES)).copy())
    delta = dc.tensor(np.zeros((b, N_CLASSES)), requires_grad=True)
    targets_t = dc.tensor(train_targets)
    val_targets_t = dc.tensor(val_target_rows)

    train_emb = encoder.encode_batch(train_pairs, "weak", params, rng)

    def val_loss_at(delta_tensor):
        soft = dc.add(targets_t, dc.mul(delta_tensor, mask_t))
        theta2 = virtual_update(params, train_emb, soft, cfg.virtual_lr)
        # validation representations use the virtually updated encoder
        val_emb = encoder.encode_batch(val_pairs, "base", theta2)
        return ce_loss(encoder.classify_logits(val_emb, theta2), val_targets_t)

    base_loss = None
    for _ in range(cfg.meta_steps):
        loss = val_loss_at(delta)
        if base_loss is None:
            base_loss = loss.item()
        delta.zero_grad()
        dc.backward(loss)
        delta = dc.tensor(delta.data - cfg.meta_lr * delta.grad * mask,
                          requires_grad=True)
    # the virtual step needs a live graph, so evaluate with a detached delta
    # rather than under no_grad
    final_loss = val_loss_at(delta.detach()).item()
    for p in params.values():
        p.zero_grad()
    delta_np = delta.data * mask
    return delta_np, final_loss <= base_loss


def refine_and_ema(targets, delta, beta, labeled_rows, ground_truth_rows):
    """One-hot the perturbed rows, EMA-blend, restore labeled ground truth.

    Argmax ties break toward the lowest class column.
    """
    perturbed = targets + delta
    meta = np.zeros_like(targets)
    meta[np.arange(len(targets)), perturbed.argmax(axis=1)] = 1.0
    out = beta * targets + (1 - beta) * meta
    labeled_rows = np.asarray(labeled_rows, dtype=bool)
    out[labeled_rows] = ground_truth_rows[labeled_rows]
    return out


# --- training loop --------------------------------------------------------

def _rho_threshold(epoch, epochs, warmup, rho_range):
    lo, hi = rho_range
    span = max(1, epochs - warmup - 1)
    frac = min(1.0, max(0.0, (epoch - warmup - 1) / span))
    return lo + (hi - lo) * frac


@dataclass
class EpochReport:
    epoch: int
    ce: float
    instance: float
    cluster: float
    pseudo_accuracy: float | None = None

    def line(self):
        acc = "-" if self.pseudo_accuracy is None else f"{self.pseudo_accuracy:.4f}"
        return (f"{self.epoch}\t{self.ce:.6f}\t{self.instance:.6f}"
                f"\t{self.cluster:.6f}\t{acc}")


def pretrain_epoch(dataset, params, state, optimizer, epoch, cfg, rng,
                   train_indices, val_indices, oracle_classes=None):
    """One pass of the pre-training loop; mutates params and state."""
    cc = cfg.contrastive
    order = rng.permutation(len(train_indices))
    ce_sum = ins_sum = clus_sum = 0.0
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        batch_idx = [train_indices[j] for j in order[start:start + cfg.batch_size]]
        if len(batch_idx) < 2:
            continue
        pairs = [dataset.pairs[i] for i in batch_idx]
        labeled_rows = state.labeled_mask[batch_idx]

        if epoch > state.warmup_epochs:
            meta_train = batch_idx[:cfg.meta_batch_cap]
            meta_pairs = [dataset.pairs[i] for i in meta_train]
            n_val = min(len(val_indices), cfg.meta_batch_cap)
            val_sel = [val_indices[j] for j in
                       rng.choice(len(val_indices), size=n_val, replace=False)]
            val_pairs = [dataset.pairs[i] for i in val_sel]
            delta, _ = meta_delta(
                params, meta_pairs, state.targets[meta_train],
                state.labeled_mask[meta_train], val_pairs,
                state.targets[val_sel], cfg, rng)
            gt_rows = state.targets[meta_train]
            state.targets[meta_train] = refine_and_ema(
                state.targets[meta_train], delta, state.beta,
                state.labeled_mask[meta_train], gt_rows)

        e_weak = encoder.encode_batch(pairs, "weak", params, rng)
        e_strong = encoder.encode_batch(pairs, "strong", params, rng)
        loss_ins = instance_loss(e_weak, e_strong, cc.temperature)

        loss_clus = None
        if epoch > state.warmup_epochs:
            with dc.no_grad():
                probs = encoder.classify(e_weak, params).data
            emb_n = e_weak.data / np.maximum(
                np.linalg.norm(e_weak.data, axis=1, keepdims=True), 1e-30)
            protos, _ = kmeans_prototypes(emb_n, min(cc.n_prototypes, len(pairs)))
            preds = probs.argmax(axis=1)
            eligible = np.ones(len(pairs), dtype=bool)
            if cc.use_confidence_filter:
                rho = _rho_threshold(epoch, cfg.epochs, state.warmup_epochs,
                                     cc.rho_range)
                eligible = labeled_rows | (probs.max(axis=1) >= rho)
            psets = [build_positive_set(i, emb_n, preds, protos, cc.knn_k,
                                        eligible)
                     for i in range(len(pairs))]
            if any(psets):
                loss_clus = cluster_loss(e_weak, e_strong, psets,
                                         cc.temperature)

        loss_ce = ce_loss(encoder.classify_logits(e_weak, params),
                          state.targets[batch_idx])
        total = dc.add(loss_ce, loss_ins)
        if loss_clus is not None:
            total = dc.add(total, loss_clus)
        for p in params.values():
            p.zero_grad()
        dc.backward(total)
        optimizer.step(params)

        ce_sum += loss_ce.item()
        ins_sum += loss_ins.item()
        clus_sum += 0.0 if loss_clus is None else loss_clus.item()
        n_batches += 1

    acc = None
    if oracle_classes is not None:
        unlabeled = ~state.labeled_mask
        if unlabeled.any():
            pred_cols = state.targets[unlabeled].argmax(axis=1)
            acc = float(np.mean(pred_cols == oracle_classes[unlabeled]))
    return EpochReport(epoch, ce_sum / max(1, n_batches),
                       ins_sum / max(1, n_batches),
                       clus_sum / max(1, n_batches), acc)


def run_pretrain(dataset, cfg, seed, oracle=None, log_fn=None):
    """Full PU pre-training; returns (params, state, reports)."""
    rng = np.random.default_rng(seed)
    params = encoder.init_encoder_params(rng)
    labeled = dataset.labeled_indices
    labels = [dataset.pairs[i].affinity for i in labeled]
    t_low, t_high = affinity_thresholds(labels)
    state = PseudoLabelState.initialize(dataset, t_low, t_high,
                                        cfg.ema_momentum,
                                        cfg.contrastive.warmup_epochs)

    n_val = max(1, int(round(cfg.val_fraction * len(labeled))))
    val_order = rng.permutation(len(labeled))
    val_indices = [labeled[j] for j in val_order[:n_val]]
    val_set = set(val_indices)
    train_indices = [i for i in range(len(dataset)) if i not in val_set]

    oracle_classes = None
    if oracle is not None:
        oracle_classes = np.array(
            [class_to_column(oracle.true_class(p, t_low, t_high))
             for p in dataset.pairs])

    opt = dc.OptimizerState(kind="sgd", lr=cfg.lr, momentum=cfg.momentum,
                            weight_decay=cfg.weight_decay)
    reports = []
    for epoch in range(1, cfg.epochs + 1):
        rep = pretrain_epoch(dataset, params, state, opt, epoch, cfg, rng,
                             train_indices, val_indices, oracle_classes)
        reports.append(rep)
        if log_fn is not None:
            log_fn(rep.line())
    return params, state, reports
