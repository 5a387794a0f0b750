"""Listwise ranking head: ISAB layers, linear score head, ListMLE training.

A list's K pair embeddings are projected to d_r, passed through N_r induced
set attention layers (M inducing points mediating the information flow), and
mapped to scalar scores. Training maximizes the Plackett-Luce likelihood of
the ground-truth order; ablation hooks swap in MSE regression or a per-row
MLP in place of the attention stack.

Scores follow the internal strength convention: higher score = stronger
binding, with strength = -log Kd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import encoder

D_RANK = 64
N_LAYERS = 2
N_HEADS = 4
N_INDUCING = 5


@dataclass
class RankConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.001
    weight_decay: float = 0.3
    dropout: float = 0.2
    d_rank: int = D_RANK
    n_layers: int = N_LAYERS
    n_heads: int = N_HEADS
    n_inducing: int = N_INDUCING
    variant: str = "full"  # full | mse | mlp
    freeze_encoder: bool = False


def strength(log_kd):
    """Canonical strength: negated log-Kd so stronger binders score higher."""
    return -np.asarray(log_kd, dtype=float)


def init_ranker_params(rng, d_in=2 * encoder.D_OUT, d_r=D_RANK,
                       n_layers=N_LAYERS, m=N_INDUCING):
    def glorot(fi, fo):
        return rng.normal(0.0, math.sqrt(2.0 / (fi + fo)), size=(fi, fo))

    params = {
        "rank.proj.w": dc.tensor(glorot(d_in, d_r), requires_grad=True),
        "rank.proj.b": dc.tensor(np.zeros((1, d_r)), requires_grad=True),
        "rank.score.w": dc.tensor(glorot(d_r, 1), requires_grad=True),
        "rank.score.b": dc.tensor(np.zeros((1, 1)), requires_grad=True),
    }
    for layer in range(n_layers):
        pre = f"rank.isab{layer}"
        params[f"{pre}.ind"] = dc.tensor(rng.normal(size=(m, d_r)),
                                         requires_grad=True)
        for att in ("att_ind", "att_out"):
            for w in ("wq", "wk", "wv", "wo"):
                params[f"{pre}.{att}.{w}"] = dc.tensor(glorot(d_r, d_r),
                                                       requires_grad=True)
        params[f"{pre}.rff.w1"] = dc.tensor(glorot(d_r, d_r), requires_grad=True)
        params[f"{pre}.rff.b1"] = dc.tensor(np.zeros((1, d_r)), requires_grad=True)
        params[f"{pre}.rff.w2"] = dc.tensor(glorot(d_r, d_r), requires_grad=True)
        params[f"{pre}.rff.b2"] = dc.tensor(np.zeros((1, d_r)), requires_grad=True)
    return params


def init_mlp_params(rng, d_in=2 * encoder.D_OUT, d_r=D_RANK):
    """Per-row perceptron stand-in for the attention stack (ablation)."""
    def glorot(fi, fo):
        return rng.normal(0.0, math.sqrt(2.0 / (fi + fo)), size=(fi, fo))

    return {
        "rank.mlp.w1": dc.tensor(glorot(d_in, d_r), requires_grad=True),
        "rank.mlp.b1": dc.tensor(np.zeros((1, d_r)), requires_grad=True),
        "rank.mlp.w2": dc.tensor(glorot(d_r, d_r), requires_grad=True),
        "rank.mlp.b2": dc.tensor(np.zeros((1, d_r)), requires_grad=True),
        "rank.score.w": dc.tensor(glorot(d_r, 1), requires_grad=True),
        "rank.score.b": dc.tensor(np.zeros((1, 1)), requires_grad=True),
    }


def _linear(x, w, b):
    return dc.add(dc.matmul(x, w), dc.broadcast_to(b, (x.shape[0], w.shape[1])))


def mha(q, kv, params, prefix, n_heads=N_HEADS, dropout=0.0, rng=None):
    """Scaled dot-product multi-head attention, output-projected."""
    d = q.shape[1]
    if d % n_heads:
        raise ValueError("model width must divide the head count")
    dh = d // n_heads
    qp = dc.matmul(q, params[f"{prefix}.wq"])
    kp = dc.matmul(kv, params[f"{prefix}.wk"])
    vp = dc.matmul(kv, params[f"{prefix}.wv"])
    heads = []
    for h in range(n_heads):
        qh = dc.slice_cols(qp, h * dh, (h + 1) * dh)
        kh = dc.slice_cols(kp, h * dh, (h + 1) * dh)
        vh = dc.slice_cols(vp, h * dh, (h + 1) * dh)
        att = dc.softmax_rows(dc.scale(dc.matmul(qh, dc.transpose(kh)),
                                       1.0 / math.sqrt(dh)))
        heads.append(dc.matmul(att, vh))
    out = dc.matmul(dc.concat_cols(heads), params[f"{prefix}.wo"])
    if dropout > 0.0:
        out = dc.mul(out, dc.dropout_mask(out.shape, 1.0 - dropout, rng))
    return out


def isab_layer(z, params, prefix, n_heads=N_HEADS, train=False, dropout=0.2,
               rng=None):
    """Induced attention: inducing points summarize the set, then redistribute."""
    p_drop = dropout if train else 0.0
    ind = params[f"{prefix}.ind"]
    h_ind = dc.add(mha(ind, z, params, f"{prefix}.att_ind", n_heads,
                       p_drop, rng), ind)
    mixed = dc.add(mha(z, h_ind, params, f"{prefix}.att_out", n_heads,
                       p_drop, rng), z)
    hidden = dc.relu(_linear(mixed, params[f"{prefix}.rff.w1"],
                             params[f"{prefix}.rff.b1"]))
    if p_drop > 0.0:
        hidden = dc.mul(hidden, dc.dropout_mask(hidden.shape, 1.0 - p_drop, rng))
    return _linear(hidden, params[f"{prefix}.rff.w2"], params[f"{prefix}.rff.b2"])


def score_list(embeddings, params, cfg=None, train=False, rng=None):
    """Scores for a list's embedding matrix (K, 128) -> tensor (K, 1)."""
    cfg = cfg or RankConfig()
    if cfg.variant == "mlp":
        h = dc.relu(_linear(embeddings, params["rank.mlp.w1"],
                            params["rank.mlp.b1"]))
        z = dc.relu(_linear(h, params["rank.mlp.w2"], params["rank.mlp.b2"]))
    else:
        z = _linear(embeddings, params["rank.proj.w"], params["rank.proj.b"])
        for layer in range(cfg.n_layers):
            z = isab_layer(z, params, f"rank.isab{layer}", cfg.n_heads,
                           train=train, dropout=cfg.dropout, rng=rng)
    return _linear(z, params["rank.score.w"], params["rank.score.b"])


def true_permutation(strengths):
    """Indices sorted strongest first; ties break by original index."""
    s = np.asarray(strengths, dtype=float)
    return np.argsort(-s, kind="stable")


def listmle_loss(scores, strengths):
    """Negative Plackett-Luce log-likelihood of the true order."""
    if not np.all(np.isfinite(scores.data)):
        raise FloatingPointError("non-finite scores")
    pi = true_permutation(strengths)
    row = dc.transpose(dc.gather_rows(scores, pi))  # (1, K)
    k = row.shape[1]
    total = dc.tensor(np.zeros((1, 1)))
    for i in range(k):
        lse = dc.logsumexp_rows(dc.slice_cols(row, i, k))
        total = dc.add(total, dc.sub(lse, dc.slice_cols(row, i, i + 1)))
    return dc.sum_all(total)


def mse_list_loss(scores, strengths):
    """Absolute-strength regression objective for the no-ListMLE ablation."""
    target = dc.tensor(np.asarray(strengths, dtype=float).reshape(-1, 1))
    diff = dc.sub(scores, target)
    return dc.scale(dc.sum_all(dc.mul(diff, diff)), 1.0 / len(strengths))


def score_lists(lists, dataset, params, cfg=None):
    """Eval-mode scores for many lists; returns list of (K,) arrays."""
    cfg = cfg or RankConfig()
    out = []
    with dc.no_grad():
        for rl in lists:
            pairs = [dataset.pairs[i] for i in rl.members]
            emb = encoder.encode_batch(pairs, "base", params)
            out.append(score_list(emb, params, cfg).data.reshape(-1))
    return out


def finetune_epoch(lists, dataset, params, optimizer, trainable, cfg, rng):
    """One pass over the list collection; returns the mean list loss."""
    order = rng.permutation(len(lists))
    loss_fn = mse_list_loss if cfg.variant == "mse" else listmle_loss
    total_loss = 0.0
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [lists[j] for j in order[start:start + cfg.batch_size]]
        terms = []
        for rl in batch:
            pairs = [dataset.pairs[i] for i in rl.members]
            emb = encoder.encode_batch(pairs, "base", params)
            scores = score_list(emb, params, cfg, train=True, rng=rng)
            terms.append(loss_fn(scores, strength(rl.labels)))
        loss = terms[0]
        for t in terms[1:]:
            loss = dc.add(loss, t)
        loss = dc.scale(loss, 1.0 / len(batch))
        for p in params.values():
            p.zero_grad()
        dc.backward(loss)
        optimizer.step(trainable)
        total_loss += loss.item()
        n_batches += 1
    return total_loss / max(1, n_batches)


def run_finetune(lists, dataset, enc_params, cfg, seed, log_fn=None):
    """Algorithm: embed lists, score, ListMLE, Adam on encoder + ranker.

    ``enc_params`` may come from a PU checkpoint or fresh initialization
    (the no-PU ablation). Returns (params, losses).
    """
    rng = np.random.default_rng(seed)
    if cfg.variant == "mlp":
        rank_params = init_mlp_params(rng)
    else:
        rank_params = init_ranker_params(rng, d_r=cfg.d_rank,
                                         n_layers=cfg.n_layers,
                                         m=cfg.n_inducing)
    # copy the encoder weights so the caller's tensors stay untouched; the
    # classification head plays no role in ranking and would sit gradient-less
    params = {k: dc.tensor(v.data.copy(), requires_grad=True)
              for k, v in enc_params.items() if not k.startswith("cls.")}
    params.update(rank_params)
    trainable = rank_params if cfg.freeze_encoder else params
    opt = dc.OptimizerState(kind="adam", lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        mean_loss = finetune_epoch(lists, dataset, params, opt, trainable,
                                   cfg, rng)
        losses.append(mean_loss)
        if log_fn is not None:
            log_fn(f"{epoch}\t{mean_loss:.6f}")
    return params, losses


def aggregate_global_rank(scored):
    """Mean score per candidate across lists; descending, ties by id.

    ``scored`` is an iterable of (member_ids, scores) tuples. Every candidate
    must occur in at least one list.
    """
    sums, counts = {}, {}
    for ids, scores in scored:
        for cid, s in zip(ids, scores):
            sums[cid] = sums.get(cid, 0.0) + float(s)
            counts[cid] = counts.get(cid, 0) + 1
    if not sums:
        raise ValueError("no scored candidates")
    means = {cid: sums[cid] / counts[cid] for cid in sums}
    return sorted(means, key=lambda cid: (-means[cid], cid)), means
