"""Dual two-layer GCN encoders, mean pooling, and the 3-class affinity head.

Each branch computes H = ReLU(A ReLU(A H0 W1) W2) on its contact graph; the
pair embedding concatenates the mean-pooled antibody and antigen vectors into
a 128-dim row. Parameters live in a flat name -> Tensor dict so snapshots and
checkpoints stay trivial.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import protograph, synthdata

D_IN = synthdata.FEATURE_DIM  # 32
D_HIDDEN = 128
D_OUT = 64
N_CLASSES = 3

VIEWS = ("base", "weak", "strong")


def _glorot(rng, fan_in, fan_out):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def init_encoder_params(rng, d_in=D_IN, d_hidden=D_HIDDEN, d_out=D_OUT):
    params = {}
    for branch in ("ab", "ag"):
        params[f"{branch}.w1"] = dc.tensor(_glorot(rng, d_in, d_hidden), requires_grad=True)
        params[f"{branch}.w2"] = dc.tensor(_glorot(rng, d_hidden, d_out), requires_grad=True)
    params["cls.w"] = dc.tensor(_glorot(rng, 2 * d_out, N_CLASSES), requires_grad=True)
    params["cls.b"] = dc.tensor(np.zeros((1, N_CLASSES)), requires_grad=True)
    return params


def gcn_forward(graph, w1, w2):
    """Node matrix after both propagation layers, shape (L, d_out)."""
    if graph.features.shape[1] != w1.shape[0]:
        raise ValueError("feature width does not match first-layer weights")
    a = dc.tensor(graph.adjacency)
    h0 = dc.tensor(graph.features)
    h1 = dc.relu(dc.matmul(dc.matmul(a, h0), w1))
    return dc.relu(dc.matmul(dc.matmul(a, h1), w2))


def pair_graphs(pair):
    """Base contact graphs for a pair, built once and cached on the pair."""
    if pair._graphs is None:
        ab = protograph.build_graph(pair.ab_structure,
                                    synthdata.residue_features(pair.ab_seq))
        ag = protograph.build_graph(pair.ag_structure,
                                    synthdata.residue_features(pair.ag_seq))
        pair._graphs = (ab, ag)
    return pair._graphs


def encode_pair(pair, view, params, rng=None,
                weak_cfg=protograph.WEAK_AUGMENT,
                strong_cfg=protograph.STRONG_AUGMENT):
    """Pair embedding (1, 128) for the requested augmentation view."""
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    ab_g, ag_g = pair_graphs(pair)
    if view != "base":
        if rng is None:
            raise ValueError("augmented views need an RNG stream")
        cfg = weak_cfg if view == "weak" else strong_cfg
        ab_g = protograph.augment(ab_g, cfg, rng)
        ag_g = protograph.augment(ag_g, cfg, rng)
    h_ab = dc.mean_rows(gcn_forward(ab_g, params["ab.w1"], params["ab.w2"]))
    h_ag = dc.mean_rows(gcn_forward(ag_g, params["ag.w1"], params["ag.w2"]))
    return dc.concat_cols([h_ab, h_ag])


def encode_batch(pairs, view, params, rng=None, **kw):
    """Stack per-pair embeddings into a (B, 128) tensor."""
    return dc.concat_rows([encode_pair(p, view, params, rng, **kw) for p in pairs])


def classify_logits(embeddings, params):
    return dc.add(dc.matmul(embeddings, params["cls.w"]),
                  dc.broadcast_to(params["cls.b"],
                                  (embeddings.shape[0], N_CLASSES)))


def classify(embeddings, params):
    """Class probability rows, shape (B, 3)."""
    return dc.softmax_rows(classify_logits(embeddings, params))
