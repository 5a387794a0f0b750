"""Dual GCN encoders: shapes, gradient flow, view behavior, classifier head."""

import numpy as np
import pytest

from pairrank import diffcore as dc
from pairrank import encoder
from pairrank.synthdata import SynthConfig, gen_dataset


@pytest.fixture(scope="module")
def tiny():
    ds, _ = gen_dataset(SynthConfig(
        n_families=2, antigens_per_family=1, antibodies_per_antigen=3,
        ab_len_range=(8, 12), ag_len_range=(15, 20),
        labeled_fraction=1.0, seed=3))
    return ds


def test_param_shapes():
    params = encoder.init_encoder_params(np.random.default_rng(0))
    assert params["ab.w1"].shape == (32, 128)
    assert params["ab.w2"].shape == (128, 64)
    assert params["ag.w1"].shape == (32, 128)
    assert params["ag.w2"].shape == (128, 64)
    assert params["cls.w"].shape == (128, 3)
    assert params["cls.b"].shape == (1, 3)
    assert all(p.requires_grad for p in params.values())


def test_embedding_shape_and_determinism(tiny):
    params = encoder.init_encoder_params(np.random.default_rng(0))
    e = encoder.encode_batch(tiny.pairs[:4], "base", params)
    assert e.shape == (4, 128)
    e2 = encoder.encode_batch(tiny.pairs[:4], "base", params)
    np.testing.assert_array_equal(e.data, e2.data)


def test_pair_embedding_concatenates_branches(tiny):
    """Perturbing antigen weights only moves the second half of the row."""
    rng = np.random.default_rng(0)
    params = encoder.init_encoder_params(rng)
    base = encoder.encode_pair(tiny.pairs[0], "base", params).data
    params["ag.w1"].data = params["ag.w1"].data + 0.1
    moved = encoder.encode_pair(tiny.pairs[0], "base", params).data
    np.testing.assert_array_equal(base[:, :64], moved[:, :64])
    assert not np.array_equal(base[:, 64:], moved[:, 64:])


def test_augmented_views_need_rng_and_differ(tiny):
    params = encoder.init_encoder_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        encoder.encode_pair(tiny.pairs[0], "weak", params)
    with pytest.raises(ValueError):
        encoder.encode_pair(tiny.pairs[0], "bogus", params,
                            np.random.default_rng(0))
    rng = np.random.default_rng(1)
    w = encoder.encode_pair(tiny.pairs[0], "weak", params, rng).data
    s = encoder.encode_pair(tiny.pairs[0], "strong", params, rng).data
    b = encoder.encode_pair(tiny.pairs[0], "base", params).data
    assert not np.array_equal(w, b)
    assert not np.array_equal(s, b)


def test_gradients_reach_every_weight(tiny):
    params = encoder.init_encoder_params(np.random.default_rng(0))
    e = encoder.encode_batch(tiny.pairs[:3], "base", params)
    logits = encoder.classify_logits(e, params)
    dc.backward(dc.sum_all(dc.mul(logits, logits)))
    for name, p in params.items():
        assert p.grad is not None, name
        assert np.any(p.grad != 0), name


def test_gcn_forward_matches_manual(tiny):
    """Single-graph forward equals a straight numpy evaluation."""
    params = encoder.init_encoder_params(np.random.default_rng(0))
    ab_g, _ = encoder.pair_graphs(tiny.pairs[0])
    out = encoder.gcn_forward(ab_g, params["ab.w1"], params["ab.w2"]).data
    a, h0 = ab_g.adjacency, ab_g.features
    h1 = np.maximum(a @ h0 @ params["ab.w1"].data, 0.0)
    h2 = np.maximum(a @ h1 @ params["ab.w2"].data, 0.0)
    np.testing.assert_allclose(out, h2, rtol=1e-12)


def test_gcn_forward_gradcheck(tiny):
    from test_diffcore import check_grad
    ab_g, _ = encoder.pair_graphs(tiny.pairs[0])
    rng = np.random.default_rng(4)
    w2 = dc.tensor(rng.normal(size=(6, 4)))

    def build(w1):
        out = encoder.gcn_forward(ab_g, w1, w2)
        return dc.sum_all(dc.mul(out, out))

    check_grad(build, rng.normal(size=(32, 6)) * 0.3)


def test_classifier_probabilities(tiny):
    params = encoder.init_encoder_params(np.random.default_rng(0))
    e = encoder.encode_batch(tiny.pairs[:5], "base", params)
    probs = encoder.classify(e, params).data
    assert probs.shape == (5, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert probs.min() >= 0


def test_graph_cache_reused(tiny):
    p = tiny.pairs[1]
    p._graphs = None
    g1 = encoder.pair_graphs(p)
    g2 = encoder.pair_graphs(p)
    assert g1 is g2


def test_feature_width_mismatch_rejected(tiny):
    params = encoder.init_encoder_params(np.random.default_rng(0), d_in=16)
    ab_g, _ = encoder.pair_graphs(tiny.pairs[0])
    with pytest.raises(ValueError):
        encoder.gcn_forward(ab_g, params["ab.w1"], params["ab.w2"])
