"""PU pre-training mechanics: losses, k-means, positive sets, meta refinement."""

import numpy as np
import pytest

from pairrank import diffcore as dc
from pairrank import encoder, pretrain
from pairrank.pretrain import (ContrastiveConfig, PretrainConfig,
                               PseudoLabelState, affinity_thresholds,
                               build_positive_set, ce_loss, class_to_column,
                               cluster_loss, discretize_affinity,
                               instance_loss, kmeans_prototypes, meta_delta,
                               refine_and_ema, virtual_update)
from pairrank.synthdata import SynthConfig, gen_dataset
from test_diffcore import check_grad, numeric_grad


@pytest.fixture(scope="module")
def tiny():
    ds, _ = gen_dataset(SynthConfig(
        n_families=3, antigens_per_family=2, antibodies_per_antigen=6,
        ab_len_range=(8, 12), ag_len_range=(15, 22),
        labeled_fraction=0.5, seed=5))
    return ds


# --- discretization -------------------------------------------------------

def test_thresholds_are_tertiles():
    labels = list(range(1, 10))  # 1..9
    t_low, t_high = affinity_thresholds(labels)
    assert t_low == pytest.approx(np.quantile(labels, 1 / 3))
    assert t_high == pytest.approx(np.quantile(labels, 2 / 3))


def test_discretize_boundaries():
    assert discretize_affinity(-10.0, -8.0, -6.0) == -1
    assert discretize_affinity(-8.0, -8.0, -6.0) == -1  # boundary goes low
    assert discretize_affinity(-7.0, -8.0, -6.0) == 0
    assert discretize_affinity(-6.0, -8.0, -6.0) == 0
    assert discretize_affinity(-5.0, -8.0, -6.0) == 1
    with pytest.raises(ValueError):
        discretize_affinity(float("nan"), -8.0, -6.0)


def test_pseudo_state_initialization(tiny):
    state = PseudoLabelState.initialize(tiny, -9.0, -6.0, 0.9, 20)
    assert state.targets.shape == (len(tiny), 3)
    np.testing.assert_allclose(state.targets.sum(axis=1), 1.0)
    for i, p in enumerate(tiny.pairs):
        if p.affinity is None:
            assert not state.labeled_mask[i]
            # unlabeled start as the medium class (column 1)
            np.testing.assert_array_equal(state.targets[i], [0.0, 1.0, 0.0])
        else:
            assert state.labeled_mask[i]
            col = class_to_column(discretize_affinity(p.affinity, -9.0, -6.0))
            assert state.targets[i, col] == 1.0


# --- contrastive losses ---------------------------------------------------

def manual_instance_loss(ew, es, tau):
    """Direct transcription of the alignment objective for a numpy batch."""
    ew = ew / np.linalg.norm(ew, axis=1, keepdims=True)
    es = es / np.linalg.norm(es, axis=1, keepdims=True)
    b = len(ew)
    total = 0.0
    for i in range(b):
        num = np.exp(ew[i] @ es[i] / tau)
        om = sum(np.exp(ew[i] @ es[j] / tau) + np.exp(ew[i] @ ew[j] / tau)
                 for j in range(b) if j != i)
        total += -np.log(num / om)
    return total / b


def test_instance_loss_matches_manual():
    rng = np.random.default_rng(0)
    for _ in range(5):
        ew = rng.normal(size=(6, 8))
        es = rng.normal(size=(6, 8))
        got = instance_loss(dc.tensor(ew), dc.tensor(es), 0.07).item()
        assert got == pytest.approx(manual_instance_loss(ew, es, 0.07), rel=1e-10)


def test_instance_loss_excludes_positive_from_denominator():
    """With orthogonal negatives the loss depends only on the i!=j terms."""
    ew = np.eye(3)
    es = np.eye(3)
    tau = 1.0
    got = instance_loss(dc.tensor(ew), dc.tensor(es), tau).item()
    # each row: num=e^1, Omega = 2*(e^0 + e^0) = 4 -> loss = -(1 - ln 4)
    assert got == pytest.approx(-(1.0 - np.log(4.0)), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_instance_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    es = dc.tensor(rng.normal(size=(5, 6)))

    def build(t):
        return instance_loss(t, es, 0.2)

    check_grad(build, rng.normal(size=(5, 6)), rtol=1e-4)


def manual_cluster_loss(ew, es, psets, tau):
    ewn = ew / np.linalg.norm(ew, axis=1, keepdims=True)
    esn = es / np.linalg.norm(es, axis=1, keepdims=True)
    b = len(ew)
    total = 0.0
    for i, pset in enumerate(psets):
        if not pset:
            continue
        om = sum(np.exp(ewn[i] @ esn[j] / tau) + np.exp(ewn[i] @ ewn[j] / tau)
                 for j in range(b) if j != i)
        inner = np.mean([ewn[i] @ ewn[j] / tau for j in sorted(pset)])
        total += -(inner - np.log(om))
    return total / b


def test_cluster_loss_matches_manual():
    rng = np.random.default_rng(1)
    ew = rng.normal(size=(6, 8))
    es = rng.normal(size=(6, 8))
    psets = [{1, 2}, {0}, set(), {4, 5}, {3}, {0, 1, 2}]
    got = cluster_loss(dc.tensor(ew), dc.tensor(es), psets, 0.1).item()
    assert got == pytest.approx(manual_cluster_loss(ew, es, psets, 0.1), rel=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_cluster_loss_gradcheck(seed):
    rng = np.random.default_rng(seed)
    es = dc.tensor(rng.normal(size=(5, 6)))
    psets = [{1, 3}, {2}, {0, 4}, set(), {1}]

    def build(t):
        return cluster_loss(t, es, psets, 0.15)

    check_grad(build, rng.normal(size=(5, 6)), rtol=1e-4)


def test_cluster_loss_rejects_all_empty():
    e = dc.tensor(np.random.default_rng(0).normal(size=(3, 4)))
    with pytest.raises(ValueError):
        cluster_loss(e, e, [set(), set(), set()], 0.1)


# --- k-means and positive sets -------------------------------------------

def test_kmeans_separates_obvious_clusters():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(20, 3)) * 0.1 + np.array([10, 0, 0])
    b = rng.normal(size=(20, 3)) * 0.1 + np.array([-10, 0, 0])
    pts = np.vstack([a, b])
    assign, centroids = kmeans_prototypes(pts, 2)
    assert len(set(assign[:20])) == 1
    assert len(set(assign[20:])) == 1
    assert assign[0] != assign[20]


def test_kmeans_deterministic():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(30, 4))
    a1, c1 = kmeans_prototypes(pts, 3)
    a2, c2 = kmeans_prototypes(pts, 3)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(c1, c2)


def test_kmeans_rejects_too_few_points():
    with pytest.raises(ValueError):
        kmeans_prototypes(np.zeros((2, 3)), 3)


def test_positive_set_consensus_and_knn():
    emb = np.array([[1.0, 0.0], [0.99, 0.1], [0.0, 1.0], [-1.0, 0.0]])
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    protos = np.array([0, 0, 1, 1])
    preds = np.array([2, 2, 2, 0])
    pset = build_positive_set(0, emb, preds, protos, k=1)
    # consensus: j=1 (same proto, same pred); knn k=1 -> closest is also 1
    assert pset == {1}
    pset = build_positive_set(0, emb, preds, protos, k=2)
    assert pset == {1, 2}  # second-closest neighbor joins via knn


def test_positive_set_respects_eligibility():
    emb = np.eye(4)
    protos = np.zeros(4, dtype=int)
    preds = np.zeros(4, dtype=int)
    eligible = np.array([True, False, True, True])
    pset = build_positive_set(0, emb, preds, protos, k=3, eligible=eligible)
    assert 1 not in pset
    assert pset == {2, 3}


def test_positive_set_never_contains_query():
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(10, 5))
    protos = rng.integers(0, 3, size=10)
    preds = rng.integers(0, 3, size=10)
    for i in range(10):
        assert i not in build_positive_set(i, emb, preds, protos, k=4)


# --- meta refinement ------------------------------------------------------

def test_ce_loss_matches_manual():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 3))
    targets = rng.dirichlet(np.ones(3), size=4)
    got = ce_loss(dc.tensor(logits), targets).item()
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    want = -(targets * logp).sum() / 4
    assert got == pytest.approx(want, rel=1e-10)


def test_virtual_update_is_one_sgd_step():
    rng = np.random.default_rng(6)
    emb = dc.tensor(rng.normal(size=(4, 128)))
    params = encoder.init_encoder_params(rng)
    targets = np.eye(3)[[0, 1, 2, 0]]
    updated = virtual_update(params, emb, dc.tensor(targets), alpha=0.5)
    # manual: theta' = theta - alpha * dL/dtheta
    for p in params.values():
        p.zero_grad()
    loss = ce_loss(encoder.classify_logits(emb, params), targets)
    dc.backward(loss)
    np.testing.assert_allclose(updated["cls.w"].data,
                               params["cls.w"].data - 0.5 * params["cls.w"].grad,
                               rtol=1e-12)
    # untouched parameters pass through unchanged
    assert updated["ab.w1"] is params["ab.w1"]
    for p in params.values():
        p.zero_grad()


@pytest.mark.parametrize("seed", range(20))
def test_meta_gradient_matches_finite_differences(seed, tiny):
    """Second-order path: d val-CE / d delta via re-taped backward vs FD."""
    rng = np.random.default_rng(seed)
    params = encoder.init_encoder_params(rng)
    train_pairs = tiny.pairs[:4]
    val_pairs = tiny.pairs[4:7]
    targets = np.eye(3)[rng.integers(0, 3, size=4)]
    val_targets = np.eye(3)[rng.integers(0, 3, size=3)]
    train_emb = encoder.encode_batch(train_pairs, "base", params)
    val_emb_const = encoder.encode_batch(val_pairs, "base", params)

    def val_loss_np(delta_np):
        soft = dc.tensor(targets + delta_np)
        theta2 = virtual_update(params, train_emb, soft, 0.3)
        val_emb = encoder.encode_batch(val_pairs, "base", theta2)
        return ce_loss(encoder.classify_logits(val_emb, theta2),
                       val_targets).item()

    delta = dc.tensor(np.zeros((4, 3)), requires_grad=True)
    soft = dc.add(dc.tensor(targets), delta)
    theta2 = virtual_update(params, train_emb, soft, 0.3)
    val_emb = encoder.encode_batch(val_pairs, "base", theta2)
    loss = ce_loss(encoder.classify_logits(val_emb, theta2), val_targets)
    delta.zero_grad()  # the retained inner backward also touched delta.grad
    dc.backward(loss)
    got = delta.grad
    for p in params.values():
        p.zero_grad()

    num = numeric_grad(val_loss_np, np.zeros((4, 3)), eps=1e-5)
    denom = max(np.abs(num).max(), np.abs(got).max(), 1e-8)
    assert np.abs(got - num).max() / denom < 1e-3


def test_meta_delta_pins_labeled_rows(tiny):
    rng = np.random.default_rng(7)
    params = encoder.init_encoder_params(rng)
    cfg = PretrainConfig(meta_steps=2, meta_lr=0.5, virtual_lr=0.3)
    labeled_rows = np.array([True, False, True, False])
    targets = np.eye(3)[[0, 1, 2, 1]]
    delta, _ = meta_delta(params, tiny.pairs[:4], targets, labeled_rows,
                          tiny.pairs[4:8], np.eye(3)[[0, 1, 2, 0]], cfg, rng)
    assert np.all(delta[labeled_rows] == 0.0)
    assert np.any(delta[~labeled_rows] != 0.0)


def test_meta_delta_achieves_descent_on_desk_instances(tiny):
    """Validation CE after the perturbation <= before, on >= 90% of instances."""
    cfg = PretrainConfig(meta_steps=1, meta_lr=0.1, virtual_lr=0.3)
    wins = 0
    n = 100
    master = np.random.default_rng(0)
    for _ in range(n):
        rng = np.random.default_rng(master.integers(2**32))
        params = encoder.init_encoder_params(rng)
        sel = rng.choice(len(tiny), size=8, replace=False)
        train_pairs = [tiny.pairs[i] for i in sel[:5]]
        val_pairs = [tiny.pairs[i] for i in sel[5:]]
        targets = np.eye(3)[rng.integers(0, 3, size=5)]
        labeled_rows = rng.random(5) < 0.4
        val_targets = np.eye(3)[rng.integers(0, 3, size=3)]
        _, descended = meta_delta(params, train_pairs, targets, labeled_rows,
                                  val_pairs, val_targets, cfg, rng)
        wins += bool(descended)
    assert wins >= 0.9 * n, f"descent on only {wins}/{n} instances"


def test_refine_and_ema_properties():
    rng = np.random.default_rng(8)
    n = 30
    labeled = rng.random(n) < 0.3
    gt = np.eye(3)[rng.integers(0, 3, size=n)]
    targets = np.where(labeled[:, None], gt, np.eye(3)[1])
    original_labeled = targets[labeled].copy()
    for _ in range(50):
        delta = rng.normal(scale=0.5, size=(n, 3)) * (~labeled)[:, None]
        targets = refine_and_ema(targets, delta, 0.9, labeled, gt)
        # labeled rows never change
        np.testing.assert_array_equal(targets[labeled], original_labeled)
        # all rows remain probability distributions
        np.testing.assert_allclose(targets.sum(axis=1), 1.0, atol=1e-9)
        assert targets.min() >= -1e-12


def test_refine_ties_break_to_lowest_class():
    targets = np.array([[0.5, 0.5, 0.0]])
    out = refine_and_ema(targets, np.zeros((1, 3)), 0.0,
                         np.array([False]), targets)
    np.testing.assert_array_equal(out, [[1.0, 0.0, 0.0]])


def test_rho_threshold_ramp():
    cc = ContrastiveConfig()
    lo, hi = cc.rho_range
    assert pretrain._rho_threshold(21, 40, 20, cc.rho_range) == pytest.approx(lo)
    assert pretrain._rho_threshold(40, 40, 20, cc.rho_range) == pytest.approx(hi)
    mid = pretrain._rho_threshold(30, 40, 20, cc.rho_range)
    assert lo < mid < hi


def test_run_pretrain_smoke_and_determinism(tiny):
    cfg = PretrainConfig(epochs=2, batch_size=12, meta_batch_cap=6,
                         contrastive=ContrastiveConfig(warmup_epochs=1,
                                                       n_prototypes=2))
    p1, s1, r1 = pretrain.run_pretrain(tiny, cfg, seed=3)
    p2, s2, r2 = pretrain.run_pretrain(tiny, cfg, seed=3)
    assert [r.line() for r in r1] == [r.line() for r in r2]
    for name in p1:
        np.testing.assert_array_equal(p1[name].data, p2[name].data)
    np.testing.assert_array_equal(s1.targets, s2.targets)
    # losses are finite and logged per epoch
    assert len(r1) == 2
    assert all(np.isfinite([r.ce, r.instance, r.cluster]) .all() for r in r1)
