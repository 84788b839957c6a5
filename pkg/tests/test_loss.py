import numpy as np
import pytest

from hapt3d.autodiff import Var, backward, param
from hapt3d.loss import (
    InstanceSpec,
    LossConfig,
    embeddings,
    instance_level_loss,
    lovasz_hinge,
    soft_mask,
    total_loss,
    weighted_cross_entropy,
)

from helpers import fd_grad


# -- weighted cross entropy ---------------------------------------------------


def test_ce_uniform_logits_is_log_k():
    logits = np.zeros((8, 5))
    loss = weighted_cross_entropy(logits, np.zeros(8, dtype=int), np.ones(5))
    assert loss.item() == pytest.approx(np.log(5.0), abs=1e-12)


def test_ce_monotone_in_margin():
    targets = np.array([2])
    losses = []
    for margin in (0.0, 1.0, 5.0, 20.0):
        logits = np.zeros((1, 5))
        logits[0, 2] = margin
        losses.append(weighted_cross_entropy(logits, targets, np.ones(5)).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-8


def test_ce_matches_naive_sum_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(10, 5)) * 3
    targets = rng.integers(0, 5, 10)
    w = rng.uniform(0.5, 2.0, 5)
    loss = weighted_cross_entropy(logits, targets, w)

    total = 0.0
    for i in range(10):
        probs = np.exp(logits[i]) / np.exp(logits[i]).sum()
        total -= w[targets[i]] * np.log(probs[targets[i]])
    assert loss.item() == pytest.approx(total / 10, abs=1e-12)


def test_ce_shift_invariance():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 5))
    targets = rng.integers(0, 5, 6)
    w = rng.uniform(0.5, 2.0, 5)
    a = weighted_cross_entropy(logits, targets, w).item()
    b = weighted_cross_entropy(logits + rng.normal(size=(6, 1)), targets, w).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_ce_gradient_matches_fd():
    rng = np.random.default_rng(2)
    logits0 = rng.normal(size=(5, 5))
    targets = rng.integers(0, 5, 5)
    w = rng.uniform(0.5, 2.0, 5)
    v = param(logits0)
    backward(weighted_cross_entropy(v, targets, w))
    num = fd_grad(lambda a: weighted_cross_entropy(Var(a, requires=False), targets, w).item(),
                  logits0.copy())
    np.testing.assert_allclose(v.grad, num, rtol=1e-6, atol=1e-10)


def test_ce_rejects_empty_and_bad_weights():
    with pytest.raises(ValueError):
        weighted_cross_entropy(np.zeros((0, 5)), np.zeros(0, dtype=int), np.ones(5))
    with pytest.raises(ValueError):
        weighted_cross_entropy(np.zeros((2, 5)), np.zeros(2, dtype=int), np.ones(4))


# -- embeddings ----------------------------------------------------------------


def test_embeddings_zero_offsets():
    pos = np.arange(12.0).reshape(4, 3)
    e = embeddings(pos, np.zeros((4, 3)))
    np.testing.assert_array_equal(e.data, pos)


def test_embeddings_constant_shift():
    pos = np.zeros((3, 3))
    off = np.tile([1.0, 0.0, 0.0], (3, 1))
    np.testing.assert_allclose(embeddings(pos, off).data[:, 0], 1.0)


def test_embedding_gradient_passthrough():
    rng = np.random.default_rng(3)
    pos = rng.normal(size=(6, 3))
    off = param(rng.normal(size=(6, 3)))
    e = embeddings(pos, off)
    coeff = rng.normal(size=(6, 3))
    backward((e * coeff).sum())
    np.testing.assert_allclose(off.grad, coeff)  # d loss / d offsets == d loss / d e


# -- soft mask ------------------------------------------------------------------


def test_soft_mask_is_one_at_centroid():
    e = np.array([[1.0, 2.0, 3.0]])
    f = soft_mask(e, np.array([[1.0, 2.0, 3.0]]), eta=0.3)
    assert f.data[0] == 1.0


def test_soft_mask_closed_form_at_eta_sqrt2():
    eta = 0.4
    e = np.array([[eta * np.sqrt(2.0), 0.0, 0.0]])
    f = soft_mask(e, np.zeros((1, 3)), eta=eta)
    assert f.data[0] == pytest.approx(np.exp(-1.0), abs=1e-12)


def test_soft_mask_matches_pointwise_oracle():
    rng = np.random.default_rng(4)
    e = rng.normal(size=(20, 3))
    c = rng.normal(size=(1, 3))
    eta = 0.7
    f = soft_mask(e, c, eta)
    for i in range(20):
        d2 = ((e[i] - c[0]) ** 2).sum()
        assert f.data[i] == pytest.approx(np.exp(-d2 / (2 * eta * eta)), abs=1e-12)


def test_soft_mask_translation_invariant():
    rng = np.random.default_rng(5)
    e = rng.normal(size=(10, 3))
    c = rng.normal(size=(1, 3))
    shift = rng.normal(size=3)
    a = soft_mask(e, c, 0.5).data
    b = soft_mask(e + shift, c + shift, 0.5).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_soft_mask_rejects_bad_eta():
    with pytest.raises(ValueError):
        soft_mask(np.zeros((1, 3)), np.zeros((1, 3)), 0.0)


# -- Lovász hinge ----------------------------------------------------------------


def test_lovasz_perfect_binary_prediction_is_zero():
    g = np.array([1.0, 0.0, 1.0, 0.0])
    assert lovasz_hinge(g.copy(), g).item() == pytest.approx(0.0, abs=1e-15)


def test_lovasz_complement_is_one():
    g = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
    assert lovasz_hinge(1.0 - g, g).item() == pytest.approx(1.0, abs=1e-15)


def test_lovasz_binary_equals_one_minus_iou():
    rng = np.random.default_rng(6)
    for trial in range(200):
        n = rng.integers(1, 33)
        g = rng.integers(0, 2, n).astype(float)
        if g.sum() == 0:
            g[rng.integers(0, n)] = 1.0
        f = rng.integers(0, 2, n).astype(float)
        inter = np.minimum(f, g).sum()
        union = np.maximum(f, g).sum()
        iou = inter / union if union > 0 else 1.0
        loss = lovasz_hinge(f, g).item()
        assert loss == pytest.approx(1.0 - iou, abs=1e-12)


def test_lovasz_range_and_all_zero_error():
    rng = np.random.default_rng(7)
    for trial in range(50):
        n = int(rng.integers(2, 20))
        g = rng.integers(0, 2, n).astype(float)
        if g.sum() == 0:
            g[0] = 1.0
        f = rng.uniform(0, 1, n)
        val = lovasz_hinge(f, g).item()
        assert -1e-12 <= val <= 1.0 + 1e-12
    with pytest.raises(ValueError):
        lovasz_hinge(np.array([0.5, 0.5]), np.zeros(2))


def test_lovasz_monotone_at_fixed_sort_order():
    # decreasing a foreground score (away from its sorted position only
    # slightly) cannot decrease the loss; increasing background likewise
    rng = np.random.default_rng(8)
    g = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
    f = rng.uniform(0.2, 0.8, 6)
    base = lovasz_hinge(f, g).item()
    for i in range(6):
        bumped = f.copy()
        eps = 1e-9
        bumped[i] += -eps if g[i] == 1 else eps
        assert lovasz_hinge(bumped, g).item() >= base - 1e-13


def test_lovasz_gradient_matches_fd():
    rng = np.random.default_rng(9)
    g = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0])
    f0 = rng.uniform(0.05, 0.95, 7)
    v = param(f0)
    backward(lovasz_hinge(v, g))
    num = fd_grad(lambda a: lovasz_hinge(Var(a, requires=False), g).item(), f0.copy(), h=1e-7)
    np.testing.assert_allclose(v.grad, num, rtol=1e-5, atol=1e-9)


# -- instance-level loss ------------------------------------------------------------


def test_instance_loss_near_perfect_construction():
    # members collapsed on one spot, everything else far away
    e = np.vstack([np.zeros((10, 3)), np.full((10, 3), 50.0)])
    spec = InstanceSpec(members=[np.arange(10)])
    loss, flag = instance_level_loss(e, spec, eta=0.1)
    assert flag
    assert loss.item() < 0.01


def test_instance_loss_mean_of_identical_terms():
    e = np.vstack([np.zeros((5, 3)), np.ones((5, 3)) * 30])
    one = instance_level_loss(e, InstanceSpec(members=[np.arange(5)]), eta=0.2)[0].item()
    both = instance_level_loss(
        e, InstanceSpec(members=[np.arange(5), np.arange(5, 10)]), eta=0.2
    )[0].item()
    assert both == pytest.approx(one, abs=1e-12)


def test_instance_loss_no_instances_flag():
    loss, flag = instance_level_loss(np.zeros((4, 3)), InstanceSpec(), eta=0.5)
    assert not flag and loss.item() == 0.0


def test_instance_loss_gradient_matches_fd():
    rng = np.random.default_rng(10)
    pos = rng.normal(size=(12, 3))
    off0 = rng.normal(size=(12, 3)) * 0.3
    spec = InstanceSpec(members=[np.arange(4), np.arange(4, 9)])

    def run(offsets):
        e = embeddings(pos, offsets)
        return instance_level_loss(e, spec, eta=0.6)[0]

    v = param(off0)
    backward(run(v))
    num = fd_grad(lambda a: run(Var(a, requires=False)).item(), off0.copy(), h=1e-6)
    np.testing.assert_allclose(v.grad, num, rtol=1e-4, atol=1e-8)


def test_instance_loss_spatial_centroid_mode():
    rng = np.random.default_rng(11)
    pos = rng.normal(size=(8, 3))
    spec = InstanceSpec(members=[np.arange(4)])
    loss, flag = instance_level_loss(pos, spec, eta=0.5, centroid_mode="spatial", positions=pos)
    assert flag and 0.0 <= loss.item() <= 1.0


def test_instance_spec_from_labels():
    spec = InstanceSpec.from_labels(np.array([-1, 2, 0, 2, -1, 0]))
    assert len(spec) == 2
    np.testing.assert_array_equal(spec.members[0], [2, 5])
    np.testing.assert_array_equal(spec.members[1], [1, 3])


# -- total loss -----------------------------------------------------------------------


def test_total_loss_weighted_sum():
    cfg = LossConfig()
    assert total_loss(0.5, 0.2, 0.3, cfg).item() == pytest.approx(1.0, abs=1e-15)


def test_total_loss_zero_weights_select_semantic():
    cfg = LossConfig(w_tree=0.0, w_instance=0.0)
    assert total_loss(0.7, 5.0, 9.0, cfg).item() == pytest.approx(0.7)


def test_total_loss_linear_in_each_weight():
    a = total_loss(0.3, 0.4, 0.5, LossConfig(w_tree=2.0)).item()
    b = total_loss(0.3, 0.4, 0.5, LossConfig(w_tree=4.0)).item()
    assert b - a == pytest.approx(2.0 * 0.4, abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(eta_tree=0.0).validate()
    with pytest.raises(ValueError):
        LossConfig(w_semantic=-1.0).validate()
