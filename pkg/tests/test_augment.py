import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from partfew.augment import (
    LinearClassifier,
    _divergence_terms,
    attention_weights,
    augment_and_refine,
    build_augmented_set,
    class_attention_map,
    classify_base_images,
    competitive_attention,
    init_classifier,
    plain_attention,
    pooled_part_feature,
    refine_classifier,
    refinement_objective,
    retrieve_top,
    smooth_label,
    train_initial_classifier,
)
from partfew.config import PanConfig


def _clf(way=3, dim=4, seed=0):
    return init_classifier(way, dim, seed)


def _random_maps(n, d=4, h=3, w=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, h, w, generator=g)


# ---------------------------------------------------------------------------
# initial classifier


def test_initial_classifier_separable_case():
    z = torch.tensor([[4.0, 0.0], [-4.0, 0.0]])
    y = torch.tensor([0, 1])
    clf = train_initial_classifier(z, y, way=2, cfg=PanConfig(init_steps=100))
    assert (clf.predict(z) == y.numpy()).all()


def test_initial_classifier_shapes():
    z = torch.randn(25, 64)
    y = torch.arange(25) % 5
    clf = train_initial_classifier(z, y, way=5, cfg=PanConfig(init_steps=5))
    assert clf.W.shape == (5, 64) and clf.b.shape == (5,)


def test_initial_classifier_deterministic():
    g = torch.Generator().manual_seed(3)
    z = torch.randn(10, 8, generator=g)
    y = torch.arange(10) % 2
    cfg = PanConfig(init_steps=30)
    a = train_initial_classifier(z, y, way=2, cfg=cfg, seed=7)
    b = train_initial_classifier(z, y, way=2, cfg=cfg, seed=7)
    assert torch.equal(a.W, b.W) and torch.equal(a.b, b.b)


def test_initial_classifier_rejects_empty_class():
    z = torch.randn(4, 8)
    y = torch.tensor([0, 0, 1, 1])
    with pytest.raises(ValueError, match="zero samples"):
        train_initial_classifier(z, y, way=3, cfg=PanConfig())


# ---------------------------------------------------------------------------
# pseudo-labeling and retrieval


def test_classify_dominant_direction():
    clf = LinearClassifier(torch.eye(3) * 10, torch.zeros(3))
    maps = torch.zeros(1, 3, 2, 2)
    maps[0, 1] = 5.0  # pooled feature points along class 1
    pseudo, prob = classify_base_images(maps, clf)
    assert pseudo[0] == 1
    assert prob[0] > 0.99


def test_classify_degenerate_classifier_ties_to_class_zero():
    clf = LinearClassifier(torch.zeros(4, 3), torch.zeros(4))
    maps = _random_maps(6, d=3)
    pseudo, prob = classify_base_images(maps, clf)
    assert (pseudo.numpy() == 0).all()
    assert torch.allclose(prob, torch.full((6,), 0.25))


def test_classify_matches_loop_oracle():
    clf = _clf(way=4, dim=5, seed=1)
    maps = _random_maps(100, d=5, seed=2)
    pseudo, prob = classify_base_images(maps, clf)
    z = maps.mean(dim=(2, 3)).numpy()
    exp_labels, exp_probs = oracles.classify(z, clf.W.numpy(), clf.b.numpy())
    assert (pseudo.numpy() == exp_labels).all()
    assert np.allclose(prob.numpy(), exp_probs, atol=1e-6)


def test_retrieve_top_basic():
    pseudo = np.array([0, 0, 0, 1, 0])
    probs = np.array([0.9, 0.5, 0.7, 0.99, 0.6])
    assert retrieve_top(pseudo, probs, 0, 3) == [0, 2, 4]


def test_retrieve_top_truncates_without_padding():
    pseudo = np.array([1, 1])
    probs = np.array([0.5, 0.6])
    assert retrieve_top(pseudo, probs, 1, 10) == [1, 0]


def test_retrieve_top_tie_breaks_by_image_id():
    pseudo = np.array([2, 2, 2])
    probs = np.array([0.5, 0.5, 0.5])
    assert retrieve_top(pseudo, probs, 2, 2) == [0, 1]


def test_retrieve_top_empty_class_warns():
    with pytest.warns(UserWarning, match="no pool images"):
        out = retrieve_top(np.array([0, 0]), np.array([0.5, 0.5]), 3, 4)
    assert out == []


def test_retrieve_top_matches_sort_oracle():
    rng = np.random.default_rng(9)
    for trial in range(30):
        n = int(rng.integers(5, 60))
        way = int(rng.integers(2, 6))
        pseudo = rng.integers(0, way, size=n)
        probs = rng.random(n).round(2)  # rounding forces some ties
        k = int(rng.integers(0, way))
        n_a = int(rng.integers(1, 20))
        if not (pseudo == k).any():
            continue
        assert retrieve_top(pseudo, probs, k, n_a) == oracles.top_retrieval(
            pseudo, probs, k, n_a
        )


# ---------------------------------------------------------------------------
# attention maps and pooling


def test_attention_map_constant_input():
    clf = _clf(way=3, dim=4, seed=0)
    c = torch.tensor([1.0, -2.0, 0.5, 3.0])
    maps = c[:, None, None].expand(4, 3, 3)
    scores = class_attention_map(maps, clf)
    expected = clf.W @ c + clf.b
    for i in range(3):
        for j in range(3):
            assert torch.allclose(scores[i, j], expected, atol=1e-6)


def test_attention_map_zero_weights_give_bias():
    clf = LinearClassifier(torch.zeros(2, 4), torch.tensor([0.3, -1.2]))
    scores = class_attention_map(_random_maps(1)[0], clf)
    assert torch.allclose(scores[..., 0], torch.full((3, 3), 0.3))
    assert torch.allclose(scores[..., 1], torch.full((3, 3), -1.2))


def test_attention_map_matches_loop_oracle():
    clf = _clf(way=5, dim=6, seed=4)
    m = _random_maps(1, d=6, h=4, w=4, seed=5)[0]
    scores = class_attention_map(m, clf)
    expected = oracles.attention_scores(m.numpy(), clf.W.numpy(), clf.b.numpy())
    assert np.allclose(scores.numpy(), expected, atol=1e-6)


def test_competitive_attention_uniform_scores():
    scores = torch.zeros(2, 2, 5)
    alpha = competitive_attention(scores)
    assert torch.allclose(alpha, torch.full((2, 2, 5), 0.2), atol=1e-7)


def test_competitive_attention_two_class_values():
    scores = torch.zeros(1, 1, 2)
    scores[0, 0] = torch.tensor([1.0, 0.0])
    alpha = competitive_attention(scores)
    e = math.e
    assert float(alpha[0, 0, 0]) == pytest.approx(e / (e + 1), abs=1e-6)
    assert float(alpha[0, 0, 1]) == pytest.approx(1 / (e + 1), abs=1e-6)


def test_competitive_attention_shift_invariance():
    scores = torch.randn(3, 3, 4, generator=torch.Generator().manual_seed(2))
    shifted = scores + 7.3
    assert torch.allclose(
        competitive_attention(scores), competitive_attention(shifted), atol=1e-6
    )


def test_competitive_attention_normalization_and_oracle():
    scores = torch.randn(4, 4, 5, generator=torch.Generator().manual_seed(8))
    alpha = competitive_attention(scores)
    sums = alpha.sum(dim=-1)
    assert torch.allclose(sums, torch.ones(4, 4), atol=1e-6)
    assert (alpha >= 0).all()
    assert np.allclose(alpha.numpy(), oracles.location_softmax(scores.numpy()), atol=1e-6)


def test_plain_attention_nonnegative():
    scores = torch.randn(3, 3, 4, generator=torch.Generator().manual_seed(1))
    alpha = plain_attention(scores)
    assert (alpha >= 0).all()
    assert torch.allclose(alpha.amin(dim=(0, 1)), torch.zeros(4), atol=1e-7)


def test_pooled_uniform_weights_equal_gap():
    m = _random_maps(1, d=5, h=4, w=4, seed=3)[0]
    alpha = torch.ones(4, 4)
    z = pooled_part_feature(m, alpha)
    assert torch.allclose(z, m.mean(dim=(1, 2)), atol=1e-6)


def test_pooled_one_hot_selects_location():
    m = _random_maps(1, d=5, h=3, w=3, seed=6)[0]
    alpha = torch.zeros(3, 3)
    alpha[1, 2] = 1.0
    assert torch.allclose(pooled_part_feature(m, alpha), m[:, 1, 2], atol=1e-7)


def test_pooled_matches_loop_oracle():
    g = torch.Generator().manual_seed(12)
    m = _random_maps(1, d=4, h=3, w=3, seed=7)[0]
    alpha = torch.rand(3, 3, generator=g)
    z = pooled_part_feature(m, alpha)
    assert np.allclose(z.numpy(), oracles.weighted_pool(m.numpy(), alpha.numpy()), atol=1e-6)


def test_pooled_rejects_bad_weights():
    m = _random_maps(1)[0]
    with pytest.raises(ValueError, match="zero total mass"):
        pooled_part_feature(m, torch.zeros(3, 3))
    with pytest.raises(ValueError, match="nonnegative"):
        pooled_part_feature(m, -torch.ones(3, 3))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_alpha_properties_hold_for_random_inputs(seed, shift):
    g = torch.Generator().manual_seed(seed)
    scores = torch.randn(3, 3, 4, generator=g).double()
    alpha = competitive_attention(scores)
    assert torch.allclose(alpha.sum(dim=-1), torch.ones(3, 3, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(alpha, competitive_attention(scores + shift), atol=1e-6)


# ---------------------------------------------------------------------------
# label smoothing and refinement


def test_smooth_label_one_shot_values():
    p = smooth_label(0, 0.2, 5)
    assert np.allclose(p.numpy(), [0.8, 0.05, 0.05, 0.05, 0.05])
    assert abs(float(p.sum()) - 1.0) < 1e-9


def test_smooth_label_five_shot_values():
    p = smooth_label(2, 0.7, 5)
    expected = [0.175, 0.175, 0.3, 0.175, 0.175]
    assert np.allclose(p.numpy(), expected)
    assert abs(float(p.sum()) - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(
    way=st.integers(2, 20),
    eps=st.floats(0.01, 0.99),
    data=st.data(),
)
def test_smooth_label_sums_to_one(way, eps, data):
    y = data.draw(st.integers(0, way - 1))
    p = smooth_label(y, eps, way)
    assert abs(float(p.sum()) - 1.0) < 1e-9
    assert float(p[y]) == pytest.approx(1 - eps, abs=1e-12)


def test_smooth_label_validation():
    with pytest.raises(ValueError):
        smooth_label(0, 0.0, 5)
    with pytest.raises(ValueError):
        smooth_label(0, 1.0, 5)
    with pytest.raises(ValueError):
        smooth_label(0, 0.2, 1)
    with pytest.raises(ValueError):
        smooth_label(7, 0.2, 5)


def test_divergence_zero_at_exact_equality():
    # logits (0, 0) give prediction (1/2, 1/2); target is exactly (1/2, 1/2)
    target = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    logits = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    assert float(_divergence_terms(logits, target, "forward")) == 0.0
    assert float(_divergence_terms(logits, target, "reverse")) == 0.0


def test_divergence_near_zero_at_equality_random():
    py = torch.tensor([[0.8, 0.05, 0.05, 0.05, 0.05]], dtype=torch.float64)
    logits = torch.log(py)
    for direction in ("forward", "reverse"):
        assert abs(float(_divergence_terms(logits, py, direction))) < 1e-12


def test_divergence_positive_off_equality():
    target = smooth_label(0, 0.2, 4, dtype=torch.float64)[None]
    logits = torch.tensor([[0.0, 2.0, -1.0, 0.5]], dtype=torch.float64)
    assert float(_divergence_terms(logits, target, "forward")) > 0
    assert float(_divergence_terms(logits, target, "reverse")) > 0


def _refinement_fixture(seed=0, way=3, dim=5, n_support=6, n_aug=4):
    g = torch.Generator().manual_seed(seed)
    support_z = torch.randn(n_support, dim, generator=g, dtype=torch.float64)
    support_y = torch.arange(n_support) % way
    aug_z = torch.randn(n_aug, dim, generator=g, dtype=torch.float64)
    targets = torch.stack(
        [smooth_label(i % way, 0.2, way, dtype=torch.float64) for i in range(n_aug)]
    )
    return support_z, support_y, aug_z, targets


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_refinement_gradients_match_finite_differences(direction):
    rng = np.random.default_rng(21)
    for trial in range(5):
        way, dim = 3, 4
        support_z, support_y, aug_z, targets = _refinement_fixture(seed=trial)
        support_z, aug_z = support_z[:, :dim], aug_z[:, :dim]
        lam = float(rng.uniform(0.1, 2.0))
        W0 = rng.normal(size=(way, dim))
        b0 = rng.normal(size=way)

        W = torch.tensor(W0, requires_grad=True)
        b = torch.tensor(b0, requires_grad=True)
        loss = refinement_objective(W, b, support_z, support_y, aug_z, targets, lam, direction)
        gW, gb = torch.autograd.grad(loss, [W, b])

        def f_w(w_flat):
            w = torch.tensor(w_flat.reshape(way, dim))
            return float(
                refinement_objective(
                    w, torch.tensor(b0), support_z, support_y, aug_z, targets, lam, direction
                )
            )

        def f_b(b_vec):
            return float(
                refinement_objective(
                    torch.tensor(W0), torch.tensor(b_vec), support_z, support_y,
                    aug_z, targets, lam, direction,
                )
            )

        fd_w = oracles.central_difference_grad(f_w, W0.ravel()).reshape(way, dim)
        fd_b = oracles.central_difference_grad(f_b, b0)
        assert np.allclose(gW.numpy(), fd_w, rtol=1e-4, atol=1e-8)
        assert np.allclose(gb.numpy(), fd_b, rtol=1e-4, atol=1e-8)


def test_refine_zero_steps_is_identity():
    support_z, support_y, aug_z, _ = _refinement_fixture()
    clf = _clf(way=3, dim=5)
    out = refine_classifier(
        clf, support_z.float(), support_y, None, None,
        lam=0.0, epsilon=0.2, cfg=PanConfig(refine_steps=0),
    )
    assert torch.equal(out.W, clf.W) and torch.equal(out.b, clf.b)


def test_refine_lambda_zero_equals_support_only_training():
    support_z, support_y, aug_z, _ = _refinement_fixture()
    aug_classes = torch.tensor([0, 1, 2, 0])
    clf = _clf(way=3, dim=5)
    cfg = PanConfig(refine_steps=25)
    with_aug = refine_classifier(
        clf, support_z.float(), support_y, aug_z.float(), aug_classes,
        lam=0.0, epsilon=0.2, cfg=cfg,
    )
    without = refine_classifier(
        clf, support_z.float(), support_y, None, None,
        lam=0.0, epsilon=0.2, cfg=cfg,
    )
    assert torch.allclose(with_aug.W, without.W, atol=1e-7)
    assert torch.allclose(with_aug.b, without.b, atol=1e-7)


def test_refinement_progress_on_matching_augmentation():
    # augmented features identical to support features with matching classes
    g = torch.Generator().manual_seed(4)
    support_z = torch.randn(6, 8, generator=g)
    support_y = torch.arange(6) % 3
    cfg = PanConfig(init_steps=10, refine_steps=60)
    clf0 = train_initial_classifier(support_z, support_y, 3, cfg, seed=0)
    refined = refine_classifier(
        clf0, support_z, support_y, support_z.clone(), support_y.clone(),
        lam=1.0, epsilon=0.05, cfg=cfg,
    )
    targets = torch.stack([smooth_label(int(k), 0.05, 3, dtype=support_z.dtype) for k in support_y])

    def objective(c):
        return float(
            refinement_objective(c.W, c.b, support_z, support_y, support_z, targets, 1.0)
        )

    assert objective(refined) < objective(clf0)


# ---------------------------------------------------------------------------
# full pipeline


def test_augment_and_refine_na_zero_equals_support_only():
    g = torch.Generator().manual_seed(5)
    support_z = torch.randn(4, 6, generator=g)
    support_y = torch.tensor([0, 1, 0, 1])
    pool = _random_maps(10, d=6, seed=6)
    cfg = PanConfig(n_a=0, init_steps=15, refine_steps=15)
    via_pipeline, trace = augment_and_refine(
        support_z, support_y, 2, pool, None, cfg, epsilon=0.2, seed=3
    )
    clf0 = train_initial_classifier(support_z, support_y, 2, cfg, seed=3)
    direct = refine_classifier(
        clf0, support_z, support_y, None, None, lam=cfg.lam, epsilon=0.2, cfg=cfg
    )
    assert torch.equal(via_pipeline.W, direct.W)
    assert trace["records"] == []


@pytest.mark.parametrize("cam_mode", ["c2am", "plain", "off"])
def test_augment_and_refine_cam_modes(cam_mode):
    g = torch.Generator().manual_seed(7)
    support_z = torch.randn(4, 6, generator=g)
    support_y = torch.tensor([0, 1, 0, 1])
    pool = _random_maps(12, d=6, seed=8)
    cfg = PanConfig(n_a=3, init_steps=10, refine_steps=10, cam_mode=cam_mode)
    clf, trace = augment_and_refine(
        support_z, support_y, 2, pool, None, cfg, epsilon=0.2, seed=1
    )
    assert clf.W.shape == (2, 6)
    assert trace["cam_mode"] == cam_mode
    assert 0 < len(trace["records"]) <= 6
    for rec in trace["records"]:
        assert set(rec) == {"image_id", "class", "probability", "checksum"}


def test_batched_pooling_matches_scalar_ops():
    clf = _clf(way=3, dim=4, seed=9)
    pool = _random_maps(8, d=4, seed=10)
    feats = build_augmented_set(clf, pool, None, way=3, n_a=2, cam_mode="c2am")
    for f in feats:
        scores = class_attention_map(pool[f.image_id], clf)
        alpha = competitive_attention(scores)[..., f.class_id]
        expected = pooled_part_feature(pool[f.image_id], alpha)
        assert torch.allclose(f.vector, expected, atol=1e-6)


def test_plain_mode_flat_map_falls_back_to_uniform():
    clf = LinearClassifier(torch.zeros(2, 3), torch.zeros(2))
    pool = torch.ones(2, 3, 2, 2)
    with pytest.warns(UserWarning):
        # all images tie to class 0; class 1 has no images
        feats = build_augmented_set(clf, pool, None, way=2, n_a=2, cam_mode="plain")
    for f in feats:
        assert torch.allclose(f.vector, pool[f.image_id].mean(dim=(1, 2)))
