"""Three-stage client training: losses, wiring, isolation."""

from __future__ import annotations

import copy
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from fedsim.backbone import AdaptiveBackbone, BackboneConfig
from fedsim.client import (
    ClientHyper, DownloadedGlobals, adversarial_loss, contrastive_loss,
    distill_loss, diversity_loss, init_client, run_local_round, run_stage1,
    run_stage2, run_stage3, stage1_loss, stage2_loss, stage3_loss,
)
from fedsim.data import SyntheticGraphConfig, generate_synthetic_bot_graph
from fedsim.models import Classifier, ConditionalGenerator, sample_noise


def gen(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def scalar(t):
    """float() of a loss without the requires_grad conversion warning."""
    return float(t.detach())


def np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def linear_classifier(w, b):
    clf = Classifier(in_dim=w.shape[1], hidden_dims=[])
    with torch.no_grad():
        clf.net[0].weight.copy_(torch.as_tensor(w, dtype=torch.get_default_dtype()))
        clf.net[0].bias.copy_(torch.as_tensor(b, dtype=torch.get_default_dtype()))
    return clf


# --------------------------------------------------------------- unit losses

def test_distill_loss_zero_when_pseudo_equals_real():
    clf = Classifier(4, [8], generator=gen(0))
    r = torch.randn(6, 4, generator=gen(1))
    assert abs(scalar(distill_loss(clf, r, r.clone()))) < 1e-9


def test_distill_loss_matches_numpy_oracle(float64):
    rng = np.random.default_rng(2)
    w, b = rng.standard_normal((2, 3)), rng.standard_normal(2)
    clf = linear_classifier(w, b)
    real = rng.standard_normal((2, 3))
    pseudo = rng.standard_normal((2, 3))
    p = np_softmax(real @ w.T + b)
    q = np_softmax(pseudo @ w.T + b)
    expected = np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1))
    got = scalar(distill_loss(clf, torch.tensor(real), torch.tensor(pseudo)))
    assert abs(got - expected) < 1e-6


def test_distill_loss_mean_is_duplication_invariant():
    clf = Classifier(3, [5], generator=gen(3))
    r = torch.randn(4, 3, generator=gen(4))
    x = torch.randn(4, 3, generator=gen(5))
    once = scalar(distill_loss(clf, r, x))
    twice = scalar(distill_loss(clf, torch.cat([r, r]), torch.cat([x, x])))
    assert abs(once - twice) < 1e-6


def test_distill_loss_rejects_misaligned_batches():
    clf = Classifier(3, [5], generator=gen(6))
    with pytest.raises(ValueError):
        distill_loss(clf, torch.randn(4, 3), torch.randn(3, 3))


def test_adversarial_loss_identical_classifiers_zero():
    d1 = Classifier(4, [8], generator=gen(7))
    d2 = copy.deepcopy(d1)
    r = torch.randn(10, 4, generator=gen(8))
    assert abs(scalar(adversarial_loss(d1, d2, r))) < 1e-9


def test_adversarial_loss_matches_numpy_oracle(float64):
    rng = np.random.default_rng(9)
    w1, b1 = rng.standard_normal((2, 3)), rng.standard_normal(2)
    w2, b2 = rng.standard_normal((2, 3)), rng.standard_normal(2)
    r = rng.standard_normal((5, 3))
    p = np_softmax(r @ w1.T + b1)
    q = np_softmax(r @ w2.T + b2)
    expected = np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1))
    got = scalar(adversarial_loss(linear_classifier(w1, b1),
                                  linear_classifier(w2, b2), torch.tensor(r)))
    assert abs(got - expected) < 1e-6


def test_stage1_loss_pure_classification_when_weights_zero():
    hyper = ClientHyper(alpha_dis=0.0, gamma_adv=0.0)
    d1 = Classifier(4, [8], generator=gen(10))
    d2 = Classifier(4, [6], generator=gen(11))
    r = torch.randn(8, 4, generator=gen(12))
    y = torch.randint(2, (8,), generator=gen(13))
    pg = torch.randn(8, 4, generator=gen(14))
    pb = torch.randn(8, 4, generator=gen(27))
    yb = torch.randint(2, (8,), generator=gen(28))
    pl = torch.randn(8, 4, generator=gen(15))
    total, _ = stage1_loss(d1, d2, r, y, pg, pb, yb, pl, hyper)
    expected = (F.cross_entropy(d1(r), y) + F.cross_entropy(d2(r), y)
                + F.cross_entropy(d1(pb), yb) + F.cross_entropy(d2(pb), yb))
    assert abs(scalar(total) - scalar(expected)) < 1e-6


def test_stage1_loss_composes_from_sub_losses(float64):
    hyper = ClientHyper(alpha_dis=0.7, gamma_adv=0.3)
    d1 = Classifier(4, [8], generator=gen(16)).double()
    d2 = Classifier(4, [6], generator=gen(17)).double()
    r = torch.randn(8, 4, generator=gen(18))
    y = torch.randint(2, (8,), generator=gen(19))
    pg = torch.randn(8, 4, generator=gen(20))
    pb = torch.randn(8, 4, generator=gen(29))
    yb = torch.randint(2, (8,), generator=gen(30))
    pl = torch.randn(8, 4, generator=gen(21))
    total, _ = stage1_loss(d1, d2, r, y, pg, pb, yb, pl, hyper)
    expected = (F.cross_entropy(d1(r), y) + F.cross_entropy(d2(r), y)
                + F.cross_entropy(d1(pb), yb) + F.cross_entropy(d2(pb), yb)
                + 0.7 * (scalar(distill_loss(d1, r, pg)) + scalar(distill_loss(d2, r, pg)))
                + 0.3 * (scalar(adversarial_loss(d1, d2, pl))
                         - scalar(adversarial_loss(d1, d2, r))))
    assert abs(scalar(total) - scalar(expected)) < 1e-6


def test_stage1_loss_distill_pairs_with_shared_label_samples(float64):
    # the distillation terms read pseudo_pair, not the rebalancing batch
    hyper = ClientHyper(alpha_dis=1.0, gamma_adv=0.0)
    d1 = Classifier(4, [8], generator=gen(31)).double()
    d2 = Classifier(4, [6], generator=gen(32)).double()
    r = torch.randn(8, 4, generator=gen(33))
    y = torch.randint(2, (8,), generator=gen(34))
    pg = torch.randn(8, 4, generator=gen(35))
    pb = torch.randn(8, 4, generator=gen(36))
    yb = torch.randint(2, (8,), generator=gen(37))
    pl = torch.randn(8, 4, generator=gen(38))
    base, _ = stage1_loss(d1, d2, r, y, pg, pb, yb, pl,
                          ClientHyper(alpha_dis=0.0, gamma_adv=0.0))
    total, _ = stage1_loss(d1, d2, r, y, pg, pb, yb, pl, hyper)
    expected = (scalar(base) + scalar(distill_loss(d1, r, pg))
                + scalar(distill_loss(d2, r, pg)))
    assert abs(scalar(total) - expected) < 1e-9


def test_stage1_loss_gamma_moot_for_identical_classifiers():
    d1 = Classifier(4, [8], generator=gen(22))
    d2 = copy.deepcopy(d1)
    r = torch.randn(8, 4, generator=gen(23))
    y = torch.randint(2, (8,), generator=gen(24))
    pg = torch.randn(8, 4, generator=gen(25))
    pb = torch.randn(8, 4, generator=gen(39))
    yb = torch.randint(2, (8,), generator=gen(40))
    pl = torch.randn(8, 4, generator=gen(26))
    lo, _ = stage1_loss(d1, d2, r, y, pg, pb, yb, pl, ClientHyper(gamma_adv=0.0))
    hi, _ = stage1_loss(d1, d2, r, y, pg, pb, yb, pl, ClientHyper(gamma_adv=5.0))
    assert abs(scalar(lo) - scalar(hi)) < 1e-6


def test_contrastive_loss_orthogonal_negative():
    r = torch.tensor([[1.0, 0.0]])
    r_glo = torch.tensor([[2.0, 0.0]])   # same direction as r
    r_pre = torch.tensor([[0.0, 3.0]])   # orthogonal
    val = float(contrastive_loss(r, r_glo, r_pre, tau=1.0)[0])
    assert abs(val - math.log(1.0 + math.exp(-1.0))) < 1e-6


def test_contrastive_loss_symmetric_case_is_log2():
    r = torch.randn(5, 8, generator=gen(27))
    other = torch.randn(5, 8, generator=gen(28))
    vals = contrastive_loss(r, other, other.clone(), tau=0.5)
    assert torch.allclose(vals, torch.full((5,), math.log(2.0)), atol=1e-9)


def test_contrastive_loss_decreases_with_alignment():
    r = torch.tensor([[1.0, 0.0]])
    r_pre = torch.tensor([[0.0, 1.0]])
    angled = [torch.tensor([[math.cos(t), math.sin(t)]]) for t in (1.2, 0.6, 0.0)]
    losses = [float(contrastive_loss(r, g, r_pre, 1.0)[0]) for g in angled]
    assert losses[0] > losses[1] > losses[2]


def test_contrastive_loss_warns_on_zero_rows():
    r = torch.zeros(1, 4)
    with pytest.warns(UserWarning):
        contrastive_loss(r, torch.randn(1, 4, generator=gen(29)),
                         torch.randn(1, 4, generator=gen(30)), 1.0)


def test_stage2_loss_reduces_to_classification():
    hyper = ClientHyper(gamma_adv=0.0, mu_con=0.0)
    d1 = Classifier(4, [8], generator=gen(31))
    d2 = Classifier(4, [6], generator=gen(32))
    r = torch.randn(8, 4, generator=gen(33))
    y = torch.randint(2, (8,), generator=gen(34))
    total, _ = stage2_loss(d1, d2, r, torch.randn(8, 4, generator=gen(35)),
                           torch.randn(8, 4, generator=gen(36)), y, hyper)
    expected = F.cross_entropy(d1(r), y) + F.cross_entropy(d2(r), y)
    assert abs(scalar(total) - scalar(expected)) < 1e-6


def test_stage2_loss_composes_from_sub_losses(float64):
    hyper = ClientHyper(gamma_adv=0.4, mu_con=0.9, tau_con=0.5)
    d1 = Classifier(4, [8], generator=gen(37)).double()
    d2 = Classifier(4, [6], generator=gen(38)).double()
    r = torch.randn(8, 4, generator=gen(39))
    glo = torch.randn(8, 4, generator=gen(40))
    pre = torch.randn(8, 4, generator=gen(41))
    y = torch.randint(2, (8,), generator=gen(42))
    total, _ = stage2_loss(d1, d2, r, glo, pre, y, hyper)
    expected = (scalar(F.cross_entropy(d1(r), y)) + scalar(F.cross_entropy(d2(r), y))
                + 0.4 * scalar(adversarial_loss(d1, d2, r))
                + 0.9 * scalar(contrastive_loss(r, glo, pre, 0.5).mean()))
    assert abs(scalar(total) - expected) < 1e-6


def test_diversity_loss_collapsed_batch_is_one():
    x = torch.ones(5, 3)
    z = torch.randn(5, 2, generator=gen(43))
    assert abs(float(diversity_loss(x, z)) - 1.0) < 1e-9


def test_diversity_loss_spread_batch_below_one():
    x = torch.randn(6, 3, generator=gen(44))
    z = torch.randn(6, 2, generator=gen(45))
    assert float(diversity_loss(x, z)) < 1.0


def test_diversity_loss_matches_double_sum_oracle(float64):
    rng = np.random.default_rng(46)
    x = rng.standard_normal((3, 4))
    z = rng.standard_normal((3, 2))
    acc = 0.0
    for i in range(3):
        for j in range(3):
            acc += -np.linalg.norm(x[i] - x[j]) * np.linalg.norm(z[i] - z[j])
    expected = math.exp(acc / 9.0)
    got = float(diversity_loss(torch.tensor(x), torch.tensor(z)))
    assert abs(got - expected) < 1e-6


def test_diversity_loss_rejects_single_sample():
    with pytest.raises(ValueError):
        diversity_loss(torch.randn(1, 3), torch.randn(1, 2))


def test_stage3_loss_composes_from_sub_losses(float64):
    d1 = Classifier(4, [8], generator=gen(47)).double()
    d2 = Classifier(4, [6], generator=gen(48)).double()
    x = torch.randn(6, 4, generator=gen(49))
    z = torch.randn(6, 3, generator=gen(50))
    y = torch.randint(2, (6,), generator=gen(51))
    total, _ = stage3_loss(d1, d2, x, z, y)
    expected = (scalar(F.cross_entropy(d1(x), y))
                - scalar(adversarial_loss(d1, d2, x))
                + scalar(diversity_loss(x, z)))
    assert abs(scalar(total) - expected) < 1e-6


def test_stage3_loss_rewards_classifier_disagreement():
    # same classification and diversity terms, bigger disagreement term
    # must lower the total
    d1 = Classifier(4, [8], generator=gen(52))
    d2_near = copy.deepcopy(d1)
    d2_far = Classifier(4, [8], generator=gen(53))
    x = torch.randn(6, 4, generator=gen(54))
    z = torch.randn(6, 3, generator=gen(55))
    y = torch.randint(2, (6,), generator=gen(56))
    near, parts_near = stage3_loss(d1, d2_near, x, z, y)
    far, parts_far = stage3_loss(d1, d2_far, x, z, y)
    assert parts_far["advg"] > parts_near["advg"]
    assert scalar(far) < scalar(near)


def test_stage3_optimizing_diversity_spreads_outputs():
    g = ConditionalGenerator(noise_dim=3, out_dim=4, hidden_dim=16, generator=gen(57))
    opt = torch.optim.Adam(g.parameters(), lr=1e-2)
    g.train()
    z0 = sample_noise(16, 3, gen(58))
    y0 = torch.randint(2, (16,), generator=gen(59))
    with torch.no_grad():
        g.eval()
        before = scalar(diversity_loss(g(z0, y0), z0))
        g.train()
    for step in range(50):
        z = sample_noise(16, 3, gen(600 + step))
        y = torch.randint(2, (16,), generator=gen(700 + step))
        loss = diversity_loss(g(z, y), z)
        opt.zero_grad()
        loss.backward()
        opt.step()
    g.eval()
    with torch.no_grad():
        after = scalar(diversity_loss(g(z0, y0), z0))
    assert after < before


# ---------------------------------------------------------------- round loop

def make_world(seed=0, n_per_class=60, d=8, d_r=8):
    cfg = SyntheticGraphConfig(nodes_per_class=n_per_class, feature_dim=d,
                               class_mean_separation=6.0,
                               intra_class_edge_prob=0.05,
                               inter_class_edge_prob=0.01)
    ds = generate_synthetic_bot_graph(cfg, seed=seed)
    bcfg = BackboneConfig(feature_dim=d, hidden_dim=16, representation_dim=d_r)
    backbone = AdaptiveBackbone(bcfg, generator=gen(100 + seed))
    classifier = Classifier(d_r, [16], generator=gen(200 + seed))
    generator = ConditionalGenerator(noise_dim=8, out_dim=d_r, hidden_dim=16,
                                     generator=gen(300 + seed))
    hyper = ClientHyper(local_epochs=2, batch_size=32, noise_dim=8)
    state = init_client(0, ds.features, ds.edges, ds.labels,
                        backbone, classifier, hyper, master_seed=seed)
    globals_ = DownloadedGlobals(backbone=backbone, classifier=classifier,
                                 generator=generator)
    return state, globals_, hyper


def params_of(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def assert_params_equal(module, saved):
    for k, v in module.named_parameters():
        assert torch.equal(v, saved[k]), f"{k} changed"


def test_run_local_round_rejects_zero_epochs():
    state, globals_, hyper = make_world()
    hyper.local_epochs = 0
    with pytest.raises(ValueError):
        run_local_round(state, globals_, hyper, gen(1))


def test_stage_isolation():
    state, globals_, hyper = make_world(seed=1)
    before = {name: params_of(getattr(state, name))
              for name in ("backbone", "d1", "d2", "generator", "snapshot")}

    run_stage1(state, globals_, hyper, gen(2))
    assert_params_equal(state.backbone, before["backbone"])
    assert_params_equal(state.generator, before["generator"])
    assert_params_equal(state.snapshot, before["snapshot"])

    mid_d1, mid_d2 = params_of(state.d1), params_of(state.d2)
    run_stage2(state, globals_, hyper, gen(3))
    assert_params_equal(state.d1, mid_d1)
    assert_params_equal(state.d2, mid_d2)
    assert_params_equal(state.generator, before["generator"])
    assert_params_equal(state.snapshot, before["snapshot"])

    mid_backbone = params_of(state.backbone)
    run_stage3(state, hyper, gen(4))
    assert_params_equal(state.backbone, mid_backbone)
    assert_params_equal(state.d1, mid_d1)
    assert_params_equal(state.d2, mid_d2)


def test_run_local_round_deterministic():
    outs = []
    for _ in range(2):
        state, globals_, hyper = make_world(seed=2)
        state, metrics = run_local_round(state, globals_, hyper, gen(5))
        outs.append((params_of(state.backbone), metrics))
    for k in outs[0][0]:
        assert torch.equal(outs[0][0][k], outs[1][0][k])
    assert outs[0][1].local_accuracy == outs[1][1].local_accuracy
    assert np.array_equal(outs[0][1].pooled_repr, outs[1][1].pooled_repr)


def test_run_local_round_beats_permutation_null():
    state, globals_, hyper = make_world(seed=3)
    hyper.local_epochs = 5
    state, metrics = run_local_round(state, globals_, hyper, gen(6))
    labels = state.labels.numpy()
    rng = np.random.default_rng(7)
    with torch.no_grad():
        repr_full = state.backbone(state.features, state.arcs, generator=gen(8))
        preds = state.d1(repr_full).argmax(dim=1).numpy()
    null = [np.mean(preds == rng.permutation(labels)) for _ in range(300)]
    threshold = 0.5 + 3.0 * float(np.std(null))
    assert metrics.local_accuracy > threshold


def test_run_local_round_metrics_shapes():
    state, globals_, hyper = make_world(seed=4)
    state, metrics = run_local_round(state, globals_, hyper, gen(9))
    assert metrics.pooled_repr.shape == (8,)
    assert metrics.pred_dist.shape == (2,)
    assert abs(metrics.pred_dist.sum() - 1.0) < 1e-6
    assert 0.0 <= metrics.local_accuracy <= 1.0
    assert np.isfinite(metrics.loss_scalar)
