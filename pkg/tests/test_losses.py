import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semiseg import autodiff as ad
from semiseg import losses as L
from semiseg.autodiff import Tensor
from semiseg.losses import LossReport, LossWeights, SupervisionBatch
from semiseg.models import Discriminator, DiscriminatorConfig, init_weights
from semiseg.verify import losses_suite


@pytest.fixture(autouse=True)
def float64():
    with ad.default_dtype(np.float64):
        yield


def uniform(n=2, k=4, s=3):
    return Tensor(np.zeros((n, k + 1, s, s)))


finite_logits = hnp.arrays(np.float64, (2, 5, 2, 2), elements=st.floats(-1e3, 1e3))


# -- uniform-logit values ---------------------------------------------------------


def test_uniform_values():
    u = uniform()
    assert float(L.pixel_cross_entropy(u, np.zeros((2, 3, 3), int)).data) == pytest.approx(1.60944, abs=1e-5)
    assert float(L.unlabeled_real_term(u).data) == pytest.approx(-0.22314, abs=1e-5)
    assert float(L.fake_term(u).data) == pytest.approx(-1.60944, abs=1e-5)
    assert float(L.weak_image_level_term(u, frozenset({0, 3})).data) == pytest.approx(-0.91629, abs=1e-5)
    assert float(L.generator_loss(None, u, LossWeights()).data) == pytest.approx(0.22314, abs=1e-5)


def test_saturation_limits():
    sat = np.zeros((1, 5, 2, 2))
    sat[:, 2] = 30
    assert float(L.pixel_cross_entropy(Tensor(sat), np.full((1, 2, 2), 2)).data) < 1e-9
    assert abs(float(L.weak_image_level_term(Tensor(sat), frozenset({2})).data)) < 1e-9
    assert abs(float(L.generator_loss(None, Tensor(sat), LossWeights()).data)) < 1e-9


def test_cross_entropy_matches_extended_precision():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 5, 2, 2)) * 4
    mask = rng.integers(0, 4, size=(1, 2, 2))
    x = logits.astype(np.longdouble)
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    ref = -np.mean(np.take_along_axis(logp, mask[:, None], axis=1))
    assert abs(float(L.pixel_cross_entropy(Tensor(logits), mask).data) - float(ref)) < 1e-7


def test_cross_entropy_ignore_index():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(2, 5, 3, 3)))
    mask = rng.integers(0, 4, size=(2, 3, 3))
    masked = mask.copy()
    masked[0, 0, :] = L.IGNORE_INDEX
    logp = ad.log_softmax(logits, axis=1).data
    picked = np.take_along_axis(logp, np.where(masked == 255, 0, masked)[:, None], axis=1)[:, 0]
    per_sample = [-picked[i][masked[i] != 255].mean() for i in range(2)]
    assert float(L.pixel_cross_entropy(logits, masked).data) == pytest.approx(np.mean(per_sample), abs=1e-12)


def test_cross_entropy_all_ignored_warns():
    warnings = []
    out = L.pixel_cross_entropy(uniform(), np.full((2, 3, 3), L.IGNORE_INDEX), warnings=warnings)
    assert float(out.data) == 0.0 and warnings


def test_cross_entropy_rejects_bad_mask():
    with pytest.raises(ValueError):
        L.pixel_cross_entropy(uniform(), np.full((2, 3, 3), 4))
    with pytest.raises(ad.ShapeError):
        L.pixel_cross_entropy(uniform(), np.zeros((2, 2, 3), int))


def test_weak_term_validation():
    with pytest.raises(ValueError, match="empty"):
        L.weak_image_level_term(uniform(), [frozenset(), frozenset({1})])
    with pytest.raises(ValueError):
        L.weak_image_level_term(uniform(), [frozenset({4}), frozenset({1})])


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(gamma=-1)
    with pytest.raises(ValueError):
        LossWeights(weak_bias=float("inf"))


# -- identities as properties --------------------------------------------------------


@settings(max_examples=60)
@given(finite_logits)
def test_real_fake_partition(x):
    t = Tensor(x)
    mass = np.exp(L.real_mass_log(t).data) + np.exp(L.fake_log(t).data)
    np.testing.assert_allclose(mass, 1.0, atol=1e-6)


@settings(max_examples=60)
@given(finite_logits, st.sets(st.integers(0, 3), min_size=1))
def test_terms_finite_and_nonpositive(x, label_set):
    t = Tensor(x)
    for term in (L.unlabeled_real_term(t), L.fake_term(t), L.weak_image_level_term(t, frozenset(label_set))):
        v = float(term.data)
        assert math.isfinite(v) and v <= 1e-12
    ce = float(L.pixel_cross_entropy(t, np.zeros((2, 2, 2), int)).data)
    assert math.isfinite(ce) and ce >= 0


@settings(max_examples=40)
@given(finite_logits)
def test_full_label_set_equals_real_term(x):
    t = Tensor(x)
    assert float(L.weak_image_level_term(t, frozenset(range(4))).data) == \
        pytest.approx(float(L.unlabeled_real_term(t).data), abs=1e-9)


@settings(max_examples=40)
@given(finite_logits, st.floats(0, 5), st.floats(0.01, 5))
def test_weak_bias_increases_label_set_mass(x, bias, delta):
    t = Tensor(x)
    sets = [frozenset({0, 1}), frozenset({2})]
    member = L.label_set_mask(sets, 4)[:, :, None, None]

    def mass(b):
        z = x + b * member
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e * member).sum(axis=1) / e.sum(axis=1)

    lo, hi = mass(bias), mass(bias + delta)
    assert np.all(hi >= lo)
    # strict wherever the mass is representable and not already saturated
    open_ = (lo > 1e-200) & (lo < 1 - 1e-9)
    assert np.all(hi[open_] > lo[open_])
    assert float(L.weak_image_level_term(t, sets, weak_bias=bias + delta).data) >= \
        float(L.weak_image_level_term(t, sets, weak_bias=bias).data)


def test_stable_terms_match_naive_formulas():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.normal(size=(2, 5, 2, 2)) * 3
        p = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        assert float(L.unlabeled_real_term(Tensor(x)).data) == pytest.approx(np.log(1 - p[:, 4]).mean(), abs=1e-6)
        assert float(L.fake_term(Tensor(x)).data) == pytest.approx(np.log(p[:, 4]).mean(), abs=1e-6)


# -- composed discriminator losses ------------------------------------------------------


def small_d():
    d = Discriminator(DiscriminatorConfig(num_classes=4, encoder_channels=(4, 6, 6), input_size=8,
                                          decoder_deconv_layers=2))
    init_weights(d, 3, std=0.3)
    return d


def parts(rng, n=2):
    return (rng.normal(size=(n, 3, 8, 8)), rng.integers(0, 4, size=(n, 8, 8)),
            rng.normal(size=(n, 3, 8, 8)), Tensor(rng.normal(size=(n, 3, 8, 8))))


def grads_of(d, loss):
    d.zero_grad()
    loss.backward()
    return {n: p.grad.copy() if p.grad is not None else None for n, p in d.named_parameters()}


def test_semi_uniform_total():
    class Zero:
        def __call__(self, x):
            return Tensor(np.zeros((x.shape[0], 5, 2, 2)))

    b = SupervisionBatch(np.zeros((2, 3, 2, 2)), np.zeros((2, 2, 2), int), np.zeros((2, 3, 2, 2)),
                         generated=Tensor(np.zeros((2, 3, 2, 2))))
    loss, report = L.discriminator_loss_semi(b, Zero(), LossWeights())
    # 0.22314 + 1.60944 + 1.60944; the exact value is -ln(4/5) + 2 ln 5 = 3.4420194
    assert float(loss.data) == pytest.approx(-math.log(0.8) + 2 * math.log(5), abs=1e-12)
    assert float(loss.data) == pytest.approx(3.44203, abs=2e-5)
    assert (report.term_real, report.term_fake) == pytest.approx((math.log(0.8), math.log(0.2)))
    b = SupervisionBatch(np.zeros((2, 3, 2, 2)), np.zeros((2, 2, 2), int), weak_images=np.zeros((2, 3, 2, 2)),
                         weak_label_sets=[frozenset({1, 2})] * 2, generated=Tensor(np.zeros((2, 3, 2, 2))))
    loss, _ = L.discriminator_loss_weak(b, Zero(), LossWeights())
    assert float(loss.data) == pytest.approx(-math.log(0.4) + 2 * math.log(5), abs=1e-12)
    assert float(loss.data) == pytest.approx(4.13517, abs=1e-5)


def test_labeled_only_is_cross_entropy():
    rng = np.random.default_rng(0)
    d = small_d()
    img, mask, _, _ = parts(rng)
    loss, report = L.discriminator_loss_semi(SupervisionBatch(img, mask), d, LossWeights())
    assert float(loss.data) == pytest.approx(float(L.pixel_cross_entropy(d(Tensor(img)), mask).data), abs=1e-12)
    assert report.term_ce == pytest.approx(float(loss.data))


def test_gamma_linearity():
    rng = np.random.default_rng(1)
    d = small_d()
    img, mask, unl, gen = parts(rng)
    b = SupervisionBatch(img, mask, unl, generated=gen)
    l1, r1 = L.discriminator_loss_semi(b, d, LossWeights(gamma=1.5))
    l2, _ = L.discriminator_loss_semi(b, d, LossWeights(gamma=3.0))
    assert float(l2.data) - float(l1.data) == pytest.approx(1.5 * r1.term_ce, abs=1e-9)


def test_gamma_zero_removes_labeled_influence():
    rng = np.random.default_rng(2)
    d = small_d()
    img, mask, unl, gen = parts(rng)
    with_labeled, _ = L.discriminator_loss_semi(SupervisionBatch(img, mask, unl, generated=gen), d,
                                                LossWeights(gamma=0.0))
    without, _ = L.discriminator_loss_semi(SupervisionBatch(unlabeled_images=unl, generated=gen), d, LossWeights())
    ga, gb = grads_of(d, with_labeled), grads_of(d, without)
    for name in ga:
        np.testing.assert_allclose(ga[name], gb[name], atol=1e-12, err_msg=name)


def test_weak_with_full_sets_equals_semi():
    rng = np.random.default_rng(3)
    d = small_d()
    img, mask, unl, gen = parts(rng)
    semi, _ = L.discriminator_loss_semi(SupervisionBatch(img, mask, unl, generated=gen), d, LossWeights())
    weak, _ = L.discriminator_loss_weak(SupervisionBatch(img, mask, weak_images=unl,
                                                         weak_label_sets=[frozenset(range(4))] * 2,
                                                         generated=gen), d, LossWeights())
    assert float(weak.data) == pytest.approx(float(semi.data), abs=1e-6)
    nolab, _ = L.discriminator_loss_weak(SupervisionBatch(weak_images=unl, weak_label_sets=[frozenset(range(4))] * 2,
                                                          generated=gen), d, LossWeights())
    semi_nolab, _ = L.discriminator_loss_semi(SupervisionBatch(unlabeled_images=unl, generated=gen), d, LossWeights())
    assert float(nolab.data) == pytest.approx(float(semi_nolab.data), abs=1e-6)


def test_generated_images_are_detached():
    rng = np.random.default_rng(4)
    d = small_d()
    gen = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    loss, _ = L.discriminator_loss_semi(SupervisionBatch(generated=gen), d, LossWeights())
    loss.backward()
    assert gen.grad is None


def test_term_isolation_on_logits():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(6, 5, 2, 2)), requires_grad=True)
    loss = L.unlabeled_real_term(logits[0:2]) - L.fake_term(logits[4:6])
    loss.backward()
    assert np.all(logits.grad[2:4] == 0)
    assert np.any(logits.grad[0:2] != 0) and np.any(logits.grad[4:6] != 0)


def test_empty_batches_rejected():
    d = small_d()
    with pytest.raises(ValueError):
        L.discriminator_loss_semi(SupervisionBatch(), d, LossWeights())
    with pytest.raises(ValueError):
        L.discriminator_loss_weak(SupervisionBatch(labeled_images=np.zeros((1, 3, 8, 8)),
                                                   labeled_masks=np.zeros((1, 8, 8), int)), d, LossWeights())


def test_saturating_generator_loss():
    u = uniform()
    assert float(L.generator_loss(None, u, LossWeights(nonsaturating_g=False)).data) == pytest.approx(math.log(0.2))


def test_conditional_generator_target():
    logits = np.zeros((1, 5, 1, 1))
    logits[0, 1] = 5.0
    t = Tensor(logits)
    on_target = float(L.generator_loss(None, t, LossWeights(), label_sets=[{1}]).data)
    off_target = float(L.generator_loss(None, t, LossWeights(), label_sets=[{2}]).data)
    assert on_target < off_target


def test_report_roundtrip():
    r = LossReport(step=3, loss_d=1.5, term_real=-0.2, term_ce=0.9, term_fake=-0.4, loss_g=0.3)
    assert LossReport.from_line(r.to_line()) == r
    assert not LossReport(loss_d=float("nan")).is_finite()


def test_losses_suite_all_pass():
    results = losses_suite()
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_stable_terms_match_naive_formulas_in_double_precision():
    from semiseg.acceptance import naive_agreement

    assert naive_agreement(trials=50) < 1e-9
