"""Executable verification suites: gradients, loss identities, metrics oracle.

Each check returns a :class:`CheckResult`; a suite is a list of checks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor, gradcheck
from .metrics import ConfusionMatrix, mean_accuracy, mean_iu, naive_confusion, naive_metrics, pixel_accuracy

GRAD_TOL = 1e-4
GRAD_H = 1e-5
GRAD_INSTANCES = 5
LOSS_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def _proj(shape, rng):
    """Random projection so vector-valued ops reduce to a well-scaled scalar."""
    return rng.normal(size=shape)


def _gradient_cases() -> Dict[str, Callable[[np.random.Generator], tuple]]:
    """name -> factory(rng) returning (scalar fn, list of input arrays)."""

    def unary(op, make=lambda r, s: r.normal(size=s), shape=(3, 4)):
        def factory(rng):
            x = make(rng, shape)
            p = _proj(op(Tensor(x)).shape, rng)
            return (lambda a: ad.sum(op(a) * p)), [x]
        return factory

    def binary(op, make_b=lambda r, s: r.normal(size=s), sa=(3, 4), sb=(3, 4)):
        def factory(rng):
            a, b = rng.normal(size=sa), make_b(rng, sb)
            p = _proj(op(Tensor(a), Tensor(b)).shape, rng)
            return (lambda x, y: ad.sum(op(x, y) * p)), [a, b]
        return factory

    def conv(rng):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        out_shape = ad.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).shape
        p = _proj(out_shape, rng)
        return (lambda x_, w_, b_: ad.sum(ad.conv2d(x_, w_, b_, stride=stride, pad=pad) * p)), [x, w, b]

    def deconv(rng):
        x = rng.normal(size=(2, 3, 4, 5))
        w = rng.normal(size=(3, 2, 4, 4))
        b = rng.normal(size=2)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        out_shape = ad.conv_transpose2d(Tensor(x), Tensor(w), stride=stride, pad=pad).shape
        p = _proj(out_shape, rng)
        return (lambda x_, w_, b_: ad.sum(ad.conv_transpose2d(x_, w_, b_, stride=stride, pad=pad) * p)), [x, w, b]

    def bn(training):
        def factory(rng):
            x = rng.normal(size=(3, 2, 3, 3)) * 2 + 0.5
            g, b = rng.normal(size=2), rng.normal(size=2)
            p = _proj(x.shape, rng)
            rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)

            def fn(x_, g_, b_):
                return ad.sum(ad.batchnorm2d(x_, g_, b_, rm.copy(), rv.copy(), training=training) * p)
            return fn, [x, g, b]
        return factory

    def lse_masked(rng):
        x = rng.normal(size=(2, 5, 3, 3))
        mask = rng.random((2, 5, 1, 1)) < 0.5
        mask[:, 0] = True
        p = _proj((2, 3, 3), rng)
        return (lambda a: ad.sum(ad.logsumexp(a, axis=1, mask=mask) * p)), [x]

    def getitem(rng):
        x = rng.normal(size=(4, 5))
        p = _proj((2, 5), rng)
        return (lambda a: ad.sum(a[1:3] * p)), [x]

    def concat(rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        p = _proj((6, 3), rng)
        return (lambda x, y: ad.sum(ad.concat([x, y], axis=0) * p)), [a, b]

    def losses_case(which):
        def factory(rng):
            logits = rng.normal(size=(2, 5, 3, 3)) * 2
            mask = rng.integers(0, 4, size=(2, 3, 3))
            mask[0, 0, 0] = L.IGNORE_INDEX
            sets = [frozenset({0, 2}), frozenset({1})]
            fns = {
                "pixel_cross_entropy": lambda a: L.pixel_cross_entropy(a, mask),
                "unlabeled_real_term": L.unlabeled_real_term,
                "fake_term": L.fake_term,
                "weak_image_level_term": lambda a: L.weak_image_level_term(a, sets, weak_bias=0.7),
            }
            return fns[which], [logits]
        return factory

    def network(rng):
        from .models import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, init_weights
        with ad.default_dtype(np.float64):
            g = Generator(GeneratorConfig(noise_dim=5, class_dim=2, feature_maps=(6, 4, 3), output_size=8))
            d = Discriminator(DiscriminatorConfig(num_classes=2, encoder_channels=(4, 6, 6), input_size=8,
                                                  decoder_deconv_layers=2))
        seed = int(rng.integers(0, 2**31))
        init_weights(g, seed, std=0.5)
        init_weights(d, seed + 1, std=0.5)
        noise = rng.uniform(-1, 1, size=(3, 5))
        onehot = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float64)
        w1 = g.layers[1].weight.data.copy()
        wd = d.encoder[1].weight.data.copy()

        def fn(z, gw, dw):
            g.layers[1].weight = gw
            d.encoder[1].weight = dw
            logits = d(g(z, onehot))
            return L.generator_loss(d, logits, L.LossWeights(), label_sets=[{0}, {1}, {0, 1}]) + L.fake_term(logits)
        return fn, [noise, w1, wd]

    return {
        "add": binary(ad.add, sb=(1, 4)),
        "sub": binary(ad.sub, sb=(3, 1)),
        "mul": binary(ad.mul, sb=(4,)),
        "div": binary(ad.div, make_b=lambda r, s: r.uniform(0.5, 2, size=s) * r.choice([-1, 1], size=s)),
        "neg": unary(ad.neg),
        "power": unary(lambda a: ad.power(a, 3.0)),
        "exp": unary(ad.exp),
        "log": unary(ad.log, make=lambda r, s: r.uniform(0.2, 3, size=s)),
        "matmul": binary(ad.matmul, sa=(3, 4), sb=(4, 2)),
        "sum": unary(lambda a: ad.sum(a, axis=1, keepdims=True), shape=(3, 4)),
        "mean": unary(lambda a: ad.mean(a, axis=0)),
        "reshape": unary(lambda a: ad.reshape(a, (4, 3))),
        "transpose": unary(lambda a: ad.transpose(a, (1, 0))),
        "getitem": getitem,
        "concat": concat,
        "relu": unary(ad.relu, make=lambda r, s: _away_from_zero(r.normal(size=s))),
        "leaky_relu": unary(lambda a: ad.leaky_relu(a, 0.2), make=lambda r, s: _away_from_zero(r.normal(size=s))),
        "tanh": unary(ad.tanh),
        "sigmoid": unary(ad.sigmoid),
        "logsumexp": unary(lambda a: ad.logsumexp(a, axis=1), shape=(2, 5, 3)),
        "logsumexp_masked": lse_masked,
        "log_softmax": unary(lambda a: ad.log_softmax(a, axis=1), shape=(2, 4, 3)),
        "softmax_channels": unary(ad.softmax_channels, shape=(2, 4, 3, 3)),
        "conv2d": conv,
        "conv_transpose2d": deconv,
        "batchnorm2d_train": bn(True),
        "batchnorm2d_eval": bn(False),
        "pixel_cross_entropy": losses_case("pixel_cross_entropy"),
        "unlabeled_real_term": losses_case("unlabeled_real_term"),
        "fake_term": losses_case("fake_term"),
        "weak_image_level_term": losses_case("weak_image_level_term"),
        "generator_through_discriminator": network,
    }


def gradcheck_suite(seed: int = 0, instances: int = GRAD_INSTANCES) -> List[CheckResult]:
    results = []
    for name, factory in _gradient_cases().items():
        rng = np.random.default_rng([seed, len(results)])
        worst = 0.0
        for _ in range(instances):
            fn, inputs = factory(rng)
            res = gradcheck(fn, inputs, h=GRAD_H, n_coords=40, rng=rng)
            worst = max(worst, res.max_rel_error)
        results.append(CheckResult(f"grad/{name}", worst < GRAD_TOL,
                                   f"max rel err {worst:.2e} over {instances} instances (tol {GRAD_TOL:g})"))
    return results


def _close(name: str, got: float, want: float, tol: float = LOSS_TOL) -> CheckResult:
    return CheckResult(name, abs(got - want) <= tol, f"got {got:.8f}, want {want:.8f}")


def _uniform(n=2, k=4, s=3) -> Tensor:
    return Tensor(np.zeros((n, k + 1, s, s)))


def losses_suite(seed: int = 0) -> List[CheckResult]:
    out = []
    rng = np.random.default_rng(seed)
    with ad.default_dtype(np.float64):
        u = _uniform()
        mask = np.zeros((2, 3, 3), dtype=np.int64)
        out.append(_close("loss/ce_uniform_ln5", float(L.pixel_cross_entropy(u, mask).data), math.log(5)))
        sat = np.zeros((2, 5, 3, 3))
        sat[:, 0] = 30
        out.append(CheckResult("loss/ce_saturated", float(L.pixel_cross_entropy(Tensor(sat), mask).data) < 1e-9,
                               "logit +30 on true class gives CE < 1e-9"))
        out.append(_close("loss/real_uniform_log4/5", float(L.unlabeled_real_term(u).data), math.log(4 / 5)))
        out.append(_close("loss/fake_uniform_log1/5", float(L.fake_term(u).data), math.log(1 / 5)))
        out.append(_close("loss/weak_uniform_log2/5",
                          float(L.weak_image_level_term(u, frozenset({1, 3})).data), math.log(2 / 5)))
        real_dom = np.zeros((2, 5, 3, 3))
        real_dom[:, :4] = 30
        out.append(CheckResult("loss/real_dominant_zero", abs(float(L.unlabeled_real_term(Tensor(real_dom)).data)) < 1e-9,
                               "real logits +30 give real term ~ 0"))
        fake_dom = np.zeros((2, 5, 3, 3))
        fake_dom[:, 4] = 30
        out.append(CheckResult("loss/fake_dominant_zero", abs(float(L.fake_term(Tensor(fake_dom)).data)) < 1e-9,
                               "fake logit +30 gives fake term ~ 0"))
        out.append(_close("loss/g_nonsaturating_uniform",
                          float(L.generator_loss(None, u, L.LossWeights()).data), -math.log(4 / 5)))

        logits = Tensor(rng.normal(size=(3, 5, 4, 4)) * 3)
        mass = np.exp(L.real_mass_log(logits).data) + np.exp(L.fake_log(logits).data)
        err = float(np.abs(mass - 1).max())
        out.append(CheckResult("loss/real_plus_fake_mass_is_one", err <= LOSS_TOL, f"max |mass-1| = {err:.2e}"))

        full = frozenset(range(4))
        out.append(_close("loss/weak_full_set_equals_real",
                          float(L.weak_image_level_term(logits, full).data),
                          float(L.unlabeled_real_term(logits).data)))

        d = _FixedLogits(rng)
        labeled = d.images(2)
        masks = rng.integers(0, 4, size=(2, 4, 4))
        unl, gen = d.images(2), d.images(2)
        b = L.SupervisionBatch(labeled_images=labeled, labeled_masks=masks, unlabeled_images=unl, generated=Tensor(gen))
        l1, r1 = L.discriminator_loss_semi(b, d, L.LossWeights(gamma=1.0))
        l2, _ = L.discriminator_loss_semi(b, d, L.LossWeights(gamma=2.0))
        out.append(_close("loss/gamma_linearity", float(l2.data) - float(l1.data), r1.term_ce))

        only_labeled = L.SupervisionBatch(labeled_images=labeled, labeled_masks=masks)
        lo, ro = L.discriminator_loss_semi(only_labeled, d, L.LossWeights(gamma=1.0))
        out.append(_close("loss/labeled_only_is_ce", float(lo.data), ro.term_ce))

        weak = L.SupervisionBatch(labeled_images=labeled, labeled_masks=masks, weak_images=unl,
                                  weak_label_sets=[full, full], generated=Tensor(gen))
        lw, _ = L.discriminator_loss_weak(weak, d, L.LossWeights())
        out.append(_close("loss/weak_full_sets_reduce_to_semi", float(lw.data), float(l1.data)))

        zero = _ConstantLogits(4)
        ub = L.SupervisionBatch(labeled_images=labeled, labeled_masks=np.zeros((2, 4, 4), dtype=np.int64),
                                unlabeled_images=unl, generated=Tensor(gen))
        lu, _ = L.discriminator_loss_semi(ub, zero, L.LossWeights())
        out.append(_close("loss/semi_uniform_total", float(lu.data), -math.log(4 / 5) + 2 * math.log(5), 1e-5))
        wb = L.SupervisionBatch(labeled_images=labeled, labeled_masks=np.zeros((2, 4, 4), dtype=np.int64),
                                weak_images=unl, weak_label_sets=[frozenset({0, 1})] * 2, generated=Tensor(gen))
        lwu, _ = L.discriminator_loss_weak(wb, zero, L.LossWeights())
        out.append(_close("loss/weak_uniform_total", float(lwu.data), -math.log(2 / 5) + 2 * math.log(5), 1e-5))

        extreme = Tensor(rng.normal(size=(2, 5, 3, 3)) * 500)
        vals = [L.unlabeled_real_term(extreme), L.fake_term(extreme),
                L.weak_image_level_term(extreme, frozenset({0})),
                L.pixel_cross_entropy(extreme, np.ones((2, 3, 3), dtype=np.int64))]
        finite = all(np.isfinite(float(v.data)) for v in vals)
        out.append(CheckResult("loss/finite_for_extreme_logits", finite, "logits ~ N(0, 500^2)"))
    return out


class _FixedLogits:
    """Stand-in discriminator: a fixed random linear map from pixels to logits."""

    def __init__(self, rng, k: int = 4):
        self.w = rng.normal(size=(k + 1, 3))
        self.rng = rng

    def images(self, n: int) -> np.ndarray:
        return self.rng.normal(size=(n, 3, 4, 4))

    def __call__(self, x: Tensor) -> Tensor:
        return Tensor(np.einsum("kc,nchw->nkhw", self.w, x.data))


class _ConstantLogits:
    def __init__(self, k: int):
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        return Tensor(np.zeros((n, self.k + 1, h, w)))


def metrics_suite(seed: int = 0, pairs: int = 100) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    count_ok = metric_ok = True
    worst = 0.0
    for _ in range(pairs):
        truth = rng.integers(0, 4, size=(16, 16))
        pred = np.where(rng.random((16, 16)) < 0.6, truth, rng.integers(0, 4, size=(16, 16)))
        cm = ConfusionMatrix(4).accumulate(truth, pred)
        count_ok &= cm.counts.tolist() == naive_confusion(truth, pred, 4)
        got = (pixel_accuracy(cm), mean_accuracy(cm), mean_iu(cm))
        want = naive_metrics(truth, pred, 4)
        diff = max(abs(a - b) for a, b in zip(got, want))
        worst = max(worst, diff)
        metric_ok &= diff <= 1e-12
    out = [
        CheckResult("metrics/confusion_counts_exact", bool(count_ok), f"{pairs} random 16x16 pairs, K=4"),
        CheckResult("metrics/ratios_match_oracle", bool(metric_ok), f"max abs diff {worst:.1e} (tol 1e-12)"),
    ]
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [2, 4]]
    hand = (pixel_accuracy(cm), mean_accuracy(cm), mean_iu(cm))
    want = (0.7, (3 / 4 + 4 / 6) / 2, (3 / 6 + 4 / 7) / 2)
    ok = all(abs(a - b) < 1e-12 for a, b in zip(hand, want))
    ok &= abs(hand[1] - 0.70833) < 5e-6 and abs(hand[2] - 0.53571) < 5e-6
    out.append(CheckResult("metrics/hand_case", ok, "pixel {:.5f} mean acc {:.5f} mean IU {:.5f}".format(*hand)))
    return out


def _as_checks(results) -> List[CheckResult]:
    return [CheckResult(f"criterion{r.number}/{r.name}", r.passed, r.detail) for r in results]


def baseline_suite() -> List[CheckResult]:
    from . import acceptance
    res, _ = acceptance.baseline()
    return _as_checks([res])


def training_suite(progress=print) -> List[CheckResult]:
    """Criteria 4-8: baseline, paired regime comparisons, determinism, stability."""
    from . import acceptance
    c4, records = acceptance.baseline()
    runs = acceptance.directional_runs(progress=progress)
    c7, det_records = acceptance.determinism()
    records += [r for group in runs.values() for r in group] + det_records
    c8 = acceptance.stability(records)
    return _as_checks([c4, acceptance.semi_vs_full(runs), acceptance.weak_vs_semi_full(runs), c7, c8])


def determinism_suite() -> List[CheckResult]:
    from . import acceptance
    res, _ = acceptance.determinism()
    return _as_checks([res])


SUITES = {
    "gradcheck": gradcheck_suite,
    "losses": losses_suite,
    "metrics": metrics_suite,
    "baseline": baseline_suite,
    "determinism": determinism_suite,
    "training": training_suite,
}

# "all" runs every acceptance criterion once; baseline/determinism are part of "training"
ALL_SUITES = ("gradcheck", "losses", "metrics", "training")


def run_suites(names, printer=print) -> bool:
    ok = True
    for name in names:
        start = time.time()
        results = SUITES[name]()
        for r in results:
            printer(r.line())
            ok &= r.passed
        printer(f"-- {name}: {sum(r.passed for r in results)}/{len(results)} passed in {time.time() - start:.1f}s")
    return ok
