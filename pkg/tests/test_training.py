import json

import numpy as np
import pytest

from conftest import tiny_config
from semiseg.autodiff import Tensor
from semiseg.data import load_split, read_manifest
from semiseg.losses import LossReport
from semiseg.metrics import MetricsError
from semiseg.models import ConfigError, DiscriminatorConfig
from semiseg.optim import Adam, AdamState, adam_step
from semiseg.training import (
    RunConfig,
    Trainer,
    TrainingDiverged,
    evaluate,
    run_training,
    train_step_semi,
    train_step_weak,
)


def params(module):
    return [p.data.copy() for p in module.parameters()]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# -- Adam ------------------------------------------------------------------------


def test_adam_first_step_hand_value():
    p = Tensor(np.array([1.0]), requires_grad=True)
    adam_step([p], [np.array([1.0])], AdamState(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8))
    # m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert p.data[0] == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([0.5, -2.0]), requires_grad=True)
    state = AdamState(lr=1e-2)
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state)
    assert p.data.tolist() == [0.5, -2.0]
    assert state.t == 5


def test_adam_constant_gradient_limit():
    # with a constant gradient both moments converge and the step tends to lr * sign(g)
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=1e-3, beta1=0.9, beta2=0.999)
    for _ in range(999):
        adam_step([p], [np.array([3.0])], state)
    before = p.data[0]
    adam_step([p], [np.array([3.0])], state)
    assert state.t == 1000
    assert before - p.data[0] == pytest.approx(1e-3, rel=0.01)


def test_adam_wrapper_matches_function():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([a], lr=0.1)
    state = AdamState(lr=0.1)
    for g in ([1.0, -1.0], [0.3, 0.2]):
        a.grad = np.array(g)
        opt.step()
        adam_step([b], [np.array(g)], state)
    assert np.array_equal(a.data, b.data)


# -- trainer ---------------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters(tiny_data):
    t = Trainer(tiny_config(tiny_data / "manifest.tsv", "semi", lr_d=0.0, lr_g=0.0))
    d0, g0 = params(t.d), params(t.g)
    for _ in range(3):
        t.train_step()
    assert same(d0, params(t.d)) and same(g0, params(t.g))


GOLDEN = {
    "full": [(1.6094379425048828, 0.0, 1.6094379425048828, 0.0, None),
             (1.6081293821334839, 0.0, 1.6081293821334839, 0.0, None)],
    "semi": [(3.442019462585449, -0.2231435775756836, 1.6094379425048828, -1.6094379425048828, 0.22345300018787384),
             (3.44020676612854, -0.22345300018787384, 1.6085526943206787, -1.608201026916504, 0.2237633764743805)],
    "weak": [(3.8310678005218506, -0.6121918559074402, 1.6094379425048828, -1.6094379425048828, 0.9161015152931213),
             (3.9302897453308105, -0.7135359644889832, 1.6085528135299683, -1.608201026916504, 0.7135187387466431)],
}


@pytest.mark.parametrize("regime", ["full", "semi", "weak"])
def test_golden_loss_reports(tiny_data, regime):
    t = Trainer(tiny_config(tiny_data / "manifest.tsv", regime))
    for step, want in enumerate(GOLDEN[regime]):
        r = t.train_step()
        assert r.step == step
        got = (r.loss_d, r.term_real, r.term_ce, r.term_fake, r.loss_g)
        for g, w in zip(got, want):
            assert g == w if w is None else g == pytest.approx(w, rel=1e-5, abs=1e-6)


def test_first_step_is_near_uniform(tiny_data):
    # a freshly initialized discriminator spreads mass evenly over K + 1 = 5 classes
    r = Trainer(tiny_config(tiny_data / "manifest.tsv", "semi")).train_step()
    assert r.term_ce == pytest.approx(np.log(5), abs=1e-3)
    assert r.term_fake == pytest.approx(-np.log(5), abs=1e-3)
    assert r.term_real == pytest.approx(np.log(0.8), abs=1e-3)


def test_same_seed_same_run(tiny_data):
    runs = []
    for _ in range(2):
        t = Trainer(tiny_config(tiny_data / "manifest.tsv", "weak"))
        runs.append(([t.train_step().to_line() for _ in range(4)], params(t.d), params(t.g)))
    assert runs[0][0] == runs[1][0]
    assert same(runs[0][1], runs[1][1]) and same(runs[0][2], runs[1][2])


def test_cross_entropy_decreases(tiny_data):
    wins = 0
    for seed in range(3):
        t = Trainer(tiny_config(tiny_data / "manifest.tsv", "full", seed=seed, lr_d=2e-3, epochs=60))
        ce = [r.term_ce for r in run_training(t).reports]
        wins += np.mean(ce[-12:]) < np.mean(ce[:12])
    assert wins >= 2


def test_full_regime_has_no_generator(tiny_data):
    t = Trainer(tiny_config(tiny_data / "manifest.tsv", "full"))
    assert t.g is None and t.opt_g is None and t.unlabeled is None and t.weak is None
    result = run_training(t)
    assert result.counters["unlabeled"] == result.counters["weak"] == result.counters["generated"] == 0
    assert result.counters["labeled"] == t.total_steps == 6
    assert all(r.loss_g is None and r.term_fake == 0 for r in result.reports)


@pytest.mark.parametrize("regime,used,unused", [("semi", "unlabeled", "weak"), ("weak", "weak", "unlabeled")])
def test_batch_counters(tiny_data, regime, used, unused):
    result = run_training(Trainer(tiny_config(tiny_data / "manifest.tsv", regime)))
    c = result.counters
    assert c["labeled"] == c[used] == c["generated"] == 6
    assert c[unused] == 0


def test_semi_never_sees_label_sets(tiny_data):
    t = Trainer(tiny_config(tiny_data / "manifest.tsv", "semi", unlabeled_split="weak"))
    assert t.unlabeled.label_sets is None and t.unlabeled.masks is None
    assert t.weak is None


def test_updates_are_exclusive(tiny_data):
    t = Trainer(tiny_config(tiny_data / "manifest.tsv", "semi"))
    d_update, g_update = t._d_update, t._g_update
    seen = []

    def wrapped_d(batch):
        g_before = params(t.g)
        out = d_update(batch)
        seen.append(("d", same(g_before, params(t.g))))
        return out

    def wrapped_g(rng, n):
        d_before = params(t.d)
        out = g_update(rng, n)
        seen.append(("g", same(d_before, params(t.d))))
        return out

    t._d_update, t._g_update = wrapped_d, wrapped_g
    for _ in range(3):
        t.train_step()
    assert seen == [("d", True), ("g", True)] * 3


def test_divergence_is_reported(tiny_data):
    t = Trainer(tiny_config(tiny_data / "manifest.tsv", "semi"))
    t.d.parameters()[0].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        t.train_step()


def test_step_helpers_check_regime(tiny_data):
    t = Trainer(tiny_config(tiny_data / "manifest.tsv", "semi"))
    with pytest.raises(ConfigError):
        train_step_weak(t)
    assert train_step_semi(t).step == 0


# -- evaluation -------------------------------------------------------------------


class _Lookup:
    """Discriminator stand-in that answers each test image with a fixed label map."""

    def __init__(self, images, label_maps):
        self.images, self.label_maps = images, label_maps
        self.config = DiscriminatorConfig(num_classes=4, encoder_channels=(1, 1), input_size=2,
                                          decoder_deconv_layers=1)
        self.training = False

    def eval(self):
        pass

    def train(self, mode=True):
        pass

    def __call__(self, x):
        out = []
        for img in x.data:
            i = next(i for i, ref in enumerate(self.images) if np.array_equal(ref, img))
            out.append(np.eye(5)[self.label_maps[i]].transpose(2, 0, 1))
        return Tensor(np.stack(out))


def test_evaluate_oracle_and_constant(tiny_data):
    test = load_split(read_manifest(tiny_data), "test")
    perfect = evaluate(_Lookup(test.images, test.masks), test)
    assert perfect.pixel_accuracy == perfect.mean_accuracy == perfect.mean_iu == 1.0
    background = evaluate(_Lookup(test.images, np.zeros_like(test.masks)), test)
    assert background.pixel_accuracy == pytest.approx(np.mean(test.masks == 0))
    # only the background row has a nonzero recall
    present = len(np.unique(test.masks))
    assert background.mean_accuracy == pytest.approx(1 / present)


def test_evaluate_needs_masks(tiny_data):
    m = read_manifest(tiny_data)
    with pytest.raises(MetricsError):
        evaluate(_Lookup([], []), load_split(m, "unlabeled"))


# -- config ------------------------------------------------------------------------


def test_run_config_roundtrip(tiny_data):
    cfg = tiny_config(tiny_data / "manifest.tsv", "weak", gamma=2.5)
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert again.loss.gamma == 2.5
    # the weak regime conditions the generator on the class set
    assert again.generator.class_dim == 4
    assert cfg.with_regime("semi").generator.class_dim == 0


@pytest.mark.parametrize("raw", [
    {"bogus": {}},
    {"train": {"lr": 1}},
    {"train": {"regime": "unsupervised"}},
    {"loss": {"gamma": -1}},
])
def test_run_config_rejects(raw):
    with pytest.raises((ConfigError, ValueError)):
        RunConfig.from_dict(raw)


def test_run_log_is_json_lines(tiny_data, tmp_path):
    run_training(Trainer(tiny_config(tiny_data / "manifest.tsv", "semi")), run_dir=tmp_path)
    lines = [json.loads(line) for line in (tmp_path / "train.log").read_text().splitlines()]
    kinds = [x["kind"] for x in lines]
    assert kinds[0] == "header" and kinds[-2:] == ["final", "batches"]
    losses = [x for x in lines if x["kind"] == "loss"]
    assert len(losses) == 6
    r = LossReport(**{k: v for k, v in losses[0].items() if k != "kind"})
    assert r.is_finite()
    assert (tmp_path / "checkpoints" / "last.ckpt").exists()
    assert json.loads((tmp_path / "metrics.json").read_text())["mean_iu"] == lines[-2]["mean_iu"]
