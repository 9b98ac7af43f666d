"""Small hand-checkable cases for each public operation."""

import numpy as np
import pytest

from egl_lab import datagen
from egl_lab.core import PtoInstance, baseline_draws, decision_quality, dq_regret, normalized_dq
from egl_lab.errors import CapabilityError, InputError
from egl_lab.losses import families as F
from egl_lab.losses.consistency import optimal_wmse_prediction, run_counterexample
from egl_lab.losses.fbp import FbpConfig, FbpNetwork, fit_fbp, induced_params, label_features
from egl_lab.losses.lodl import FitConfig, closed_form_scalar_weight, fit_lodl, fit_lodl_batch
from egl_lab.nn import Batch, Mlp, MseLoss, TrainConfig, grad, train
from egl_lab.problems import (
    PortfolioProblem, TopKProblem, WebAdvertisingProblem, enumerate_feasible, portfolio_objective,
    portfolio_solve, topk_solve, webadv_objective, webadv_solve,
)
from egl_lab.sampling import (
    SamplerConfig, build_loss_dataset, checkpoints_per_model, gaussian_sample, model_based_sample,
)

# --- decision quality -------------------------------------------------------------


def test_dq_and_regret_top1():
    problem = TopKProblem(1, 3)
    assert decision_quality(problem, [2, 0, 4], [1, 5, 3]) == 3
    assert dq_regret(problem, [2, 0, 4], [1, 5, 3]) == 2
    assert dq_regret(problem, [1, 5, 3], [1, 5, 3]) == 0


def test_counterexample_regret():
    assert dq_regret(TopKProblem(1, 2), [1.0, 0.55], [0.0, 0.55]) == pytest.approx(0.55)


def test_normalized_dq_anchors():
    problem = TopKProblem(1, 2)
    draw = baseline_draws(2, 9, 1)[0]
    assert normalized_dq(problem, draw, [0.0, 10.0], rng_seed=9, num_baseline_draws=1) == 0.0
    assert normalized_dq(problem, [0.0, 10.0], [0.0, 10.0]) == 1.0
    assert normalized_dq(problem, [1.0, 0.0], [0.0, 10.0], rng_seed=0) < 0


def test_baseline_expectation_is_zero():
    # normalized DQ of the random policy itself averages to 0
    problem = TopKProblem(1, 2)
    labels = np.array([0.0, 10.0])
    scores = [normalized_dq(problem, d, labels, rng_seed=0, num_baseline_draws=2000)
              for d in baseline_draws(2, 123, 400)]
    sem = np.std(scores, ddof=1) / np.sqrt(len(scores))
    assert abs(np.mean(scores)) <= 3 * sem


# --- solvers ----------------------------------------------------------------------


def test_topk_cases():
    np.testing.assert_array_equal(topk_solve([2, 0, 4], 1), [0, 0, 1])
    np.testing.assert_array_equal(topk_solve([1, 1, 0], 1), [1, 0, 0])
    np.testing.assert_array_equal(topk_solve([3, 1, 2, 5], 2), [1, 0, 0, 1])
    preds = np.array([0.3, -1.0, 2.2, 0.9])
    np.testing.assert_array_equal(topk_solve(7.5 * preds, 2), topk_solve(preds, 2))


def test_webadv_objective_cases():
    ctr = np.array([[0.5, 0.0], [0.5, 1.0]]).ravel()
    assert webadv_objective([0, 0], ctr) == 0
    assert webadv_objective([1, 1], ctr) == pytest.approx(1.75)
    assert webadv_objective([1, 0, 0], np.r_[np.ones(4), np.zeros(8)]) == 4
    with pytest.raises(InputError):
        webadv_objective([1, 0], np.ones(5))


def test_dominant_site_is_chosen(rng):
    ctr = rng.uniform(0, 0.5, size=(5, 10))
    ctr[3] = ctr.max(axis=0) + 0.1
    assert webadv_solve(ctr.ravel(), 2, 5, 10)[3] == 1


def test_portfolio_objective_cases():
    assert portfolio_objective([0.5, 0.5], [1, 2], np.eye(2), 0.001) == pytest.approx(1.4995)
    assert portfolio_objective([0.2, 0.8], [1, 2], np.eye(2), 0.0) == pytest.approx(1.8)
    q = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert portfolio_objective([0.0, 1.0], [1, 2], q, 0.1) == pytest.approx(2 - 0.1)


def test_portfolio_solve_cases():
    np.testing.assert_allclose(portfolio_solve(np.full(4, 0.3), np.eye(4), 0.5), np.full(4, 0.25),
                               atol=1e-6)
    assert PortfolioProblem(np.eye(3)).metadata()["lambda"] == 0.001


def test_enumeration_counts():
    assert len(enumerate_feasible(TopKProblem(1, 3))) == 3
    assert len(enumerate_feasible(WebAdvertisingProblem(2, 5, 10))) == 10
    assert len(enumerate_feasible(TopKProblem(2, 4))) == 6
    with pytest.raises(CapabilityError):
        enumerate_feasible(PortfolioProblem(np.eye(2)))


# --- data -------------------------------------------------------------------------


def test_cubic_values():
    assert datagen.cubic_labels(0.0) == 0.0
    assert datagen.cubic_labels(1.0) == pytest.approx(3.5)
    assert datagen.cubic_labels(1.0, "hard") == pytest.approx(2.5)


def test_webadv_shapes():
    inst = datagen.gen_webadv(1, 10, 5, seed=0).instances[0]
    assert inst.labels.shape == (50,) and inst.features.shape == (5, 10)


def test_single_factor_panel_has_rank_one_correlation():
    ds = datagen.gen_portfolio(200, d_stocks=6, history_len=3, seed=1, n_factors=1, noise_scale=0.0)
    vals = np.sort(np.linalg.eigvalsh(ds.q))
    assert vals[-1] == pytest.approx(6.0, abs=1e-6) and np.abs(vals[:-1]).max() < 1e-6
    assert ds.instances[0].labels.shape == (6,)


def test_psd_projection_refuses_large_shifts():
    with pytest.raises(InputError):
        datagen.psd_project(np.diag([1.0, -0.5]))


def test_split_edge_cases():
    ds = datagen.split_dataset(datagen.gen_cubic(10, n=3), (1.0, 0.0, 0.0))
    assert all(i.split == "train" for i in ds.instances)
    with pytest.raises(InputError):
        datagen.split_dataset(datagen.gen_cubic(2, n=3), (0.4, 0.3, 0.3))


def test_serialization_is_byte_identical(tmp_path):
    for run in ("a", "b"):
        datagen.save_dataset(datagen.generate(datagen.DatasetSpec("cubic", 9, seed=2)), tmp_path / run, "d")
    for ext in (".meta", ".data"):
        assert (tmp_path / "a" / f"d{ext}").read_bytes() == (tmp_path / "b" / f"d{ext}").read_bytes()


# --- networks ---------------------------------------------------------------------


def test_forward_cases(rng):
    zero = Mlp([3, 4, 2], seed=0)
    for p in zero.params():
        p[...] = 0
    np.testing.assert_array_equal(zero.forward(np.ones((2, 3))), 0.0)
    line = Mlp([1, 1], seed=0)
    line.weights[0][...] = 2.5
    line.biases[0][...] = -1.0
    assert line.forward(np.array([[4.0]]))[0, 0] == 9.0
    net = Mlp([3, 5, 4, 2], seed=1)
    x = rng.normal(size=3)
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = [sum(h[r] * w[r, c] for r in range(w.shape[0])) + b[c] for c in range(w.shape[1])]
        if i < 2:
            h = [max(v, 0.0) for v in h]
    np.testing.assert_allclose(net.forward(x[None])[0], h, atol=1e-12)


class ConstantLoss:
    def value_and_grad(self, preds, batch):
        return 4.0, np.zeros_like(preds)


def test_constant_loss_has_zero_gradient(rng):
    batch = Batch(rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2)), np.arange(3))
    _, grads = grad(Mlp([2, 4, 1], seed=0), ConstantLoss(), batch)
    assert all(not g.any() for g in grads)


def test_train_recovers_a_line(rng):
    x = rng.uniform(-1, 1, size=(200, 1, 1))
    batch = Batch(x, 3 * x[:, :, 0] + 1, np.arange(200))
    model, _ = train(Mlp([1, 1], seed=0), batch, MseLoss(),
                     TrainConfig(lr=0.05, epochs=200, batch_size=16, optimizer="sgd", patience=None))
    assert model.weights[0][0, 0] == pytest.approx(3.0, abs=1e-2)
    assert model.biases[0][0] == pytest.approx(1.0, abs=1e-2)


def test_zero_learning_rate_changes_nothing(rng):
    batch = Batch(rng.normal(size=(8, 1, 2)), rng.normal(size=(8, 1)), np.arange(8))
    model = Mlp([2, 3, 1], seed=0)
    before = [p.copy() for p in model.params()]
    train(model, batch, MseLoss(), TrainConfig(lr=0.0, epochs=3, batch_size=4))
    for a, b in zip(before, model.params()):
        np.testing.assert_array_equal(a, b)


def test_patience_zero_stops_after_first_worse_epoch(rng):
    x = rng.normal(size=(16, 1, 1))
    batch = Batch(x, 2 * x[:, :, 0], np.arange(16))
    # validation targets point the other way, so validation loss rises
    val = Batch(x, -2 * x[:, :, 0], np.arange(16))
    _, hist = train(Mlp([1, 1], seed=0), batch, MseLoss(),
                    TrainConfig(lr=0.1, epochs=20, batch_size=16, patience=0, optimizer="sgd"),
                    val_batch=val)
    assert hist.stopped_early and len(hist.val_loss) == 2


def test_training_is_bit_reproducible(rng):
    batch = Batch(rng.normal(size=(20, 2, 3)), rng.normal(size=(20, 2)), np.arange(20))
    runs = []
    for _ in range(2):
        model, _ = train(Mlp([3, 6, 1], seed=4), batch, MseLoss(), TrainConfig(epochs=5, batch_size=4, seed=8))
        runs.append(np.concatenate([p.ravel() for p in model.params()]))
    np.testing.assert_array_equal(*runs)


def test_small_constant_lr_gives_monotone_training_loss(rng):
    x = rng.normal(size=(32, 1, 2))
    batch = Batch(x, x[:, :, 0] - 0.5 * x[:, :, 1], np.arange(32))
    _, hist = train(Mlp([2, 1], seed=0), batch, MseLoss(),
                    TrainConfig(lr=0.01, epochs=10, batch_size=32, optimizer="sgd", patience=None))
    assert all(b <= a for a, b in zip(hist.train_loss, hist.train_loss[1:]))


# --- sampling ---------------------------------------------------------------------


def test_gaussian_samples_are_seeded(cubic_small):
    inst = cubic_small.instances[0]
    a = gaussian_sample(inst, 1.0, 4, seed=5)
    b = gaussian_sample(inst, 1.0, 4, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.preds, y.preds)


def test_thirty_samples_over_five_models(cubic_small):
    assert checkpoints_per_model(30, 5) == [6] * 5
    train_set = cubic_small.split("train")
    cfg = SamplerConfig(kind="model_based", k=30, num_models=5, total_updates=60, batch_size=4, lr=0.01)
    out = model_based_sample(train_set[:2], train_set, cfg, lambda s: Mlp([1, 1], seed=s))
    assert all(len(v) == 30 for v in out.values())


def test_regret_of_a_scored_sample():
    inst = PtoInstance(np.array([1.0, 5.0, 3.0]), np.zeros((3, 1)), "ex")
    samples = {"ex": gaussian_sample(inst, 0.0, 1)}
    samples["ex"][0].preds = np.array([2.0, 0.0, 4.0])
    lds = build_loss_dataset(samples, [inst], TopKProblem(1, 3), anchor=False)
    assert lds.samples["ex"][0].regret == 2.0


# --- losses -----------------------------------------------------------------------


def weights_raw(w, w_min=0.01):
    return F.softplus_inv(np.asarray(w, dtype=np.float64) - w_min)


def test_loss_eval_cases():
    wmse = F.LossParams(F.WMSE, weights_raw([2.0, 1.0]))
    assert F.loss_eval(wmse, [1.0, -1.0], [0.0, 0.0]) == pytest.approx(3.0)
    quad = F.LossParams(F.QUAD, np.eye(2), 0.01)
    assert F.loss_eval(quad, [1.0, 0.0], [0.0, 0.0]) == pytest.approx(1.01)


@pytest.mark.parametrize("family", F.FAMILIES)
def test_truth_is_a_zero_minimum(rng, family):
    dim = 3
    raw = np.zeros(0) if family == F.MSE else rng.normal(size=F.raw_shape(family, dim))
    params = F.LossParams(family, raw, 0.01, dim=dim)
    y = rng.normal(size=dim)
    assert F.loss_eval(params, y, y) == 0.0
    np.testing.assert_array_equal(F.loss_grad(params, y, y), 0.0)


def test_lodl_recovers_a_scalar_weight(rng):
    preds = rng.normal(size=(40, 1))
    regrets = 2.5 * preds[:, 0] ** 2
    params = fit_lodl(preds, np.zeros(1), regrets, F.WMSE, FitConfig(lr=0.05, steps=2000, w_min=1e-4))
    assert params.weights()[0] == pytest.approx(2.5, abs=1e-2)
    assert closed_form_scalar_weight(preds, np.zeros(1), regrets) == pytest.approx(2.5)


def test_zero_regrets_push_weights_to_the_floor(rng):
    resid = rng.normal(size=(1, 20, 3))
    raw, _ = fit_lodl_batch(resid, np.zeros((1, 20)), np.ones((1, 20)), F.WMSE,
                            FitConfig(lr=0.1, steps=2000, w_min=0.01))
    assert F.effective_from_raw(F.WMSE, raw, 0.01).max() < 0.011


def test_gradient_fit_matches_closed_form_on_the_blue_instance():
    rep = run_counterexample(fit="gradient_descent")
    assert rep.gd_weights[0] == pytest.approx(rep.closed_form_weights[0], abs=1e-3)


def test_fbp_planted_weight_on_scalar_data(rng):
    planted = lambda x: 1.0 + np.abs(x)  # noqa: E731
    insts, resid, regret = [], [], []
    for i in range(60):
        x = rng.uniform(-1, 1, size=(5, 1))
        insts.append(PtoInstance(np.zeros(5), x, f"s{i}"))
        r = rng.normal(size=(16, 5))
        resid.append(r)
        regret.append((planted(x[:, 0]) * r ** 2).sum(-1))
    lf = np.stack([label_features(i) for i in insts])
    data = (lf, np.stack(resid), np.stack(regret), np.ones((60, 16)))
    net, _ = fit_fbp(data, F.WMSE, FbpConfig(hidden=32, layers=3, lr=3e-3, epochs=300, patience=None))
    grid = np.linspace(-0.9, 0.9, 7)
    got = induced_params(net, PtoInstance(np.zeros(7), grid[:, None], "probe")).weights()
    assert np.abs(got - planted(grid)).max() < 0.1


def test_fbp_matches_lodl_on_a_single_instance(rng):
    inst = PtoInstance(np.zeros(4), rng.uniform(-1, 1, size=(4, 1)), "solo")
    resid = rng.normal(size=(1, 30, 4))
    regret = np.abs(resid).sum(-1)
    mask = np.ones((1, 30))
    _, lodl_err = fit_lodl_batch(resid, regret, mask, F.WMSE, FitConfig(steps=1500))
    lf = label_features(inst)[None]
    _, hist = fit_fbp((lf, resid, regret, mask), F.WMSE,
                      FbpConfig(hidden=16, layers=2, lr=1e-2, epochs=1500, patience=None))
    assert min(hist["train"]) <= lodl_err[0] + 0.05 * regret.var()


def test_constant_network_gives_uniform_weights():
    net = Mlp([1, 1], seed=0)
    net.weights[0][...] = 0.0
    net.biases[0][...] = 0.7
    fbp = FbpNetwork(F.WMSE, net, 0.01, np.zeros(1), np.ones(1))
    inst = PtoInstance(np.zeros(6), np.linspace(-1, 1, 6)[:, None], "flat")
    w = induced_params(fbp, inst).weights()
    np.testing.assert_allclose(w, w[0])


def test_optimal_prediction_cases():
    assert optimal_wmse_prediction([(0.0, 0.5), (1.0, 0.5)], [0.385, 0.582]) == pytest.approx(0.602, abs=1e-3)
    assert optimal_wmse_prediction([(2.0, 0.25), (6.0, 0.75)], [3.0, 3.0]) == pytest.approx(5.0)
    assert optimal_wmse_prediction([(1.7, 1.0)], [0.4]) == pytest.approx(1.7)
