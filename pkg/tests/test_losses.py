import numpy as np
import pytest

from egl_lab.core import PtoInstance
from egl_lab.errors import CapabilityError, InputError
from egl_lab.losses import families as F
from egl_lab.losses.fbp import (
    FbpConfig, FbpNetwork, _fit_terms, fit_fbp, induced_losses, induced_params, label_features,
)
from egl_lab.losses.lodl import FitConfig, fit_lodl, fit_lodl_batch, stack_samples
from egl_lab.nn import Batch, Mlp, grad, predict_batch

ALL = F.FAMILIES


def random_params(rng, family, dim):
    if family in (F.MSE,):
        return F.LossParams(family, np.zeros(0), dim=dim)
    raw = rng.normal(size=F.raw_shape(family, dim))
    return F.LossParams(family, raw, 0.01, dim=dim)


def central_diff(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        g.flat[i] = (fn(x + e) - fn(x - e)) / (2 * eps)
    return g


def away_from_zero(rng, size):
    """Residual-like vectors with no coordinate near the directed-loss seam."""
    mag = rng.uniform(0.1, 2.0, size=size)
    return mag * rng.choice([-1.0, 1.0], size=size)


@pytest.mark.parametrize("family", ALL)
def test_prediction_gradient_matches_finite_differences(rng, family):
    dim = 5
    for _ in range(50):
        params = random_params(rng, family, dim)
        labels = rng.normal(size=dim)
        preds = labels + away_from_zero(rng, dim)
        analytic = F.loss_grad(params, preds, labels)
        numeric = central_diff(lambda p: F.loss_eval(params, p, labels), preds)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("family", ALL)
@pytest.mark.parametrize("widths", [[1, 1], [1, 8, 1], [3, 6, 6, 2]], ids=["linear", "mlp", "deep"])
def test_model_gradient_through_learned_loss(rng, family, widths):
    groups, per = 3, widths[-1]
    dim = groups * per
    draws = 50 if widths[0] == 1 and len(widths) == 2 else 10
    for draw in range(draws):
        model = Mlp(widths, seed=draw)
        for b in model.biases:
            b[:] = rng.uniform(0.1, 0.5, size=b.shape) * rng.choice([-1, 1], size=b.shape)
        feats = rng.normal(size=(2, groups, widths[0]))
        preds0 = predict_batch(model, feats)
        labels = preds0 - away_from_zero(rng, preds0.shape)
        batch = Batch(feats, labels, np.arange(2))
        if family == F.MSE:
            losses = F.InstanceLosses(family, np.zeros((2, 0)), dim=dim)
        else:
            raw = rng.normal(size=(2,) + F.raw_shape(family, dim))
            losses = F.InstanceLosses(family, raw, 0.01, dim=dim)
        _, analytic = grad(model, losses, batch)
        for p, a in zip(model.params(), analytic):
            def value(flat, p=p):
                old = p.copy()
                p[...] = flat.reshape(p.shape)
                out = losses.value(predict_batch(model, feats), batch)
                p[...] = old
                return out
            numeric = central_diff(value, p.ravel().copy()).reshape(p.shape)
            np.testing.assert_allclose(a, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("family", F.LEARNED_FAMILIES)
def test_fit_gradient_matches_finite_differences(rng, family):
    dim, samples = 3, 6
    for _ in range(50 if family in F.WEIGHT_FAMILIES else 20):
        resid = away_from_zero(rng, (2, samples, dim))
        regret = rng.uniform(0, 1, size=(2, samples))
        raw = rng.normal(size=(2,) + F.raw_shape(family, dim))
        w_min = 0.01

        def objective(r):
            eff = F.effective_from_raw(family, r, w_min)
            return float((F.batched_values(family, eff, resid, w_min) - regret).__pow__(2).sum())

        eff = F.effective_from_raw(family, raw, w_min)
        coef = 2.0 * (F.batched_values(family, eff, resid, w_min) - regret)
        analytic = F.raw_grads(family, raw, F.batched_param_grads(family, eff, resid, coef, w_min))
        numeric = central_diff(objective, raw)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("family", F.LEARNED_FAMILIES)
def test_batched_and_single_evaluation_agree(rng, family):
    dim = 4
    params = random_params(rng, family, dim)
    labels = rng.normal(size=dim)
    preds = labels + rng.normal(size=(7, dim))
    losses = F.InstanceLosses.from_params([params])
    batch = Batch(np.zeros((7, dim, 1)), np.tile(labels, (7, 1)), np.zeros(7, dtype=int))
    np.testing.assert_allclose(losses.values(preds, batch), F.loss_eval(params, preds, labels))
    eff = F.effective_from_raw(family, params.raw[None], params.w_min)
    np.testing.assert_allclose(F.batched_values(family, eff, (preds - labels)[None], params.w_min)[0],
                               F.loss_eval(params, preds, labels))


def fitted_losses(rng, family, dim=4, samples=24):
    labels = rng.normal(size=dim)
    preds = labels + rng.normal(size=(samples, dim))
    regrets = np.abs(preds - labels).sum(-1) * rng.uniform(0.5, 1.5, size=samples)
    return labels, fit_lodl(preds, labels, regrets, family, FitConfig(steps=200))


@pytest.mark.parametrize("family", F.LEARNED_FAMILIES)
def test_fitted_losses_are_convex_nonnegative_and_anchored(rng, family):
    dim = 4
    for _ in range(5):
        labels, params = fitted_losses(rng, family, dim)
        assert F.loss_eval(params, labels, labels) == pytest.approx(0.0, abs=1e-12)
        probe = labels + rng.normal(size=(200, dim)) * 3
        assert F.loss_eval(params, probe, labels).min() >= 0
        for signs in rng.choice([-1.0, 1.0], size=(8, dim)):
            assert np.linalg.eigvalsh(params.hessian(signs)).min() >= 2 * params.w_min * (1 - 1e-9)
        if family in F.QUAD_FAMILIES:
            assert np.linalg.eigvalsh(params.gram()).min() >= -1e-10
        if family in F.WEIGHT_FAMILIES:
            assert params.weights().min() >= params.w_min


@pytest.mark.parametrize("family", F.LEARNED_FAMILIES)
def test_loss_is_convex_along_random_segments(rng, family):
    _, params = fitted_losses(rng, family)
    labels = np.zeros(4)
    for _ in range(50):
        a, b = rng.normal(size=(2, 4)) * 2
        t = rng.uniform()
        mid = F.loss_eval(params, t * a + (1 - t) * b, labels)
        assert mid <= t * F.loss_eval(params, a, labels) + (1 - t) * F.loss_eval(params, b, labels) + 1e-9


def test_planted_weights_are_recovered(rng):
    dim, samples, n = 5, 64, 6
    true_w = rng.uniform(0.2, 3.0, size=(n, dim))
    resid = rng.normal(size=(n, samples, dim))
    regret = np.einsum("isd,id->is", resid ** 2, true_w)
    mask = np.ones((n, samples))
    raw, mse = fit_lodl_batch(resid, regret, mask, F.WMSE, FitConfig(lr=0.05, steps=3000, w_min=1e-4))
    np.testing.assert_allclose(F.effective_from_raw(F.WMSE, raw, 1e-4), true_w, rtol=0.02)
    assert mse.max() < 1e-3


def test_planted_directed_weights_are_recovered(rng):
    dim, samples = 3, 80
    w_pos, w_neg = np.array([0.5, 2.0, 1.0]), np.array([3.0, 0.3, 1.0])
    resid = rng.normal(size=(samples, dim))
    regret = (np.where(resid >= 0, w_pos, w_neg) * resid ** 2).sum(-1)
    params = fit_lodl(resid, np.zeros(dim), regret, F.DWMSE,
                      FitConfig(lr=0.05, steps=3000, w_min=1e-4))
    np.testing.assert_allclose(params.weights(), [w_pos, w_neg], rtol=0.02)


def test_quadratic_fit_recovers_planted_form(rng):
    dim, samples = 3, 80
    factor = rng.normal(size=(dim, dim))
    resid = rng.normal(size=(samples, dim))
    regret = ((resid @ factor.T) ** 2).sum(-1)
    params = fit_lodl(resid, np.zeros(dim), regret, F.QUAD, FitConfig(lr=0.02, steps=4000, w_min=1e-4))
    assert params.meta["fit_mse"] < 1e-2 * regret.var()
    np.testing.assert_allclose(params.gram() + 1e-4 * np.eye(dim), factor.T @ factor, atol=0.1)


def test_stack_samples_pads_and_masks():
    a = (np.ones((2, 3)), np.zeros(3), np.array([1.0, 2.0]))
    b = (np.ones((4, 3)), np.zeros(3), np.arange(4.0))
    resid, regret, mask = stack_samples([a, b])
    assert resid.shape == (2, 4, 3)
    np.testing.assert_array_equal(mask, [[1, 1, 0, 0], [1, 1, 1, 1]])
    with pytest.raises(InputError):
        stack_samples([(np.ones((1, 3)), np.zeros(3), np.array([np.nan]))])


def test_loss_params_shape_checks():
    with pytest.raises(InputError):
        F.LossParams(F.WMSE, np.zeros((2, 3)))
    with pytest.raises(InputError):
        F.LossParams(F.LZ, np.zeros(1))
    with pytest.raises(InputError):
        F.LossParams(F.WMSE, np.zeros(3), w_min=0.0)
    with pytest.raises(InputError):
        F.canonical_family("hinge")


# --- feature-based parameterization ------------------------------------------------


def fbp_instances(rng, n, dim, planted):
    """Instances whose regrets follow ``planted(x) * r^2`` per label."""
    insts, resid, regret = [], [], []
    for i in range(n):
        x = rng.uniform(-1, 1, size=(dim, 1))
        insts.append(PtoInstance(rng.normal(size=dim), x, f"i{i}"))
        r = rng.normal(size=(24, dim))
        resid.append(r)
        regret.append((planted(x[:, 0]) * r ** 2).sum(-1))
    lf = np.stack([label_features(inst) for inst in insts])
    return insts, (lf, np.stack(resid), np.stack(regret), np.ones((n, 24)))


def test_fbp_learns_a_feature_dependent_weight(rng):
    planted = lambda x: 1.0 + x ** 2  # noqa: E731
    insts, data = fbp_instances(rng, 40, 6, planted)
    cfg = FbpConfig(hidden=32, layers=3, lr=3e-3, epochs=300, patience=None, seed=0)
    net, hist = fit_fbp(data, F.WMSE, cfg)
    assert hist["train"][-1] < 0.05 * hist["train"][0]
    probe = insts[0]
    weights = induced_params(net, probe).weights()
    np.testing.assert_allclose(weights, planted(probe.features[:, 0]), rtol=0.15)


def test_identical_features_share_parameters(rng):
    _, data = fbp_instances(rng, 8, 4, lambda x: np.ones_like(x))
    for family in (F.WMSE, F.DWMSE, F.QUAD, F.DQUAD):
        net, _ = fit_fbp(data, family, FbpConfig(hidden=8, layers=2, epochs=2, patience=None))
        x = np.array([[0.3], [0.3], [-0.2]])
        raw = induced_params(net, PtoInstance(np.zeros(3), x, "twin")).raw
        if family == F.WMSE:
            assert raw[0] == raw[1]
        elif family == F.DWMSE:
            np.testing.assert_array_equal(raw[:, 0], raw[:, 1])
        else:
            mats = raw if family == F.QUAD else raw[0]
            assert mats[0, 0] == mats[1, 1]
            assert mats[0, 2] == mats[1, 2]


def test_fbp_pair_evaluation_at_fifty_labels(rng):
    inst = PtoInstance(rng.normal(size=50), rng.uniform(-1, 1, size=(50, 2)), "wide")
    lf = label_features(inst)[None]
    for family, shape in ((F.QUAD, (50, 50)), (F.DQUAD, (4, 50, 50))):
        net = FbpNetwork(family, Mlp([5, 8, 4 if family == F.DQUAD else 1], seed=0), 0.01,
                         np.zeros(2), np.ones(2), diag_offset=0.5)
        params = induced_params(net, inst)
        assert params.raw.shape == shape
        assert np.linalg.eigvalsh(params.gram()).min() >= -1e-9
        assert net.raw_params(lf).shape == (1,) + shape


@pytest.mark.parametrize("family", [F.WMSE, F.DWMSE, F.QUAD, F.DQUAD])
def test_fbp_network_gradient_matches_finite_differences(rng, family):
    _, data = fbp_instances(rng, 3, 3, lambda x: 1.0 + x)
    lf, resid, regret, mask = data
    resid = away_from_zero(rng, resid.shape)
    for draw in range(10):
        width = lf.shape[-1] if family in (F.WMSE, F.DWMSE) else 2 * lf.shape[-1] + 1
        net = Mlp([width, 5, {F.WMSE: 1, F.DWMSE: 2, F.QUAD: 1, F.DQUAD: 4}[family]], seed=draw)
        for b in net.biases:
            b[:] = rng.uniform(0.1, 0.5, size=b.shape) * rng.choice([-1, 1], size=b.shape)
        network = FbpNetwork(family, net, 0.01, np.zeros(1), np.ones(1), diag_offset=0.3)
        _, grads = _fit_terms(network, lf, resid, regret, mask)
        for p, a in zip(net.params(), grads):
            def value(flat, p=p):
                old = p.copy()
                p[...] = flat.reshape(p.shape)
                out = _fit_terms(network, lf, resid, regret, mask, want_grad=False)[0]
                p[...] = old
                return out
            numeric = central_diff(value, p.ravel().copy()).reshape(p.shape)
            np.testing.assert_allclose(a, numeric, rtol=1e-4, atol=1e-7)


def test_fbp_rejects_scalar_family(rng):
    _, data = fbp_instances(rng, 2, 2, lambda x: np.ones_like(x))
    with pytest.raises(CapabilityError):
        fit_fbp(data, F.LZ)


def test_induced_losses_are_anchored_and_nonnegative(rng):
    insts, data = fbp_instances(rng, 6, 4, lambda x: 1.0 + x ** 2)
    for family in (F.WMSE, F.DWMSE, F.QUAD, F.DQUAD):
        net, _ = fit_fbp(data, family, FbpConfig(hidden=8, layers=2, epochs=3, patience=None))
        losses = induced_losses(net, insts)
        batch = Batch.from_instances(insts)
        np.testing.assert_allclose(losses.values(batch.labels, batch), 0.0, atol=1e-12)
        preds = batch.labels + rng.normal(size=batch.labels.shape) * 2
        assert losses.values(preds, batch).min() >= 0
