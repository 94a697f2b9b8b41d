"""Closed-form oracles for batch normalization and the worker bank."""

import numpy as np
import pytest

from tano.errors import DimensionError, ValidationError
from tano.normalization import (BNLayerParams, GroupWorkerBank, adabn_adapt,
                                blend_workers, bn_apply, compute_batch_stats,
                                sphere_residual, update_running_stats)
from tano.tensor import GradientTape, Tensor, backward
from tano import tensor as T


def _naive_bn_train(x, gamma, beta, eps):
    """Per-element reference: loop over channels, biased variance."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for ch in range(c):
        vals = x[:, ch, :, :]
        mu = vals.mean()
        var = ((vals - mu) ** 2).mean()
        out[:, ch, :, :] = gamma[ch] * (vals - mu) / np.sqrt(var + eps) + beta[ch]
    return out


def test_batch_stats_and_bn_match_naive_reference():
    rng = np.random.default_rng(0)
    for trial in range(50):
        shape = (int(rng.integers(2, 6)), int(rng.integers(1, 5)),
                 int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        x = rng.normal(scale=rng.uniform(0.5, 3.0), size=shape)
        c = shape[1]
        params = BNLayerParams.identity(c)
        params.gamma.data = rng.normal(size=c) + 2.0
        params.beta.data = rng.normal(size=c)

        stats = compute_batch_stats(x)
        for ch in range(c):
            vals = x[:, ch, :, :]
            np.testing.assert_allclose(stats.mean[ch], vals.mean(), atol=1e-12)
            np.testing.assert_allclose(stats.var[ch],
                                       ((vals - vals.mean()) ** 2).mean(),
                                       atol=1e-12)
        assert stats.m == shape[0] * shape[2] * shape[3]

        out = bn_apply(Tensor(x), params, mode="train")
        ref = _naive_bn_train(x, params.gamma.data, params.beta.data,
                              params.epsilon)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_eval_mode_is_batch_independent():
    rng = np.random.default_rng(1)
    params = BNLayerParams.identity(3)
    params.running_mean = rng.normal(size=3)
    params.running_var = rng.uniform(0.5, 2.0, size=3)
    x = rng.normal(size=(8, 3, 4, 4))
    full = bn_apply(Tensor(x), params, mode="eval").data
    for i in range(8):
        alone = bn_apply(Tensor(x[i:i + 1]), params, mode="eval").data
        np.testing.assert_allclose(full[i], alone[0], atol=1e-12)


def test_train_mode_output_is_standardized():
    rng = np.random.default_rng(2)
    x = rng.normal(loc=3.0, scale=2.0, size=(6, 4, 5, 5))
    out = bn_apply(Tensor(x), BNLayerParams.identity(4), mode="train").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_bn_train_gradients_flow_through_moments():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)))
    params = BNLayerParams.identity(2)
    target = rng.normal(size=(3, 2, 4, 4))

    def f():
        out = bn_apply(x, params, mode="train")
        return T.sum_(T.square(out - Tensor(target)))

    from tano.tensor import finite_diff_check
    err = finite_diff_check(f, [x, params.gamma, params.beta])
    assert err < 1e-4


def test_update_running_stats_closed_form():
    params = BNLayerParams.identity(2, momentum=0.25)
    stats = compute_batch_stats(np.ones((2, 2, 2, 2)) * 4.0)
    update_running_stats(params, stats)
    np.testing.assert_allclose(params.running_mean, [1.0, 1.0])  # 0.75*0+0.25*4
    np.testing.assert_allclose(params.running_var, [0.75, 0.75])  # 0.75*1+0.25*0


def test_update_running_stats_channel_mismatch():
    params = BNLayerParams.identity(2)
    stats = compute_batch_stats(np.ones((1, 3, 2, 2)))
    with pytest.raises(DimensionError):
        update_running_stats(params, stats)


def test_bank_layout_and_global_worker():
    bank = GroupWorkerBank.create([16, 32, 32], 4)
    assert len(bank.workers) == 5
    assert bank.global_worker is bank.workers[4]
    assert len(bank.domain_workers) == 4
    assert [l.channels for l in bank.global_worker.layers] == [16, 32, 32]


def test_blend_one_hot_reproduces_worker():
    rng = np.random.default_rng(4)
    bank = GroupWorkerBank.create([4, 8], 3)
    for worker in bank.workers:
        for layer in worker.layers:
            layer.gamma.data = rng.normal(size=layer.channels)
            layer.beta.data = rng.normal(size=layer.channels)
            layer.running_mean = rng.normal(size=layer.channels)
            layer.running_var = rng.uniform(0.5, 2.0, size=layer.channels)
    blended = blend_workers(bank, [0.0, 1.0, 0.0])
    for got, want in zip(blended.layers, bank.workers[1].layers):
        np.testing.assert_allclose(got.gamma.data, want.gamma.data, atol=1e-12)
        np.testing.assert_allclose(got.beta.data, want.beta.data, atol=1e-12)
        np.testing.assert_allclose(got.running_mean, want.running_mean, atol=1e-12)
        np.testing.assert_allclose(got.running_var, want.running_var, atol=1e-12)


def test_blend_exact_variance_mixture_identity():
    bank = GroupWorkerBank.create([1], 2)
    a, b = bank.workers[0].layers[0], bank.workers[1].layers[0]
    a.running_mean, a.running_var = np.array([1.0]), np.array([2.0])
    b.running_mean, b.running_var = np.array([3.0]), np.array([4.0])
    w = [0.25, 0.75]
    blended = blend_workers(bank, w, exact_variance=True)
    mu = 0.25 * 1 + 0.75 * 3
    second = 0.25 * (2 + 1) + 0.75 * (4 + 9)
    np.testing.assert_allclose(blended.layers[0].running_var, second - mu ** 2)


def test_blend_weight_validation():
    bank = GroupWorkerBank.create([4], 2)
    with pytest.raises(ValidationError):
        blend_workers(bank, [0.5, 0.6])
    with pytest.raises(ValidationError):
        blend_workers(bank, [1.5, -0.5])
    with pytest.raises(ValidationError):
        blend_workers(bank, [1.0])


def test_adabn_adapt_keeps_affine_swaps_stats():
    rng = np.random.default_rng(5)
    params = BNLayerParams.identity(3)
    params.gamma.data = np.array([1.0, 2.0, 3.0])
    batch = rng.normal(loc=5.0, size=(4, 3, 4, 4))
    adapted = adabn_adapt(params, batch)
    stats = compute_batch_stats(batch)
    np.testing.assert_allclose(adapted.gamma.data, params.gamma.data)
    np.testing.assert_allclose(adapted.running_mean, stats.mean)
    np.testing.assert_allclose(adapted.running_var, stats.var)
    # the source layer is untouched
    np.testing.assert_allclose(params.running_mean, np.zeros(3))


def test_batch_stats_rejects_non_nchw():
    with pytest.raises(DimensionError):
        compute_batch_stats(np.ones((3, 4)))


# ---------------------------------------------------------------------------
# sphere invariants

def _standardize(z, eps):
    mu = z.mean()
    var = ((z - mu) ** 2).mean()
    return (z - mu) / np.sqrt(var + eps), var


@pytest.mark.parametrize("eps,bound", [(0.0, 1e-6), (1e-5, 1e-3)])
def test_sphere_residual_bound(eps, bound):
    rng = np.random.default_rng(6)
    for _ in range(20):
        m = int(rng.integers(50, 500))
        gamma = float(rng.uniform(0.5, 3.0))
        beta = float(rng.normal())
        z = rng.normal(loc=rng.normal(), scale=rng.uniform(0.5, 4.0), size=m)
        z_hat, var = _standardize(z, eps)
        res = sphere_residual(gamma * z_hat + beta, gamma, beta, var, eps)
        assert res / m <= bound  # relative to the squared radius ~ m


def test_sphere_residual_exact_at_eps_zero():
    z = np.random.default_rng(7).normal(size=200)
    z_hat, var = _standardize(z, 0.0)
    res = sphere_residual(2.5 * z_hat - 1.0, 2.5, -1.0, var, 0.0)
    assert res < 1e-8


def test_sphere_residual_rejects_zero_gamma():
    with pytest.raises(ValidationError):
        sphere_residual(np.zeros(4), 0.0, 0.0, 1.0, 1e-5)
