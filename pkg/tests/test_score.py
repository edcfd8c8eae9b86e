"""Score model: ladder, forward shapes, DSM objective, analytic optimum."""

import numpy as np
import pytest

from augscore import autodiff as ad
from augscore.autodiff import NumericError, ShapeError
from augscore.nn import ParamSet
from augscore.score import (ScoreNetDesc, check_sigma_ladder,
                            default_sigma_ladder, dsm_loss_single,
                            dsm_loss_unified, freeze, init_score_net,
                            raw_field, resolve_sigma, score_field_distances,
                            score_forward, score_distance, score_value,
                            score_values, train_score_model)
from augscore.rng import Rng


def _zero_params(desc):
    return ParamSet(desc, {k: ad.tensor(np.zeros(s, dtype=np.float32), track=True)
                           for k, s in desc.param_shapes().items()})


# ------------------------------------------------------------------- ladder

def test_default_ladder_geometric():
    lad = default_sigma_ladder(4, 1.0, 0.01)
    assert len(lad) == 4
    assert lad[0] == pytest.approx(1.0)
    assert lad[-1] == pytest.approx(0.01)
    ratios = [lad[i + 1] / lad[i] for i in range(3)]
    assert np.allclose(ratios, ratios[0])
    assert all(a > b for a, b in zip(lad, lad[1:]))


def test_ladder_validation():
    with pytest.raises(ValueError):
        check_sigma_ladder([])
    with pytest.raises(ValueError):
        check_sigma_ladder([0.1, 0.5])
    with pytest.raises(ValueError):
        check_sigma_ladder([0.5, -0.1])
    with pytest.raises(ValueError):
        check_sigma_ladder([0.5, 0.5])
    assert check_sigma_ladder([1.0]) == (1.0,)


def test_resolve_sigma_one_based():
    lad = (1.0, 0.1, 0.01)
    assert resolve_sigma(lad) == 0.01
    assert resolve_sigma(lad, 1) == 1.0
    assert resolve_sigma(lad, 3) == 0.01
    with pytest.raises(ValueError):
        resolve_sigma(lad, 0)
    with pytest.raises(ValueError):
        resolve_sigma(lad, 4)


# ------------------------------------------------------------------ forward

def test_unet_output_shape_matches_input():
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = init_score_net(desc, seed=0)
    x = ad.tensor(np.random.default_rng(0).uniform(0, 1, (2, 16, 16, 3))
                  .astype(np.float32))
    out = raw_field(params, x)
    assert out.shape == (2, 16, 16, 3)


def test_unet_rejects_bad_resolution():
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = init_score_net(desc, seed=0)
    x = ad.tensor(np.zeros((1, 15, 16, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        raw_field(params, x)


def test_score_forward_divides_by_sigma():
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = init_score_net(desc, seed=1)
    x = ad.tensor(np.random.default_rng(1).uniform(0, 1, (1, 8, 8, 3))
                  .astype(np.float32))
    raw = raw_field(params, x)
    s = score_forward(params, x, 0.5)
    assert np.allclose(s.data, raw.data * 2.0, rtol=1e-6)
    with pytest.raises(ValueError):
        score_forward(params, x, 0.0)


def test_param_count_and_descriptor_roundtrip():
    desc = ScoreNetDesc(channels=(8, 16, 32))
    shapes = desc.param_shapes()
    assert shapes["e1.w"] == (3, 3, 3, 8)
    assert shapes["d1.w"] == (3, 3, 16, 8)
    assert shapes["out.w"] == (3, 3, 8, 3)
    back = ScoreNetDesc.from_dict(desc.to_dict())
    assert back == desc


def test_freeze_blocks_gradients():
    desc = ScoreNetDesc(kind="affine", dim=2)
    params = freeze(init_score_net(desc, seed=2))
    x = ad.tensor(np.ones((3, 2), dtype=np.float32), track=True)
    out = raw_field(params, x)
    loss = ad.reduce_sum(out)
    grads = ad.backward(loss)
    assert all(t not in grads for t in params.tensors.values())


# ------------------------------------------------------------ DSM objective

def test_zero_model_loss_is_half_mean_eps_sq():
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = _zero_params(desc)
    x = np.random.default_rng(3).uniform(0, 1, (2, 8, 8, 3))
    eps = Rng(7).normal(x.shape)
    loss = dsm_loss_single(params, x, 0.5, eps)
    want = 0.5 * np.mean(eps.astype(np.float32) ** 2)
    assert loss.item() == pytest.approx(want, rel=1e-6)


def test_unified_loss_averages_levels():
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = _zero_params(desc)
    x = np.random.default_rng(4).uniform(0, 1, (2, 8, 8, 3))
    sigmas = (1.0, 0.1)
    eps = [Rng(1).normal(x.shape), Rng(2).normal(x.shape)]
    unified = dsm_loss_unified(params, x, sigmas, eps)
    singles = [dsm_loss_single(params, x, s, e).item()
               for s, e in zip(sigmas, eps)]
    assert unified.item() == pytest.approx(np.mean(singles), rel=1e-6)
    with pytest.raises(ValueError):
        dsm_loss_unified(params, x, sigmas, eps[:1])


def test_dsm_gradient_matches_finite_difference():
    desc = ScoreNetDesc(channels=(2, 3, 4))
    params = init_score_net(desc, seed=5, dtype=np.float64)
    x = np.random.default_rng(5).uniform(0.2, 0.8, (2, 8, 8, 3))
    eps = Rng(11).normal(x.shape)

    def loss_value():
        return dsm_loss_single(params, x, 0.3, eps).item()

    grads = ad.backward(dsm_loss_single(params, x, 0.3, eps))
    for name in ("e1.w", "out.b", "mid.w", "d1.b"):
        t = params.tensors[name]
        g = grads[t].data
        flat_idx = np.random.default_rng(hash(name) % 2**31).integers(0, t.data.size)
        idx = np.unravel_index(flat_idx, t.data.shape)
        h = 1e-6
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = loss_value()
        t.data[idx] = orig - h
        down = loss_value()
        t.data[idx] = orig
        fd = (up - down) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


# ------------------------------------------------------- analytic optimum

def test_affine_model_learns_gaussian_score():
    # data N(mu, s^2 I): the optimal raw field is -sigma (x - mu) / (s^2 + sigma^2)
    mu = np.array([0.5, -0.3])
    s, sigma = 1.0, 0.5
    n = 4096
    data = mu + s * Rng(21).normal((n, 2))
    desc = ScoreNetDesc(kind="affine", dim=2)
    params, history = train_score_model(data, desc, (sigma,), epochs=60,
                                        batch_size=512, lr=0.05, seed=3)
    coeff = sigma / (s * s + sigma * sigma)
    w = params.tensors["lin.w"].data
    b = params.tensors["lin.b"].data
    assert np.allclose(w, -coeff * np.eye(2), atol=0.05)
    assert np.allclose(b, coeff * mu, atol=0.05)
    assert history[-1]["loss"] < history[0]["loss"]


def test_training_deterministic():
    data = Rng(31).normal((64, 2))
    desc = ScoreNetDesc(kind="affine", dim=2)
    p1, h1 = train_score_model(data, desc, (0.5,), epochs=2, batch_size=32,
                               lr=0.01, seed=9)
    p2, h2 = train_score_model(data, desc, (0.5,), epochs=2, batch_size=32,
                               lr=0.01, seed=9)
    assert np.array_equal(p1.tensors["lin.w"].data, p2.tensors["lin.w"].data)
    assert h1 == h2


def test_training_diverges_raises():
    data = Rng(41).normal((64, 2)) * 10
    desc = ScoreNetDesc(kind="affine", dim=2)
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        train_score_model(data, desc, (0.5,), epochs=200, batch_size=64,
                          lr=1e30, seed=1)


def test_batch_size_exceeds_dataset():
    data = Rng(51).normal((8, 2))
    with pytest.raises(ValueError):
        train_score_model(data, ScoreNetDesc(kind="affine", dim=2), (0.5,),
                          epochs=1, batch_size=16, lr=0.01, seed=0)


# ------------------------------------------------------------- score values

def test_score_values_mean_abs_at_smallest_sigma():
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = init_score_net(desc, seed=6)
    imgs = np.random.default_rng(6).uniform(0, 1, (3, 8, 8, 3))
    sigmas = (1.0, 0.1)
    vals = score_values(params, imgs, sigmas)
    for i in range(3):
        x = ad.tensor(imgs[i:i + 1].astype(np.float32))
        s = score_forward(params, x, 0.1)
        assert vals[i] == pytest.approx(np.abs(s.data).mean(), rel=1e-6)
    assert score_value(params, imgs[0], sigmas) == pytest.approx(vals[0], rel=1e-6)
    # explicit index picks other levels
    v1 = score_values(params, imgs, sigmas, sigma_index=1)
    assert not np.allclose(v1, vals)


def test_score_values_batching_invariant():
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = init_score_net(desc, seed=7)
    imgs = np.random.default_rng(7).uniform(0, 1, (5, 8, 8, 3))
    a = score_values(params, imgs, (0.5,), batch_size=2)
    b = score_values(params, imgs, (0.5,), batch_size=5)
    assert np.allclose(a, b, rtol=1e-6)


def test_score_distance_and_field_distance():
    assert score_distance(0.3, 0.5) == pytest.approx(0.2)
    assert score_distance(0.5, 0.3) == pytest.approx(0.2)
    desc = ScoreNetDesc(channels=(4, 6, 8))
    params = init_score_net(desc, seed=8)
    rng = np.random.default_rng(8)
    a = rng.uniform(0, 1, (2, 8, 8, 3))
    b = rng.uniform(0, 1, (2, 8, 8, 3))
    d = score_field_distances(params, a, b, (0.5,))
    sa = score_forward(params, ad.tensor(a.astype(np.float32)), 0.5)
    sb = score_forward(params, ad.tensor(b.astype(np.float32)), 0.5)
    want = np.abs(sa.data - sb.data).mean(axis=(1, 2, 3))
    assert np.allclose(d, want, rtol=1e-6)
    assert np.all(score_field_distances(params, a, a, (0.5,)) == 0)
    with pytest.raises(ValueError):
        score_field_distances(params, a, b[:1], (0.5,))
