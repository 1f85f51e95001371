import math

import numpy as np
import pytest

from mfff import distributions as D
from mfff import flow as F
from mfff import geometry as G
from mfff import nnet
from mfff import trainer as T
from mfff.exceptions import NonFiniteGradient, NonFiniteLoss

S2 = G.Sphere(2)


def small_model(man=S2, latent=None, scale=1e-2, seed=0):
    spec = nnet.NetworkSpec(man.m, residual_blocks=1, inner_depth=1, inner_width=16, init_scale=scale)
    return F.FlowModel.initialize(man, latent or D.UniformManifold(man), np.random.default_rng(seed), spec)


# -- Adam ------------------------------------------------------------------

def test_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    state = T.AdamState(3)
    T.adam_step(state, p, np.zeros(3), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_quadratic_bowl_converges():
    p = np.array([1.0, -2.0, 0.5, 3.0])
    state = T.AdamState(4)
    for _ in range(2000):
        T.adam_step(state, p, p.copy(), lr=1e-2)
    assert np.max(np.abs(p)) < 1e-6


def test_gradient_clipping():
    state = T.AdamState(2)
    p = np.zeros(2)
    norm = T.adam_step(state, p, np.array([6.0, 8.0]), lr=1.0, clip_norm=1.0)
    assert norm == 1.0
    np.testing.assert_allclose(state.m, 0.1 * np.array([0.6, 0.8]))


def test_weight_decay_is_decoupled():
    state = T.AdamState(1)
    p = np.array([2.0])
    T.adam_step(state, p, np.zeros(1), lr=0.1, weight_decay=0.5)
    assert p[0] == pytest.approx(2.0 * (1 - 0.05))
    np.testing.assert_array_equal(state.m, 0.0)


def test_non_finite_gradient_raises():
    with pytest.raises(NonFiniteGradient):
        T.adam_step(T.AdamState(2), np.zeros(2), np.array([np.nan, 1.0]), lr=0.1)


# -- schedules -------------------------------------------------------------

def test_exponential_schedule():
    s = T.Schedule("exponential", 0.5)
    assert T.lr_at(s, 0, 10, 1e-3) == 1e-3
    assert T.lr_at(s, 2, 10, 1e-3) == pytest.approx(2.5e-4)


def test_one_cycle_schedule():
    s = T.Schedule("one_cycle")
    total = 1000
    lrs = np.array([T.lr_at(s, k, total, 1e-3) for k in range(total)])
    assert lrs[0] == pytest.approx(1e-3)
    assert T.lr_at(s, 300, total, 1e-3) == pytest.approx(1e-2)
    assert lrs.max() == pytest.approx(1e-2)
    assert lrs[-1] == pytest.approx(1e-3 / 25)
    assert np.all(np.diff(lrs[:300]) > 0) and np.all(np.diff(lrs[300:]) < 0)


def test_schedule_and_config_validation():
    assert T.Schedule("exponential", 1.5).validate()
    assert T.Schedule("cosine").validate()
    errors = T.TrainConfig(batch_size=0, learning_rate=-1.0, schedule=T.Schedule("x", 0.0)).validate()
    assert len(errors) >= 4
    assert T.TrainConfig().validate() == []


# -- augmentation and splitting --------------------------------------------

def test_augment_batch():
    rng = np.random.default_rng(1)
    x = S2.sample_uniform(10_000, rng)
    assert T.augment_batch(S2, x, 0.0, rng) is x
    sigma = 1e-3
    y = T.augment_batch(S2, x, sigma, rng)
    S2.check_on_manifold(y)
    # the tangent noise length is Rayleigh with mean sigma * sqrt(pi / 2), within 20% of sigma * sqrt(n)
    mean = S2.geodesic_distance(x, y).mean()
    assert mean == pytest.approx(sigma * math.sqrt(2), rel=0.2)


def test_split_dataset_is_seeded_80_10_10():
    pts = np.arange(100.0)[:, None]
    a = T.split_dataset(pts, np.random.default_rng(2))
    b = T.split_dataset(pts, np.random.default_rng(2))
    assert [len(p) for p in a] == [80, 10, 10]
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p, q)
    np.testing.assert_array_equal(np.sort(np.concatenate(a)[:, 0]), pts[:, 0])


# -- training loop ---------------------------------------------------------

def vmf_data(count, seed):
    return D.sample_vmf_s2(np.array([0, 0, 1.0]), 10.0, count, np.random.default_rng(seed))


def test_zero_steps_leaves_model_unchanged():
    model = small_model()
    result = T.train(model, vmf_data(200, 3), T.TrainConfig(step_count=0, validation_size=50))
    np.testing.assert_array_equal(result.model.encoder.flat, model.encoder.flat)
    assert len(result.metrics) == 1 and result.metrics[0]["step"] == 0


def test_training_reduces_validation_nll():
    data = vmf_data(4000, 4)
    config = T.TrainConfig(batch_size=128, step_count=300, learning_rate=3e-3, validation_every=100,
                           validation_size=500, weights=F.LossWeights(beta_r_x=10, beta_u_z=10))
    result = T.train(small_model(), data, config)
    nll = [row["val_nll"] for row in result.metrics]
    assert nll[0] == pytest.approx(math.log(4 * math.pi), abs=0.05)
    assert min(nll) < nll[0] - 1.0
    assert result.best_step == result.metrics[int(np.argmin(nll))]["step"]
    assert [row["step"] for row in result.metrics] == [0, 100, 200, 300]
    assert set(result.metrics[0]) == set(T.METRIC_FIELDS)


def test_projection_loss_decreases_with_weight():
    model = small_model(scale=0.5, seed=5)
    data = S2.sample_uniform(2000, np.random.default_rng(6))
    losses = [F.projection_losses(model, data)[0]]
    config = T.TrainConfig(batch_size=128, step_count=100, learning_rate=1e-3, validation_every=100,
                           validation_size=200, weights=F.LossWeights(beta_r_x=1, beta_p_x=10, beta_p_z=10))
    for chunk in range(3):
        model = T.train(model, data, config).final_model
        losses.append(F.projection_losses(model, data)[0])
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.5 * losses[0]


def test_decoder_isolated_without_regularisers():
    model = small_model(scale=0.3)
    config = T.TrainConfig(batch_size=64, step_count=20, validation_every=10, validation_size=100,
                           weights=F.LossWeights(beta_p_x=1.0))
    result = T.train(model, vmf_data(500, 7), config)
    np.testing.assert_array_equal(result.final_model.decoder.flat, model.decoder.flat)
    assert not np.array_equal(result.final_model.encoder.flat, model.encoder.flat)


def test_nothing_to_learn_stays_at_log_volume():
    data = S2.sample_uniform(3000, np.random.default_rng(8))
    config = T.TrainConfig(batch_size=128, step_count=100, validation_every=50, validation_size=1000)
    result = T.train(small_model(), data, config)
    for row in result.metrics:
        assert row["val_nll"] == pytest.approx(math.log(4 * math.pi), abs=0.02)


def test_same_seed_gives_identical_metrics():
    data = vmf_data(1000, 9)
    config = T.TrainConfig(batch_size=64, step_count=40, validation_every=20, validation_size=200, seed=3,
                           data_noise_sigma=0.01, weights=F.LossWeights(beta_r_x=10, beta_u_z=10))
    a = T.train(small_model(), data, config)
    b = T.train(small_model(), data, config)
    assert T.metrics_rows(a.metrics) == T.metrics_rows(b.metrics)
    np.testing.assert_array_equal(a.final_model.encoder.flat, b.final_model.encoder.flat)


def test_streaming_data_source():
    config = T.TrainConfig(batch_size=32, step_count=10, validation_every=5, validation_size=100)
    result = T.train(small_model(), lambda count, rng: S2.sample_uniform(count, rng), config)
    assert [row["step"] for row in result.metrics] == [0, 5, 10]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_checkpoint_callback_and_non_finite_abort():
    seen = []
    config = T.TrainConfig(batch_size=32, step_count=10, validation_every=5, validation_size=100,
                           weights=F.LossWeights(beta_r_x=1))
    T.train(small_model(), vmf_data(300, 10), config, on_checkpoint=lambda m, s: seen.append(s))
    assert seen[0] == 0
    bad = T.TrainConfig(batch_size=32, step_count=10, learning_rate=1e300, validation_every=5,
                        validation_size=100, weights=F.LossWeights(beta_r_x=1))
    with pytest.raises(NonFiniteLoss) as info:
        T.train(small_model(scale=0.5), vmf_data(300, 11), bad)
    assert info.value.best_model is not None and info.value.metrics


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        T.train(small_model(), vmf_data(100, 12), T.TrainConfig(batch_size=0))
