"""Tests for flow paths, the velocity model, training, sampling, DTW and checkpoints."""
import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from whisperflow.flow import (
    Batch, CheckpointError, ConditioningMode, FlowExample, FlowMode, ModelConfig, TokenMixer,
    TrainConfig, TrainingDivergedError, VelocityModel, Warp, adaln_modulate, cfm_loss,
    dtw_align, fit_length, interpolate, load_checkpoint, misalign, path_cost, path_rates,
    read_loss_curve, resample_frames, sample, save_checkpoint, stack_batch, target_velocity,
    timestep_embed, train, warp_along_path, write_loss_curve,
)
from whisperflow.flow.training import euler_integrate
from whisperflow.studies import (
    VARIANTS, constant_field_error, exact_field_euler_std, gaussian_transport_velocity,
    gradient_check, monte_carlo_delta_velocity, optimal_delta_velocity, relative_errors,
)

torch.set_num_threads(1)


def small_model(conditioning="prepend", mixer="self_attention", seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(latent_dim=3, content_dim=4, speaker_dim=2, blocks=1, width=8, time_dim=8,
               conditioning=conditioning, mixer=mixer)
    cfg.update(kw)
    return VelocityModel(ModelConfig(**cfg))


def randomise(model, seed=0, scale=0.5):
    model.set_flat(scale * np.random.default_rng(seed).standard_normal(model.parameter_count()))
    return model


def inputs(batch=2, length=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(batch, 3, length, generator=g), torch.rand(batch, generator=g),
            torch.randn(batch, length, 4, generator=g), torch.randn(batch, 2, generator=g))


# ---------------------------------------------------------------------------
# Paths and embeddings
# ---------------------------------------------------------------------------

class TestPaths:
    def test_endpoints(self):
        z0, z1 = np.arange(6.0).reshape(2, 3), -np.ones((2, 3))
        assert np.array_equal(interpolate(z0, z1, 0.0), z0)
        assert np.array_equal(interpolate(z0, z1, 1.0), z1)

    def test_midpoint(self):
        assert interpolate(np.zeros(1), 2 * np.ones(1), 0.5)[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interpolate(np.zeros(3), np.zeros(4), 0.5)
        with pytest.raises(ValueError):
            target_velocity(np.zeros(3), np.zeros(4))

    def test_t_out_of_range(self):
        with pytest.raises(ValueError):
            interpolate(np.zeros(3), np.zeros(3), 1.5)

    def test_velocity(self):
        z = np.random.default_rng(0).standard_normal((2, 3))
        assert np.all(target_velocity(z, z) == 0)
        assert np.array_equal(target_velocity(np.zeros((2, 3)), z), z)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), t=st.floats(0.0, 0.99))
    def test_path_derivative_is_target(self, seed, t):
        rng = np.random.default_rng(seed)
        z0, z1 = rng.standard_normal((2, 4, 3))
        h = 1e-3
        fd = (interpolate(z0, z1, t + h) - interpolate(z0, z1, t)) / h
        assert np.allclose(fd, target_velocity(z0, z1), atol=1e-8)

    def test_embed_zero(self):
        e = timestep_embed(0.0, 16)
        assert np.all(e[:8] == 0) and np.all(e[8:] == 1)

    def test_embed_distinct(self):
        es = [timestep_embed(t, 16) for t in (0.0, 0.5, 1.0)]
        for a, b in itertools.combinations(es, 2):
            assert np.linalg.norm(a - b) > 0

    def test_embed_norm(self):
        for t in np.linspace(0, 1, 11):
            assert np.linalg.norm(timestep_embed(t, 32)) <= math.sqrt(32) + 1e-12

    def test_embed_odd_dim(self):
        with pytest.raises(ValueError):
            timestep_embed(0.3, 7)

    def test_embed_torch_matches_numpy(self):
        t = np.array([0.0, 0.25, 0.9])
        e_np = timestep_embed(t, 12)
        e_t = timestep_embed(torch.tensor(t), 12).numpy()
        assert np.allclose(e_np, e_t, atol=1e-12)


# ---------------------------------------------------------------------------
# AdaLN and the velocity model
# ---------------------------------------------------------------------------

class TestAdaLN:
    def test_zero_init_is_plain_norm(self):
        affine = torch.nn.Linear(5, 8)
        torch.nn.init.zeros_(affine.weight)
        torch.nn.init.zeros_(affine.bias)
        h = torch.randn(2, 3, 4)
        out = adaln_modulate(h, torch.randn(2, 3), torch.randn(2, 2), affine)
        ref = (h - h.mean(-1, keepdim=True)) / torch.sqrt(h.var(-1, unbiased=False, keepdim=True) + 1e-5)
        assert torch.allclose(out, ref, atol=1e-6)

    def test_constant_row_gets_shift(self):
        affine = torch.nn.Linear(3, 8)
        h = torch.full((1, 2, 4), 7.0)
        t_emb, spk = torch.randn(1, 2), torch.randn(1, 1)
        beta = affine(torch.cat([t_emb, spk], -1))[:, 4:]
        out = adaln_modulate(h, t_emb, spk, affine)
        assert torch.allclose(out, beta[:, None, :].expand(1, 2, 4), atol=1e-6)

    def test_speaker_changes_output(self):
        affine = torch.nn.Linear(5, 8)
        torch.nn.init.normal_(affine.weight)
        h, t_emb = torch.randn(1, 3, 4), torch.randn(1, 3)
        a = adaln_modulate(h, t_emb, torch.zeros(1, 2), affine)
        b = adaln_modulate(h, t_emb, torch.ones(1, 2), affine)
        assert not torch.allclose(a, b)


class TestVelocityModel:
    @pytest.mark.parametrize("conditioning, mixer", VARIANTS)
    def test_output_shape(self, conditioning, mixer):
        model = small_model(conditioning, mixer)
        z, t, c, s = inputs()
        assert model(z, t, c, s).shape == z.shape

    def test_fresh_model_predicts_zero(self):
        z, t, c, s = inputs()
        assert torch.all(small_model()(z, t, c, s) == 0)

    def test_prepend_content_permutation(self):
        model = randomise(small_model("prepend", "self_attention"))
        z, t, c, s = inputs(batch=1)
        perm = torch.tensor([4, 2, 0, 1, 3])
        assert not torch.allclose(model(z, t, c, s), model(z, t, c[:, perm], s))
        same = c[:, :1].expand(1, 5, 4)
        assert torch.equal(model(z, t, same, s), model(z, t, same[:, perm], s))

    def test_speaker_matters(self):
        model = randomise(small_model())
        z, t, c, s = inputs()
        assert not torch.allclose(model(z, t, c, s), model(z, t, c, s + 1))

    def test_dimension_errors(self):
        model = small_model()
        z, t, c, s = inputs()
        with pytest.raises(ValueError):
            model(z[:, :2], t, c, s)
        with pytest.raises(ValueError):
            model(z, t, c[:, :4], s)
        with pytest.raises(ValueError):
            model(z, t, c, s[:, :1])

    def test_flat_roundtrip_and_layout(self):
        model = small_model("cross_attention", "temporal_conv")
        flat = np.random.default_rng(0).standard_normal(model.parameter_count()).astype(np.float32)
        model.set_flat(flat)
        assert np.array_equal(model.get_flat(), flat)
        layout = model.layout()
        end = layout[-1][2] + int(np.prod(layout[-1][1]))
        assert end == model.parameter_count()

    def test_set_flat_rejects_bad_vectors(self):
        model = small_model()
        with pytest.raises(ValueError):
            model.set_flat(np.zeros(3))
        bad = np.zeros(model.parameter_count())
        bad[0] = np.nan
        with pytest.raises(ValueError):
            model.set_flat(bad)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(time_dim=7)
        with pytest.raises(ValueError):
            ModelConfig(conditioning="sideways")


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

class TestLoss:
    def test_exact_predictor_gives_zero(self):
        z1 = torch.randn(3, 2, 4)
        z0 = torch.randn(3, 2, 4)

        class Exact(torch.nn.Module):
            def forward(self, zt, t, content, speaker, positions=None):
                return z1 - z0

        batch = Batch(z1, torch.zeros(3, 4, 1), torch.zeros(3, 0), z0)
        assert float(cfm_loss(Exact(), batch, FlowMode.PAIRED_SOURCE)) == 0.0

    def test_zero_model_loss_is_second_moment(self):
        z1 = torch.tensor([[[1.0, -2.0, 0.5]]])
        model = VelocityModel(ModelConfig(latent_dim=1, content_dim=1, speaker_dim=0, width=8,
                                          blocks=1, time_dim=8))
        batch = Batch(z1, torch.zeros(1, 3, 1), torch.zeros(1, 0), torch.zeros_like(z1))
        g = torch.Generator().manual_seed(0)
        values = [cfm_loss(model, batch, FlowMode.PAIRED_SOURCE, g).item() for _ in range(50)]
        assert np.allclose(values, float((z1 ** 2).mean()))

    def test_gaussian_prior_zero_model_monte_carlo(self):
        # E||z1 - z0||^2 / n = mean(z1^2) + 1 for z0 ~ N(0, I)
        z1 = torch.tensor([[[1.0, -2.0, 0.5]]]).expand(512, 1, 3).contiguous()
        model = VelocityModel(ModelConfig(latent_dim=1, content_dim=1, speaker_dim=0, width=8,
                                          blocks=1, time_dim=8))
        batch = Batch(z1, torch.zeros(512, 3, 1), torch.zeros(512, 0))
        g = torch.Generator().manual_seed(1)
        loss = np.mean([cfm_loss(model, batch, FlowMode.GAUSSIAN_PRIOR, g).item() for _ in range(20)])
        # Var((c - z0)^2) = 2 + 4 c^2; allow four standard errors
        c2 = (z1[0] ** 2).numpy().ravel()
        sigma = np.sqrt(np.mean(2 + 4 * c2) / (512 * 20 * c2.size))
        assert abs(loss - (c2.mean() + 1)) < 4 * sigma

    def test_paired_mode_needs_source(self):
        batch = Batch(torch.zeros(1, 3, 5), torch.zeros(1, 5, 4), torch.zeros(1, 2))
        with pytest.raises(ValueError):
            cfm_loss(small_model(), batch, FlowMode.PAIRED_SOURCE)

    def test_empty_batch(self):
        batch = Batch(torch.zeros(0, 3, 5), torch.zeros(0, 5, 4), torch.zeros(0, 2))
        with pytest.raises(ValueError):
            cfm_loss(small_model(), batch, FlowMode.GAUSSIAN_PRIOR)

    @pytest.mark.parametrize("conditioning, mixer", VARIANTS)
    def test_gradient_check(self, conditioning, mixer):
        result = gradient_check(conditioning, mixer, width=8, blocks=1)
        assert result.max_relative_error <= 1e-3

    def test_gradient_check_paired_mode(self):
        result = gradient_check("prepend", "temporal_conv", mode=FlowMode.PAIRED_SOURCE, seed=3)
        assert result.max_relative_error <= 1e-3

    def test_relative_error_floor(self):
        err = relative_errors(np.array([1.0, 0.0]), np.array([1.0, 1e-12]))
        assert err[0] == 0 and err[1] <= 1e-6


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def toy_examples(n=6, length=5, seed=0, paired=False):
    rng = np.random.default_rng(seed)
    return [FlowExample(rng.standard_normal((3, length)), rng.standard_normal((length, 4)),
                        rng.standard_normal(2), rng.standard_normal((3, length)) if paired else None)
            for _ in range(n)]


class TestTrain:
    def test_zero_steps_unchanged(self):
        model = small_model()
        before = model.get_flat()
        result = train(model, toy_examples(), TrainConfig(steps=0))
        assert np.array_equal(model.get_flat(), before) and result.losses == []

    def test_deterministic(self):
        cfg = TrainConfig(steps=30, batch_size=4, seed=5, crop_frames=3)
        a = train(small_model(seed=1), toy_examples(), cfg)
        b = train(small_model(seed=1), toy_examples(), cfg)
        assert a.losses == b.losses
        assert np.array_equal(a.model.get_flat(), b.model.get_flat())

    def test_different_seed_differs(self):
        a = train(small_model(), toy_examples(), TrainConfig(steps=10, batch_size=4, seed=0))
        b = train(small_model(), toy_examples(), TrainConfig(steps=10, batch_size=4, seed=1))
        assert a.losses != b.losses

    def test_delta_target_loss(self):
        z1 = np.array([[1.0], [-0.5]])
        torch.manual_seed(0)
        model = VelocityModel(ModelConfig(latent_dim=2, content_dim=1, speaker_dim=0, blocks=2,
                                          width=64, time_dim=32))
        result = train(model, [FlowExample(z1, np.zeros((1, 1)), np.zeros(0))],
                       TrainConfig(steps=2000, batch_size=256, seed=0, crop_frames=None))
        tail = np.mean([loss for _, loss in result.losses[-100:]])
        # the irreducible loss is zero for a single endpoint
        assert tail <= 0.05

    def test_paired_mode_trains(self):
        result = train(small_model(), toy_examples(paired=True),
                       TrainConfig(steps=200, batch_size=4, learning_rate=3e-3,
                                   mode=FlowMode.PAIRED_SOURCE))
        first = np.mean([v for _, v in result.losses[:20]])
        last = np.mean([v for _, v in result.losses[-20:]])
        assert last < first

    def test_divergence_reports_step(self):
        model = small_model()
        with pytest.raises(TrainingDivergedError) as info:
            train(model, toy_examples(), TrainConfig(steps=5, batch_size=2, learning_rate=1e30,
                                                       betas=(0.0, 0.0)))
        assert info.value.step >= 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(betas=(1.0, 0.9))

    def test_stack_batch_crop(self):
        ex = toy_examples(n=2, length=8)
        batch = stack_batch(ex, [2, 2], 4)
        assert batch.z1.shape == (2, 3, 4)
        assert torch.allclose(batch.z1[0].double(), torch.as_tensor(ex[0].z1[:, 2:6]), atol=1e-6)
        assert batch.positions.tolist() == [2, 3, 4, 5]

    def test_example_validation(self):
        with pytest.raises(ValueError):
            FlowExample(np.zeros((3, 5)), np.zeros((4, 2)), np.zeros(1))


# ---------------------------------------------------------------------------
# Euler integration and sampling
# ---------------------------------------------------------------------------

class TestEuler:
    @pytest.mark.parametrize("steps", [1, 3, 10, 33])
    def test_constant_field_exact(self, steps):
        assert constant_field_error(steps) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000), steps=st.integers(1, 50))
    def test_constant_field_any_values(self, seed, steps):
        rng = np.random.default_rng(seed)
        c = torch.as_tensor(rng.standard_normal((1, 2, 3)))
        z0 = torch.as_tensor(rng.standard_normal((1, 2, 3)))
        out = euler_integrate(lambda z, t: c, z0, steps)
        assert torch.allclose(out, z0 + c, atol=1e-12)

    @pytest.mark.parametrize("steps", [1, 2, 10, 100])
    def test_linear_field(self, steps):
        z0 = torch.tensor([[[1.0, -2.0]]], dtype=torch.float64)
        out = euler_integrate(lambda z, t: z, z0, steps)
        assert torch.allclose(out, z0 * (1 + 1 / steps) ** steps, rtol=1e-12)

    def test_linear_field_approaches_e(self):
        z0 = torch.ones(1, 1, 1, dtype=torch.float64)
        assert abs(float(euler_integrate(lambda z, t: z, z0, 10000)) - math.e) < 1e-3

    def test_time_grid(self):
        seen = []
        euler_integrate(lambda z, t: seen.append(float(t[0])) or torch.zeros_like(z),
                        torch.zeros(1, 1, 1), 4)
        assert seen == [0.0, 0.25, 0.5, 0.75]

    def test_default_steps(self):
        import inspect
        assert inspect.signature(euler_integrate).parameters["steps"].default == 10
        assert inspect.signature(sample).parameters["steps"].default == 10

    def test_invalid_steps(self):
        with pytest.raises(ValueError):
            euler_integrate(lambda z, t: z, torch.zeros(1, 1, 1), 0)

    def test_sample_deterministic_and_zero_model(self):
        model = small_model()
        c, s = torch.randn(2, 5, 4), torch.randn(2, 2)
        a = sample(model, c, s, 5, seed=3)
        b = sample(model, c, s, 5, seed=3)
        assert torch.equal(a, b)
        z0 = torch.randn((2, 3, 5), generator=torch.Generator().manual_seed(3))
        assert torch.equal(a, z0)


class TestFieldOracles:
    def test_delta_field_matches_monte_carlo(self):
        target = np.array([1.0, -0.5])
        centres = np.array([[0.0, 0.0], [0.5, -0.5], [-0.5, 0.5], [0.8, -0.2]])
        for t in (0.2, 0.5):
            mc = monte_carlo_delta_velocity(target, t, centres, 0.05, 400_000, seed=1)
            exact = optimal_delta_velocity(centres, target, t)
            assert np.allclose(mc, exact, atol=0.1 / (1 - t))

    def test_transport_field_pushes_exactly(self):
        # fine Euler integration of the exact field reaches the target law
        z0 = torch.randn(20000, 2, 1, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        mean = torch.tensor([3.0, 3.0], dtype=torch.float64)[None, :, None]
        out = euler_integrate(lambda z, t: gaussian_transport_velocity(z, t, mean, 0.5), z0, 2000)
        assert torch.allclose(out.mean(0)[:, 0], torch.tensor([3.0, 3.0], dtype=torch.float64),
                              atol=0.02)
        assert torch.allclose(out.std(0)[:, 0], torch.tensor([0.5, 0.5], dtype=torch.float64),
                              atol=0.01)

    def test_exact_field_euler_spread(self):
        # closed-form affine recursion vs simulating the same Euler steps
        z0 = torch.randn(50000, 1, 1, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        mean = torch.zeros(1, 1, 1, dtype=torch.float64)
        out = euler_integrate(lambda z, t: gaussian_transport_velocity(z, t, mean, 0.5), z0, 10)
        ratio = float(out.std() / z0.std())
        assert abs(ratio - exact_field_euler_std(0.5, 10)) < 1e-9
        assert abs(exact_field_euler_std(0.5, 10) - 0.4308) < 1e-4
        assert abs(exact_field_euler_std(0.5, 4000) - 0.5) < 1e-3


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def brute_force_dtw(a, b):
    """Minimum cost over every monotone path by exhaustive enumeration."""
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    best = [np.inf, None]

    def walk(i, j, acc, path):
        acc += cost[i, j]
        path = path + [(i, j)]
        if (i, j) == (len(a) - 1, len(b) - 1):
            if acc < best[0] - 1e-12:
                best[:] = [acc, path]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < len(a) and j + dj < len(b):
                walk(i + di, j + dj, acc, path)

    walk(0, 0, 0.0, [])
    return best


class TestDtw:
    def test_identical(self):
        a = np.random.default_rng(0).standard_normal((6, 3))
        r = dtw_align(a, a)
        assert r.path == [(i, i) for i in range(6)] and r.cost == 0

    def test_duplicated_frame(self):
        a = np.random.default_rng(1).standard_normal((5, 2))
        b = np.insert(a, 3, a[2], axis=0)
        r = dtw_align(a, b)
        steps = [(q[0] - p[0], q[1] - p[1]) for p, q in zip(r.path, r.path[1:])]
        assert steps.count((0, 1)) == 1
        assert steps.count((1, 0)) == 0
        assert r.path[steps.index((0, 1)) + 1] == (2, 3)
        assert r.cost == 0
        assert brute_force_dtw(a, b)[0] == 0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), la=st.integers(1, 5), lb=st.integers(1, 5))
    def test_matches_brute_force(self, seed, la, lb):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((la, 2)), rng.standard_normal((lb, 2))
        r = dtw_align(a, b)
        assert np.isclose(r.cost, brute_force_dtw(a, b)[0])
        assert np.isclose(path_cost(a, b, r.path), r.cost)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), la=st.integers(1, 12), lb=st.integers(1, 12))
    def test_symmetric_and_monotone(self, seed, la, lb):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((la, 3)), rng.standard_normal((lb, 3))
        r = dtw_align(a, b)
        assert np.isclose(r.cost, dtw_align(b, a).cost)
        assert r.path[0] == (0, 0) and r.path[-1] == (la - 1, lb - 1)
        for p, q in zip(r.path, r.path[1:]):
            assert (q[0] - p[0], q[1] - p[1]) in ((1, 1), (1, 0), (0, 1))

    def test_empty(self):
        with pytest.raises(ValueError):
            dtw_align(np.zeros((0, 2)), np.zeros((3, 2)))


class TestMisalign:
    def test_identity(self):
        z = np.random.default_rng(0).standard_normal((4, 9))
        assert np.array_equal(misalign(z, Warp.uniform(1.0, 9)), z)

    @pytest.mark.parametrize("length", [1, 2, 7, 10, 31])
    def test_rate_two(self, length):
        z = np.arange(length, dtype=float)[None, :]
        out = misalign(z, Warp.uniform(2.0, length))
        assert out.shape[1] == math.ceil(length / 2)
        assert np.array_equal(out[0], np.arange(0, length, 2))

    def test_non_monotone_warp(self):
        with pytest.raises(ValueError):
            Warp((0.0, 5.0, 10.0), (1.0, -1.0))
        with pytest.raises(ValueError):
            Warp((0.0, 5.0, 4.0), (1.0, 1.0))
        with pytest.raises(ValueError):
            Warp((1.0, 5.0), (1.0,))

    def test_random_warp_rates(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = Warp.random(100, rng)
            assert len(w.rates) == 3
            assert all(0.7 <= r <= 1.4 for r in w.rates)

    def test_dtw_recovers_rates(self):
        rng = np.random.default_rng(4)
        corrs = []
        for _ in range(10):
            length = 60
            z = np.cumsum(rng.standard_normal((3, length)), axis=1)
            warp = Warp.random(length, rng)
            out = misalign(z, warp)
            path = [(i, j) for i, j in dtw_align(z.T, out.T).path]
            rates = path_rates(path, warp.output_knots())
            corrs.append(np.corrcoef(rates, warp.rates)[0, 1])
        assert np.median(corrs) >= 0.8

    def test_resample_frames(self):
        x = np.arange(6.0)[None, :]
        assert resample_frames(x, 3, axis=1).tolist() == [[1.0, 3.0, 5.0]]
        assert resample_frames(x, 6, axis=1).tolist() == x.tolist()

    def test_fit_length(self):
        x = np.arange(4.0)[None, :]
        assert fit_length(x, 2).tolist() == [[0.0, 1.0]]
        assert fit_length(x, 6).tolist() == [[0.0, 1.0, 2.0, 3.0, 3.0, 3.0]]
        with pytest.raises(ValueError):
            fit_length(x, 0)

    def test_warp_along_path_recovers_source(self):
        z = np.random.default_rng(5).standard_normal((2, 12))
        warped = misalign(z, Warp.uniform(0.5, 12))
        path = dtw_align(z.T, warped.T).path
        assert np.allclose(warp_along_path(warped, path, 12), z)


# ---------------------------------------------------------------------------
# Checkpoints and loss curves
# ---------------------------------------------------------------------------

class TestCheckpoint:
    @pytest.mark.parametrize("conditioning, mixer", VARIANTS)
    def test_roundtrip(self, tmp_path, conditioning, mixer):
        model = randomise(small_model(conditioning, mixer))
        save_checkpoint(tmp_path / "m.fwm", model)
        back = load_checkpoint(tmp_path / "m.fwm")
        assert back.config == model.config
        assert np.array_equal(back.get_flat(), model.get_flat())

    def test_header(self, tmp_path):
        model = small_model()
        save_checkpoint(tmp_path / "m.fwm", model)
        blob = (tmp_path / "m.fwm").read_bytes()
        assert blob[:4] == b"FWM1"
        assert len(blob) == 50 + 4 * model.parameter_count()

    def test_bad_magic(self, tmp_path):
        save_checkpoint(tmp_path / "m.fwm", small_model())
        blob = bytearray((tmp_path / "m.fwm").read_bytes())
        blob[:4] = b"XXXX"
        (tmp_path / "bad.fwm").write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.fwm")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.fwm", small_model())
        blob = (tmp_path / "m.fwm").read_bytes()
        (tmp_path / "t.fwm").write_bytes(blob[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.fwm")

    def test_loss_curve(self, tmp_path):
        losses = [(0, 1.5), (1, 0.25), (2, 1e-7)]
        write_loss_curve(tmp_path / "loss.csv", losses)
        assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,loss"
        assert read_loss_curve(tmp_path / "loss.csv") == losses
