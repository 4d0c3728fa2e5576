"""Tests for the denoiser model and the inference loop"""

import numpy as np
import pytest

from pcdenoise.core.autodiff import constant, gradcheck_error, precision, sum_of_squares
from pcdenoise.core.denoiser import (
    DenoiseTrace,
    DenoiserModel,
    benchmark_overhead,
    denoise_cloud,
    denoise_patch,
    estimate_gradient,
    extract_features,
    run_backbone_only,
    sweep_activation_step,
    uninet_refine,
)
from pcdenoise.core.errors import InvalidArgumentError, NumericFailureError
from pcdenoise.core.geometry import PointCloud, patch_at
from pcdenoise.models.schemas import DenoiseSchedule, ModelConfig

SMALL = ModelConfig(
    k_feat=4,
    feat_widths=[8, 8],
    feat_blocks=2,
    k_grad=6,
    grad_widths=[16, 8],
    k_uninet=4,
    l_uninet=2,
    uninet_width=8,
    uninet_growth=4,
)


def sphere_cloud(n: int, seed: int = 0, noise: float = 0.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n, 3))
    points = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    return PointCloud(points + noise * rng.normal(size=(n, 3)))


def small_patch(n: int = 40, seed: int = 0):
    cloud = sphere_cloud(n, seed, noise=0.02)
    return patch_at(cloud, 0, n)


def test_default_parameter_counts():
    """既定構成: バックボーン 55,619 / UniNet 5,955 パラメータ"""
    model = DenoiserModel()

    assert model.backbone_parameter_count() == 55_619
    assert model.uninet_parameter_count() == 5_955
    assert model.parameter_count() == 55_619 + 5_955
    assert model.parameter_count() < 400_000
    assert model.uninet_parameter_count() <= 50_000
    assert model.uninet_parameter_count() <= 0.15 * model.backbone_parameter_count()


def test_uninet_depth_and_neighbours_are_configurable():
    model = DenoiserModel(SMALL.model_copy(update={"l_uninet": 3, "k_uninet": 5}))

    assert len(model.uninet.convs) == 3
    assert model.uninet.k == 5
    assert model.store.names("uninet.conv2.")


def test_same_seed_same_parameters():
    first = DenoiserModel(SMALL, seed=3)
    second = DenoiserModel(SMALL, seed=3)
    other = DenoiserModel(SMALL, seed=4)
    for name in first.store.names():
        np.testing.assert_array_equal(first.store[name].values, second.store[name].values)
    assert any(
        not np.array_equal(first.store[name].values, other.store[name].values) for name in first.store.names()
    )


def test_features_are_finite_and_per_point():
    model = DenoiserModel(SMALL)
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(10, 60))
        patch = patch_at(PointCloud(rng.normal(size=(n, 3))), 0, n)
        features = extract_features(patch, model)
        assert features.shape == (n, model.features.out_channels)
        assert np.all(np.isfinite(features.values))


def test_features_need_enough_points():
    model = DenoiserModel(SMALL)
    patch = patch_at(sphere_cloud(4), 0, 4)
    with pytest.raises(InvalidArgumentError):
        extract_features(patch, model)


def test_features_are_not_rotation_invariant():
    model = DenoiserModel(SMALL)
    patch = small_patch()
    rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    rotated = patch.with_points(patch.cloud.points @ rotation.T)

    original = extract_features(patch, model).values
    turned = extract_features(rotated, model).values
    assert not np.allclose(original, turned)


def test_features_permutation_equivariance():
    model = DenoiserModel(SMALL)
    patch = small_patch()
    perm = np.random.default_rng(2).permutation(patch.cloud.n)
    permuted = patch.with_points(patch.cloud.points[perm])

    np.testing.assert_allclose(
        extract_features(permuted, model).values,
        extract_features(patch, model).values[perm],
        atol=1e-5,
    )


def test_gradient_permutation_and_translation_equivariance():
    """H を固定すると勾配場は点の並べ替えと平行移動に対して同変"""
    model = DenoiserModel(SMALL)
    patch = small_patch()
    noisy = patch.cloud
    features = extract_features(patch, model)
    positions = noisy.points + 0.01 * np.random.default_rng(3).normal(size=noisy.points.shape)
    base = estimate_gradient(positions, noisy, features, model).values

    assert base.shape == (noisy.n, 3)
    assert np.all(np.isfinite(base))

    perm = np.random.default_rng(4).permutation(noisy.n)
    shuffled = estimate_gradient(positions[perm], noisy, features, model).values
    np.testing.assert_allclose(shuffled, base[perm], atol=1e-5)

    delta = np.array([0.3, -0.2, 0.1])
    shifted = estimate_gradient(positions + delta, PointCloud(noisy.points + delta), features, model).values
    np.testing.assert_allclose(shifted, base, atol=1e-4)


def test_gradient_rejects_length_mismatch():
    model = DenoiserModel(SMALL)
    patch = small_patch()
    features = extract_features(patch, model)
    other = PointCloud(patch.cloud.points[:-1])
    with pytest.raises(InvalidArgumentError):
        estimate_gradient(other.points, other, features, model)
    with pytest.raises(InvalidArgumentError):
        estimate_gradient(np.zeros((5, 2)), patch.cloud, features, model)


def test_uninet_zero_exit_is_identity_refinement():
    model = DenoiserModel(SMALL)
    model.zero_heads()
    positions = small_patch().cloud.points
    np.testing.assert_array_equal(uninet_refine(positions, model).values, 0.0)


def test_uninet_permutation_equivariance_and_errors():
    model = DenoiserModel(SMALL)
    positions = small_patch().cloud.points
    perm = np.random.default_rng(5).permutation(positions.shape[0])

    np.testing.assert_allclose(
        uninet_refine(positions[perm], model).values,
        uninet_refine(positions, model).values[perm],
        atol=1e-5,
    )
    with pytest.raises(InvalidArgumentError):
        uninet_refine(positions[:SMALL.k_uninet], model)
    bad = positions.copy()
    bad[0, 0] = np.nan
    with pytest.raises(InvalidArgumentError):
        uninet_refine(bad, model)


def test_backbone_gradcheck():
    """特徴抽出器と勾配ヘッドを通した勾配を中心差分で確認 (float64)"""
    with precision(np.float64):
        for trial in range(50):
            model = DenoiserModel(SMALL, seed=trial)
            patch = small_patch(20, seed=trial)
            noisy = patch.cloud
            positions = noisy.points + 0.01 * np.random.default_rng(trial).normal(size=noisy.points.shape)
            names = model.store.names("feature.") + model.store.names("gradient.")
            inputs = [model.store[n] for n in names]

            def loss(*_):
                return sum_of_squares(estimate_gradient(positions, noisy, model.features(noisy), model))

            assert gradcheck_error(loss, inputs, eps=1e-6, max_elements=4, seed=trial) <= 1e-3


def test_uninet_gradcheck():
    with precision(np.float64):
        for trial in range(50):
            model = DenoiserModel(SMALL, seed=trial)
            positions = small_patch(20, seed=trial).cloud.points
            inputs = [model.store[n] for n in model.store.names("uninet.")]
            error = gradcheck_error(
                lambda *_: sum_of_squares(uninet_refine(positions, model)),
                inputs,
                eps=1e-6,
                max_elements=4,
                seed=trial,
            )
            assert error <= 1e-3


def test_zero_model_is_exact_identity():
    model = DenoiserModel(SMALL)
    model.zero_heads()
    patch = small_patch()
    out = denoise_patch(patch, model, DenoiseSchedule(T=5, t_act=2))

    assert out.points.tobytes() == patch.cloud.points.tobytes()
    np.testing.assert_array_equal(out.source_index, patch.cloud.source_index)


def test_full_activation_step_matches_backbone_loop():
    """t_act = T ではバックボーンのみの反復とビット単位で一致"""
    model = DenoiserModel(SMALL)
    patch = small_patch()
    schedule = DenoiseSchedule(T=6, t_act=6)

    trace = DenoiseTrace()
    full = denoise_patch(patch, model, schedule, trace)
    assert full.points.tobytes() == run_backbone_only(patch, model, schedule).points.tobytes()
    assert trace.uninet_displacement == []


def test_trace_records_active_steps():
    model = DenoiserModel(SMALL)
    trace = DenoiseTrace()
    denoise_patch(small_patch(), model, DenoiseSchedule(T=6, t_act=2), trace, keep_iterates=True)

    assert len(trace.uninet_displacement) == 4
    assert all(d > 0 for d in trace.uninet_displacement)
    assert len(trace.iterates) == 6


def test_scaled_uninet_variant_differs():
    model = DenoiserModel(SMALL)
    patch = small_patch()
    plain = denoise_patch(patch, model, DenoiseSchedule(T=3, t_act=0))
    scaled = denoise_patch(patch, model, DenoiseSchedule(T=3, t_act=0, scale_uninet=True))
    assert not np.allclose(plain.points, scaled.points)


def test_nan_parameters_raise_numeric_failure():
    model = DenoiserModel(SMALL)
    model.store["gradient.out.bias"].values[...] = np.nan
    with pytest.raises(NumericFailureError) as exc_info:
        denoise_patch(small_patch(), model, DenoiseSchedule(T=3, t_act=3))
    assert exc_info.value.details["iteration"] == 0


def test_denoise_cloud_keeps_count_and_is_deterministic():
    model = DenoiserModel(SMALL)
    cloud = sphere_cloud(300, seed=6, noise=0.02)
    schedule = DenoiseSchedule(T=3, t_act=1, patch_size=60)

    single = denoise_cloud(cloud, model, schedule, workers=1)
    threaded = denoise_cloud(cloud, model, schedule, workers=2)

    assert single.n == cloud.n
    assert np.all(np.isfinite(single.points))
    assert single.points.tobytes() == threaded.points.tobytes()
    assert not np.allclose(single.points, cloud.points)


def test_denoise_cloud_zero_model_is_identity():
    model = DenoiserModel(SMALL)
    model.zero_heads()
    cloud = sphere_cloud(250, seed=7, noise=0.02)
    out = denoise_cloud(cloud, model, DenoiseSchedule(T=3, t_act=1, patch_size=50), workers=1)
    np.testing.assert_allclose(out.points, cloud.points, atol=1e-6)


def test_benchmark_overhead_keys():
    model = DenoiserModel(SMALL)
    result = benchmark_overhead(sphere_cloud(80, seed=8), model, DenoiseSchedule(T=2, t_act=0, patch_size=80))

    assert set(result) == {
        "backbone_params", "uninet_params", "param_overhead", "backbone_seconds", "full_seconds", "time_overhead"
    }
    assert result["param_overhead"] == pytest.approx(result["uninet_params"] / result["backbone_params"])
    assert result["backbone_seconds"] >= 0 and result["full_seconds"] >= 0


def test_sweep_activation_step():
    model = DenoiserModel(SMALL)
    clean = sphere_cloud(80, seed=9)
    noisy = PointCloud(clean.points + 0.02 * np.random.default_rng(10).normal(size=clean.points.shape))
    schedule = DenoiseSchedule(T=3, t_act=3, patch_size=80)

    rows = sweep_activation_step(noisy, clean, model, schedule, [0, 3])
    assert [row["t_act"] for row in rows] == [0.0, 3.0]
    assert all(row["cd"] > 0 and row["uniformity"] >= 0 for row in rows)

    with pytest.raises(InvalidArgumentError):
        sweep_activation_step(noisy, clean, model, schedule, [4])
