import functools
import math

import numpy as np
import pytest

from gaborsense.errors import ConfigError, DimensionMismatch, InvalidLayer
from gaborsense.oracle import GaborBankClassifier
from gaborsense.perturb import f32_within
from gaborsense.svd import (
    LAYERS,
    LinearOperatorProbe,
    SingularConfig,
    layer_jacobian,
    matrix_probe,
    power_method,
    psi,
    singular_uap,
    stacked_probe,
)
from gaborsense.synthetic import make_synthetic_images


def jacobi_top_singular_pair(matrix, sweeps=60, tol=1e-14):
    """Top singular value / right vector via one-sided Jacobi rotations.

    Orthogonalizes column pairs with plane rotations until all normalized
    inner products fall below tol; singular values are then column norms
    and the accumulated rotations give the right singular vectors.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[1]
    v = np.eye(n)
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = float(a[:, i] @ a[:, i])
                beta = float(a[:, j] @ a[:, j])
                gamma = float(a[:, i] @ a[:, j])
                denom = math.sqrt(alpha * beta)
                if denom > 0.0:
                    off = max(off, abs(gamma) / denom)
                if gamma == 0.0:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                ai = a[:, i].copy()
                a[:, i] = c * ai - s * a[:, j]
                a[:, j] = s * ai + c * a[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if off < tol:
            break
    norms = np.sqrt((a * a).sum(axis=0))
    top = int(np.argmax(norms))
    return float(norms[top]), v[:, top]


@functools.lru_cache(maxsize=1)
def gap_separated_matrices():
    """50 random matrices up to 12x12 whose top singular gap is >= 10%."""
    rng = np.random.default_rng(2024)
    out = []
    while len(out) < 50:
        m = int(rng.integers(2, 13))
        n = int(rng.integers(2, 13))
        a = rng.normal(size=(m, n))
        svals = np.linalg.svd(a, compute_uv=False)
        if (svals[0] - svals[1]) / svals[0] >= 0.10:
            out.append(a)
    return tuple(out)


def test_jacobi_oracle_agrees_with_lapack():
    """The hand-rolled oracle must itself be right before it judges anything."""
    for a in gap_separated_matrices():
        sigma, vec = jacobi_top_singular_pair(a)
        u_, s_, vt_ = np.linalg.svd(a)
        assert abs(sigma - s_[0]) <= 1e-10 * s_[0]
        assert abs(float(np.dot(vec, vt_[0]))) >= 1.0 - 1e-8


def test_power_method_50_random_matrices():
    cfg = SingularConfig(p=2.0, q=2.0, epsilon=1.0, tol=1e-10, max_iter=20000, seed=7)
    for a in gap_separated_matrices():
        sigma, vec = jacobi_top_singular_pair(a)
        result = power_method(matrix_probe(a), cfg)
        s_hat = result.s / np.linalg.norm(result.s)
        assert abs(float(np.dot(s_hat, vec))) >= 0.999
        assert abs(result.value - sigma) <= 1e-6


def test_diagonal_matrix_top_axis():
    cfg = SingularConfig(epsilon=12.0, tol=1e-12, max_iter=5000, seed=3)
    result = power_method(matrix_probe(np.diag([3.0, 1.0])), cfg)
    assert result.value == pytest.approx(3.0, abs=1e-9)
    s_hat = result.s / np.linalg.norm(result.s)
    assert abs(abs(float(s_hat[0])) - 1.0) <= 1e-6
    assert abs(float(s_hat[1])) <= 1e-6
    assert np.linalg.norm(result.s) == pytest.approx(12.0, rel=1e-12)


def test_identity_unit_value():
    cfg = SingularConfig(epsilon=1.0, seed=1)
    result = power_method(matrix_probe(np.eye(4)), cfg)
    assert result.value == pytest.approx(1.0, abs=1e-12)
    assert result.converged


def test_psi_examples():
    np.testing.assert_allclose(psi(np.array([-2.0, 0.0, 3.0]), 3.0), [-4.0, 0.0, 9.0])
    z = np.array([-1.5, 0.25, 7.0])
    np.testing.assert_array_equal(psi(z, 2.0), z)


def test_value_history_monotone():
    rng = np.random.default_rng(40)
    a = rng.normal(size=(10, 8))
    cfg = SingularConfig(epsilon=1.0, tol=1e-12, max_iter=5000, seed=9)
    result = power_method(matrix_probe(a), cfg)
    assert result.converged
    history = result.value_history
    assert len(history) >= 2
    for earlier, later in zip(history, history[1:]):
        assert later >= earlier - 1e-9


def test_scale_equivariance_power_method():
    a = np.random.default_rng(8).normal(size=(6, 5))
    base = dict(p=2.0, q=2.0, tol=1e-10, max_iter=5000, seed=2)
    r1 = power_method(matrix_probe(a), SingularConfig(epsilon=12.0, **base))
    r2 = power_method(matrix_probe(a), SingularConfig(epsilon=24.0, **base))
    # epsilon only rescales the final direction, so doubling it is exact.
    assert np.array_equal(r2.s, 2.0 * r1.s)
    assert r2.value == r1.value


def test_no_convergence_flag():
    a = np.random.default_rng(4).normal(size=(7, 7))
    cfg = SingularConfig(epsilon=1.0, tol=1e-18, max_iter=3, seed=0)
    result = power_method(matrix_probe(a), cfg)
    assert not result.converged
    assert result.iterations == 3
    assert len(result.value_history) == 3
    assert result.value == max(result.value_history)


def test_result_unpacks_as_pair():
    result = power_method(matrix_probe(np.eye(2)), SingularConfig(epsilon=1.0))
    s, value = result
    assert s is result.s and value == result.value


# -- Jacobian probes against the real model -------------------------------------


def _forward_at_layer(model, x, layer):
    maps = model.conv_maps(x)
    if layer == "post_conv":
        return maps.ravel()
    pooled = model.pool_jvp(np.maximum(maps, 0.0))
    if layer == "post_pool":
        return pooled
    return model.weights @ pooled


@pytest.mark.parametrize("layer", LAYERS)
def test_transpose_consistency_100_probes(reference_model, layer):
    x = make_synthetic_images(1, 32, 32, seed=17)[0]
    probe = layer_jacobian(reference_model, x, layer)
    probe.check_consistency(seed=123, probes=100, tol=1e-6)


def test_transpose_consistency_catches_broken_adjoint():
    a = np.random.default_rng(1).normal(size=(5, 4))
    broken = LinearOperatorProbe(
        apply=lambda v: a @ v,
        apply_transpose=lambda u: a.T @ u * 1.01,
        input_dim=4,
        output_dim=5,
    )
    with pytest.raises(DimensionMismatch):
        broken.check_consistency(probes=100)


@pytest.mark.parametrize("layer", LAYERS)
def test_finite_difference_matches_jacobian(reference_model, layer):
    x = np.asarray(make_synthetic_images(1, 32, 32, seed=17)[0], dtype=np.float64)
    probe = layer_jacobian(reference_model, x, layer)
    rng = np.random.default_rng(99)
    h = 1e-3
    for _ in range(3):
        v = rng.uniform(-1.0, 1.0, size=probe.input_dim)
        v /= np.linalg.norm(v)
        shaped = v.reshape(x.shape)
        fd = (
            _forward_at_layer(reference_model, x + h * shaped, layer)
            - _forward_at_layer(reference_model, x - h * shaped, layer)
        ) / (2.0 * h)
        jv = probe.apply(v)
        rel = float(np.linalg.norm(fd - jv)) / max(1.0, float(np.linalg.norm(jv)))
        assert rel <= 1e-3


def test_invalid_layer_rejected(reference_model, small_images):
    with pytest.raises(InvalidLayer):
        layer_jacobian(reference_model, small_images[0], "post_softmax")


def test_matrix_probe_shapes_checked():
    bad = LinearOperatorProbe(
        apply=lambda v: np.zeros(3),
        apply_transpose=lambda u: np.zeros(2),
        input_dim=2,
        output_dim=4,
    )
    with pytest.raises(DimensionMismatch):
        power_method(bad, SingularConfig(epsilon=1.0))
    empty = LinearOperatorProbe(
        apply=lambda v: v,
        apply_transpose=lambda u: u,
        input_dim=0,
        output_dim=0,
    )
    with pytest.raises(DimensionMismatch):
        power_method(empty, SingularConfig(epsilon=1.0))


# -- stacked probes -------------------------------------------------------------


def test_stacked_probe_matches_vstack():
    rng = np.random.default_rng(15)
    a = rng.normal(size=(3, 6))
    b = rng.normal(size=(5, 6))
    stacked = stacked_probe([matrix_probe(a), matrix_probe(b)])
    dense = np.vstack([a, b])
    assert stacked.output_dim == 8 and stacked.input_dim == 6
    for seed in range(5):
        v = np.random.default_rng(seed).normal(size=6)
        u = np.random.default_rng(seed + 100).normal(size=8)
        np.testing.assert_allclose(stacked.apply(v), dense @ v, atol=1e-12)
        np.testing.assert_allclose(
            stacked.apply_transpose(u), dense.T @ u, atol=1e-12
        )


def test_stacked_probe_rejects_mixed_inputs():
    with pytest.raises(DimensionMismatch):
        stacked_probe([matrix_probe(np.eye(2)), matrix_probe(np.eye(3))])
    with pytest.raises(DimensionMismatch):
        stacked_probe([])


def test_stacked_layer_jacobians_dense_equivalence():
    """Materialize the stacked Jacobian on a small 8x8 model and cross-check
    power_method against the dense SVD."""
    model = GaborBankClassifier(seed=3, width=8, height=8)
    images = make_synthetic_images(2, 8, 8, seed=9)
    probes = [layer_jacobian(model, x, "post_pool") for x in images]
    stacked = stacked_probe(probes)
    dense = np.zeros((stacked.output_dim, stacked.input_dim))
    for k in range(stacked.input_dim):
        e = np.zeros(stacked.input_dim)
        e[k] = 1.0
        dense[:, k] = stacked.apply(e)
    svals = np.linalg.svd(dense, compute_uv=False)
    cfg = SingularConfig(epsilon=1.0, tol=1e-11, max_iter=20000, seed=5)
    result = power_method(stacked, cfg)
    assert abs(result.value - svals[0]) <= 1e-6 * max(1.0, svals[0])


# -- singular_uap ------------------------------------------------------------------


def test_singular_uap_sign_mode_budget(reference_model, small_images):
    cfg = SingularConfig(epsilon=12.0, tol=1e-8, max_iter=300, seed=6)
    field = singular_uap(reference_model, "post_pool", small_images[:3], cfg)
    peak = f32_within(12.0)
    assert field.values.dtype == np.float32
    assert field.values.shape == (32, 32, 3)
    assert set(np.unique(np.abs(field.values))) <= {np.float32(0.0), peak}
    assert float(np.abs(field.values).max()) == float(peak) <= 12.0
    assert field.epsilon == 12.0
    assert field.provenance["kind"] == "singular_vector"
    assert field.provenance["layer"] == "post_pool"
    assert field.provenance["batch"] == 3


def test_singular_uap_deterministic(reference_model, small_images):
    cfg = SingularConfig(epsilon=12.0, tol=1e-8, max_iter=200, seed=6)
    a = singular_uap(reference_model, "logits", small_images[:2], cfg)
    b = singular_uap(reference_model, "logits", small_images[:2], cfg)
    np.testing.assert_array_equal(a.values, b.values)


def test_singular_uap_epsilon_changes_magnitude_not_pattern(
    reference_model, small_images
):
    base = dict(tol=1e-8, max_iter=200, seed=6)
    a = singular_uap(
        reference_model, "post_pool", small_images[:2], SingularConfig(epsilon=6.0, **base)
    )
    b = singular_uap(
        reference_model, "post_pool", small_images[:2], SingularConfig(epsilon=12.0, **base)
    )
    np.testing.assert_array_equal(np.sign(a.values), np.sign(b.values))
    assert float(np.abs(a.values).max()) == float(f32_within(6.0))
    assert float(np.abs(b.values).max()) == float(f32_within(12.0))


def test_singular_uap_empty_batch_rejected(reference_model):
    with pytest.raises(DimensionMismatch):
        singular_uap(
            reference_model,
            "logits",
            np.zeros((0, 32, 32, 3)),
            SingularConfig(epsilon=12.0),
        )


# -- configuration ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"p": 1.0},
        {"q": 1.0},
        {"p": math.inf},
        {"q": math.nan},
        {"epsilon": 0.0},
        {"epsilon": -3.0},
        {"tol": 0.0},
        {"max_iter": 0},
    ],
)
def test_singular_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SingularConfig(**kwargs)
