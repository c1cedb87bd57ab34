import logging
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.schemas.experiment import ExperimentConfig, NlmsConfig, NoiseConfig, NormKind, Variant
from src.services.network import RunContext, backward, forward, init_params
from src.services.nlms import (
    NoiseInjector,
    PmdLedger,
    channel_patch_norms,
    conv_constraint_residuals,
    inject_noise,
    learned_param_denominator,
    nlms_conv_update,
    nlms_direction,
    nlms_scalar_step,
    pmd_audit_scalar,
    variance_normalized_direction,
)
from src.services.trainer import build_graph
from src.utils.errors import ShapeError
from src.utils.tensor_ops import ConvGeometry, UnrolledInput, channel_moments, im2col_batch

TINY = 1e-30


def loop_nlms_direction(unrolled, E, kind, eps):
    """Literal per-index transcription of the per-channel NLMS update."""
    g = unrolled.geom
    b, _, m = unrolled.data.shape
    z = g.patch_size
    oc = E.shape[1]
    out = np.zeros((oc, g.in_channels, z))
    for o in range(oc):
        for i in range(g.in_channels):
            for zz in range(z):
                total = 0.0
                for s in range(b):
                    for mm in range(m):
                        block = unrolled.data[s, i * z:(i + 1) * z, mm]
                        norm = np.sum(block ** 2) if kind == NormKind.L2 else np.sum(np.abs(block))
                        total += E[s, o, mm] * unrolled.data[s, i * z + zz, mm] / (norm + eps)
                out[o, i, zz] = total / m
    return out.reshape(oc, g.in_channels, g.kernel_h, g.kernel_w)


def random_case(seed, ic=2, oc=3):
    rng = np.random.default_rng(seed)
    geom = ConvGeometry(ic, oc, 2, 2)
    unrolled = im2col_batch(rng.standard_normal((2, ic, 4, 4)), geom)
    E = rng.standard_normal((2, oc, unrolled.cols))
    W = rng.standard_normal((oc, ic, 2, 2))
    return unrolled, E, W


# ----- conv update -----
def test_zero_error_leaves_weights():
    unrolled, E, W = random_case(0)
    cfg = NlmsConfig(mu=0.5)
    np.testing.assert_array_equal(nlms_conv_update(W, unrolled, np.zeros_like(E), cfg), W)


def test_single_pixel_arithmetic():
    unrolled = UnrolledInput(np.array([[[3.0], [4.0]]]), ConvGeometry(1, 1, 1, 2), (1, 1))
    W = np.zeros((1, 1, 1, 2))
    new = nlms_conv_update(W, unrolled, np.array([[[-1.0]]]), NlmsConfig(norm_kind=NormKind.L2, stabilizer=TINY, mu=1.0))
    np.testing.assert_allclose(new.reshape(-1), [0.12, 0.16], rtol=1e-12)


@pytest.mark.parametrize("kind", [NormKind.L1, NormKind.L2])
def test_matches_loop_transcription(kind):
    unrolled, E, _ = random_case(1)
    cfg = NlmsConfig(norm_kind=kind, stabilizer=1e-8)
    np.testing.assert_allclose(nlms_direction(unrolled, E, cfg), loop_nlms_direction(unrolled, E, kind, 1e-8),
                               rtol=1e-12, atol=1e-14)


def test_l1_uses_absolute_sum():
    unrolled = UnrolledInput(np.array([[[3.0], [-4.0]]]), ConvGeometry(1, 1, 1, 2), (1, 1))
    assert channel_patch_norms(unrolled, NormKind.L1)[0, 0, 0] == 7.0
    assert channel_patch_norms(unrolled, NormKind.L2)[0, 0, 0] == 25.0


def test_l2_direction_scale_invariance():
    unrolled, E, _ = random_case(2)
    cfg = NlmsConfig(norm_kind=NormKind.L2, stabilizer=1e-20)
    base = nlms_direction(unrolled, E, cfg)
    scaled_data = unrolled.data.copy()
    scaled_data[:, :4] *= 5.0
    scaled = nlms_direction(UnrolledInput(scaled_data, unrolled.geom, unrolled.out_hw), E, cfg)
    np.testing.assert_allclose(scaled[:, 0], base[:, 0] / 5.0, rtol=1e-10)
    np.testing.assert_allclose(scaled[:, 1], base[:, 1], rtol=1e-10)


def test_zero_length_patch_rejected():
    unrolled = UnrolledInput(np.zeros((1, 0, 4)), ConvGeometry(1, 1, 0, 0), (2, 2))
    with pytest.raises(ShapeError):
        nlms_direction(unrolled, np.zeros((1, 1, 4)), NlmsConfig())


def test_error_shape_checked():
    unrolled, E, _ = random_case(3)
    with pytest.raises(ShapeError):
        nlms_direction(unrolled, E[:, :, :-1], NlmsConfig())


def test_stabilizer_must_be_positive():
    with pytest.raises(ValueError):
        NlmsConfig(stabilizer=0.0)


# ----- learned-parameter correction -----
def test_learned_param_denominator_values(caplog):
    assert learned_param_denominator(1.0, 0.0) == 1.0
    assert learned_param_denominator(2.0, 0.0) == 4.0
    with caplog.at_level(logging.WARNING, logger="mlns.nlms"):
        assert learned_param_denominator(0.0, 0.0) == 0.0
    assert "floor" in caplog.text


def test_unit_power_direction_equals_sgd_gradient():
    unrolled, E, _ = random_case(4)
    sgd = np.einsum("bkm,bom->ok", unrolled.data, E).reshape(3, 2, 2, 2)
    np.testing.assert_allclose(variance_normalized_direction(unrolled, E, np.ones(2)), sgd, rtol=1e-13, atol=1e-15)


def test_first_step_divides_each_channel_by_its_own_variance():
    rng = np.random.default_rng(11)
    geom = ConvGeometry(3, 2, 2, 2)
    x = rng.standard_normal((4, 3, 6, 6)) * np.array([0.4, 1.0, 3.0])[None, :, None, None]
    unrolled = im2col_batch(x, geom)
    E = rng.standard_normal((4, 2, unrolled.cols))
    z = geom.patch_size

    variances = np.array([np.var(unrolled.data[:, i * z:(i + 1) * z, :]) for i in range(3)])
    np.testing.assert_allclose(channel_moments(unrolled)[1], variances, rtol=1e-12)
    assert variances.min() < 0.5 and variances.max() > 5.0

    expected = np.zeros((2, 3, z))
    for i in range(3):
        block = unrolled.data[:, i * z:(i + 1) * z, :]
        expected[:, i] = np.einsum("bkm,bom->ok", block, E) / variances[i]
    direction = variance_normalized_direction(unrolled, E, variances)
    np.testing.assert_allclose(direction.reshape(2, 3, z), expected, rtol=1e-12, atol=1e-14)

    sgd = np.einsum("bkm,bom->ok", unrolled.data, E).reshape(direction.shape)
    assert not np.allclose(direction, sgd, rtol=1e-3)
    for i in range(3):
        np.testing.assert_allclose(direction[:, i] * variances[i], sgd[:, i], rtol=1e-12, atol=1e-13)


def test_bn_prior_update_rescales_sgd_by_learned_parameters():
    config = ExperimentConfig(variants=[Variant.BN_PRIOR], norm_eps=1e-10, dataset="synthetic")
    graph = build_graph(Variant.BN_PRIOR, config)
    params = init_params(graph, 0)
    for conv_index in graph.conv_indices():
        _, norm = graph.layer_named(f"{graph.layers[conv_index].name}_norm")
        c = norm.state.gamma.size
        norm.state.gamma[...] = np.linspace(0.5, 2.0, c)
        norm.state.beta[...] = 0.25
    rng = np.random.default_rng(5)
    x, labels = rng.standard_normal((8, 1, 32, 32)), rng.integers(0, 10, size=8)
    _, cache = forward(graph, params, x, labels, RunContext())
    record = backward(graph, params, cache, labels, RunContext())

    for conv_index in graph.conv_indices():
        conv = graph.layers[conv_index]
        _, norm = graph.layer_named(f"{conv.name}_norm")
        power = learned_param_denominator(norm.state.gamma, norm.state.beta)
        exact = variance_normalized_direction(cache.unrolled(conv_index), record.local_errors[conv_index], power)
        sgd = record.grads[f"{conv.name}.W"]
        for i in range(conv.geom.in_channels):
            np.testing.assert_allclose(exact[:, i] * power[i], sgd[:, i], rtol=1e-9, atol=1e-15)
        assert not np.allclose(exact, sgd, rtol=1e-3)


# ----- PMD -----
def test_exact_nlms_step_satisfies_constraint():
    rng = np.random.default_rng(6)
    for _ in range(100):
        W, x, d = rng.standard_normal(6), rng.standard_normal(6), float(rng.standard_normal())
        audit = pmd_audit_scalar(W, x, d, nlms_scalar_step(W, x, d), n_probes=100, rng=rng)
        assert abs(audit.residual) <= 1e-10
        assert audit.is_minimal


def test_plain_sgd_step_misses_constraint():
    W, x, d = np.zeros(2), np.array([3.0, 4.0]), 1.0
    sgd = W - (W @ x - d) * x
    assert abs(pmd_audit_scalar(W, x, d, sgd, n_probes=0).residual) > 1e-3


def test_conv_residual_zero_for_single_pixel_nlms_step():
    unrolled = UnrolledInput(np.array([[[3.0], [4.0]]]), ConvGeometry(1, 1, 1, 2), (1, 1))
    W = np.array([[[[0.5, -0.25]]]])
    y = np.einsum("ok,bkm->bom", W.reshape(1, -1), unrolled.data)
    E = np.array([[[0.7]]])
    cfg = NlmsConfig(norm_kind=NormKind.L2, stabilizer=TINY, mu=1.0)
    new = nlms_conv_update(W, unrolled, E, cfg)
    residuals = conv_constraint_residuals(new, unrolled, y, E)
    assert np.max(np.abs(residuals)) <= 1e-12


def test_ledger_summarises_residuals():
    ledger = PmdLedger()
    ledger.record("conv2", 3, np.array([3.0, -4.0]), 2.5)
    row = ledger.rows[0]
    assert row["residual_rms"] == pytest.approx(np.sqrt(12.5))
    assert (row["layer"], row["step"], row["update_norm_sq"]) == ("conv2", 3, 2.5)


# ----- noise -----
def test_zero_alpha_is_identity():
    E = np.random.default_rng(7).standard_normal((2, 3, 4))
    np.testing.assert_array_equal(inject_noise(E, NoiseConfig(alpha=0.0, seed=1)), E)


def test_zero_error_stays_zero():
    E = np.zeros((2, 3, 4))
    np.testing.assert_array_equal(inject_noise(E, NoiseConfig(alpha=5.0, seed=1)), E)


def test_noise_scaled_by_error_std():
    E = 3.0 * np.random.default_rng(8).standard_normal((10, 10, 1000))
    noisy = inject_noise(E, NoiseConfig(alpha=1.0, seed=2))
    assert abs((noisy - E).var() / E.var() - 1.0) <= 0.1


def test_noise_stream_is_deterministic():
    E = np.random.default_rng(9).standard_normal((2, 3, 4))
    first, second = NoiseInjector(NoiseConfig(alpha=1.0, seed=3)), NoiseInjector(NoiseConfig(alpha=1.0, seed=3))
    for _ in range(3):
        np.testing.assert_array_equal(first(E), second(E))


def test_empty_error_rejected():
    with pytest.raises(ShapeError):
        inject_noise(np.zeros((0,)), NoiseConfig(alpha=1.0))
