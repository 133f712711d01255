"""Architecture assembly, accounting, whole-net gradients, serialization."""
from __future__ import annotations

import numpy as np
import pytest

from histoseg.data import ChannelStats
from histoseg.errors import (BadMagicError, BadVersionError, ChecksumError,
                             ContractError, ModelFormatError, NumericalError,
                             TruncatedModelError)
from histoseg.layers import grad_check
from histoseg.losses import softmax_ce_gradient, softmax_cross_entropy
from histoseg.network import (ArchManifest, LayerSpec, backward,
                              build_network, count_macs, count_parameters,
                              default_manifest, forward, infer_logits,
                              load_model, manifest_with_extra_layers,
                              receptive_radius, save_model)

HE_STD_LAYER1 = 0.27216552697590868   # sqrt(2 / 27)
HE_STD_TRUNK = 0.05892556509887896    # sqrt(2 / 576)
TRUNC_FACTOR = 0.87962566103423975    # std of a unit normal clipped at +/-2


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_default_manifest_is_the_eleven_layer_stack():
    m = default_manifest()
    assert len(m.layers) == 11
    assert m.class_count == 3
    first = m.layers[0]
    assert (first.kh, first.kw, first.c_in, first.c_out,
            first.padding) == (3, 3, 3, 64, 1)
    for spec in m.layers[1:9]:
        assert (spec.kh, spec.kw, spec.c_in, spec.c_out,
                spec.padding) == (3, 3, 64, 64, 1)
    ten, eleven = m.layers[9], m.layers[10]
    assert (ten.kh, ten.kw, ten.c_in, ten.c_out, ten.padding) == (1, 1, 64, 3, 0)
    assert (eleven.kh, eleven.kw, eleven.c_in, eleven.c_out,
            eleven.padding) == (1, 1, 3, 3, 0)


def test_manifest_rejects_broken_channel_chain():
    layers = (LayerSpec(3, 3, 3, 64, 1), LayerSpec(3, 3, 32, 64, 1),
              LayerSpec(1, 1, 64, 3, 0))
    with pytest.raises(ContractError, match="chain"):
        ArchManifest(layers=layers, class_count=3)


def test_manifest_rejects_final_width_not_matching_classes():
    layers = (LayerSpec(3, 3, 3, 64, 1), LayerSpec(1, 1, 64, 4, 0))
    with pytest.raises(ContractError):
        ArchManifest(layers=layers, class_count=3)


def test_receptive_radius_default():
    assert receptive_radius(default_manifest()) == 9  # nine 3x3 layers


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def test_parameter_counts_default_manifest():
    counts = count_parameters(default_manifest())
    assert counts.conv_weights == 296_841
    assert counts.bn_params == 1_164
    assert counts.total == 298_005


def test_parameter_counts_within_published_band():
    assert 296_841 <= count_parameters(default_manifest()).total <= 300_000


def test_extra_trunk_layer_adds_exactly_36864_conv_weights():
    base = count_parameters(default_manifest())
    plus = count_parameters(manifest_with_extra_layers(default_manifest(), 1))
    assert plus.conv_weights - base.conv_weights == 36_864
    assert plus.bn_params - base.bn_params == 128


def test_empty_manifest_counts_are_zero():
    counts = count_parameters(ArchManifest(layers=(), class_count=3))
    assert (counts.conv_weights, counts.bn_params, counts.total) == (0, 0, 0)


def test_mac_count_full_resolution():
    assert count_macs(default_manifest(), 2064, 1536) == 941_076_209_664


def test_mac_count_single_pixel_and_linearity():
    m = default_manifest()
    assert count_macs(m, 1, 1) == 296_841
    assert count_macs(m, 32, 20) == 296_841 * 32 * 20
    assert count_macs(m, 64, 40) == 4 * count_macs(m, 32, 20)


def test_counts_accept_network_instances():
    net = build_network(default_manifest(), seed=0)
    assert count_parameters(net).total == 298_005
    assert count_macs(net, 1, 1) == 296_841


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_he_init_empirical_std_within_five_percent():
    net = build_network(default_manifest(), seed=3)
    std1 = float(net.kernels[0].weights.std())
    std5 = float(net.kernels[4].weights.std())  # a 3x3, 64->64 trunk layer
    assert abs(std1 - HE_STD_LAYER1) / HE_STD_LAYER1 < 0.05
    assert abs(std5 - HE_STD_TRUNK) / HE_STD_TRUNK < 0.05


def test_he_init_samples_are_truncated():
    net = build_network(default_manifest(), seed=4)
    for spec, kern in zip(net.manifest.layers, net.kernels):
        n = spec.kh * spec.kw * spec.c_in
        bound = 2.0 * np.sqrt(2.0 / n) / TRUNC_FACTOR
        assert float(np.abs(kern.weights).max()) <= bound * (1 + 1e-6)


def test_init_bn_parameters_are_identity():
    net = build_network(default_manifest(), seed=5)
    for bn in net.bn:
        assert (bn.gamma == 1.0).all() and (bn.beta == 0.0).all()
        assert (bn.running_mean == 0.0).all() and (bn.running_var == 1.0).all()


def test_build_network_deterministic_per_seed():
    a = build_network(default_manifest(), seed=7)
    b = build_network(default_manifest(), seed=7)
    c = build_network(default_manifest(), seed=8)
    for ka, kb in zip(a.kernels, b.kernels):
        np.testing.assert_array_equal(ka.weights, kb.weights)
    assert any(not np.array_equal(ka.weights, kc.weights)
               for ka, kc in zip(a.kernels, c.kernels))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_preserves_spatial_shape_on_patch_batch():
    net = build_network(default_manifest(), seed=0)
    x = np.random.default_rng(0).standard_normal((4, 48, 48, 3)) \
        .astype(np.float32)
    logits, cache = forward(net, x, "train")
    assert logits.shape == (4, 48, 48, 3)
    assert cache is not None and len(cache.layers) == 11
    logits, cache = forward(net, x, "infer")
    assert logits.shape == (4, 48, 48, 3)
    assert cache is None


def test_zero_weight_network_emits_last_layer_beta():
    net = build_network(default_manifest(), seed=0)
    for kern in net.kernels:
        kern.weights[:] = 0.0
    net.bn[-1].beta[:] = np.array([0.37, -0.25, 0.11], dtype=np.float32)
    x = np.random.default_rng(1).standard_normal((2, 8, 8, 3)) \
        .astype(np.float32)
    logits, _ = forward(net, x, "train")
    np.testing.assert_allclose(
        logits, np.broadcast_to(net.bn[-1].beta, logits.shape), atol=1e-6)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_forward_reports_layer_of_divergence():
    net = build_network(default_manifest(), seed=0)
    net.kernels[2].weights[:] = np.inf
    x = np.ones((1, 8, 8, 3), dtype=np.float32)
    with pytest.raises(NumericalError, match="layer 3"):
        forward(net, x, "train")


def test_forward_infer_is_independent_of_batch_composition():
    net = build_network(default_manifest(), seed=0)
    rng = np.random.default_rng(2)
    x1 = rng.standard_normal((1, 32, 32, 3)).astype(np.float32)
    x2 = rng.standard_normal((1, 32, 32, 3)).astype(np.float32)
    solo, _ = forward(net, x1, "infer")
    pair, _ = forward(net, np.concatenate([x1, x2]), "infer")
    np.testing.assert_array_equal(solo[0], pair[0])


def test_forward_channel_mismatch():
    net = build_network(default_manifest(), seed=0)
    with pytest.raises(ContractError):
        forward(net, np.zeros((1, 8, 8, 4), dtype=np.float32), "infer")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_zero_grad_logits_gives_zero_gradients():
    net = build_network(default_manifest(), seed=0)
    x = np.random.default_rng(3).standard_normal((2, 8, 8, 3)) \
        .astype(np.float32)
    logits, cache = forward(net, x, "train")
    grads = backward(net, cache, np.zeros_like(logits))
    assert len(grads) == 33  # 11 layers x (weights, gamma, beta)
    for g in grads:
        assert not g.any()


def test_backward_is_deterministic():
    net = build_network(default_manifest(), seed=0)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
    g = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
    _, cache1 = forward(net, x, "train")
    grads1 = backward(net, cache1, g)
    _, cache2 = forward(net, x, "train")
    grads2 = backward(net, cache2, g)
    for a, b in zip(grads1, grads2):
        np.testing.assert_array_equal(a, b)


def test_whole_network_gradient_matches_finite_differences():
    net = build_network(default_manifest(), seed=9).cast(np.float64)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 6, 6, 3))
    labels = rng.integers(0, 3, size=(1, 6, 6))

    def loss():
        logits, _ = forward(net, x, "train")
        return softmax_cross_entropy(logits, labels)

    logits, cache = forward(net, x, "train")
    grads = backward(net, cache, softmax_ce_gradient(logits, labels))
    # The rectifier stack is only piecewise smooth: perturbing an early
    # weight can flip a downstream activation, making finite differences
    # meaningless at that coordinate, so those are filtered out. The step
    # is kept small so that flips are rare within the probe window.
    report = grad_check(loss, net.parameters(), grads, step=1e-6,
                        tolerance=1e-3, sample=12,
                        rng=np.random.default_rng(0), skip_kinks=True)
    assert report.passed, (report.max_relative_error,
                           report.per_array_errors)
    total = report.checked_count + report.skipped_count
    assert report.checked_count >= 0.8 * total, (report.checked_count, total)


def test_backward_requires_train_cache():
    net = build_network(default_manifest(), seed=0)
    x = np.zeros((1, 8, 8, 3), dtype=np.float32)
    logits, cache = forward(net, x, "infer")
    with pytest.raises(ContractError):
        backward(net, cache, np.zeros_like(logits))


# ---------------------------------------------------------------------------
# striped full-image inference
# ---------------------------------------------------------------------------

def test_striped_inference_equals_direct_in_float64(small_pairs):
    from histoseg.data import compute_channel_stats, standardize
    img, _ = small_pairs[0]
    stats = compute_channel_stats([img])
    x = standardize(img, stats).astype(np.float64)
    net = build_network(default_manifest(), seed=0).cast(np.float64)
    direct = infer_logits(net, x, stripe_rows=x.shape[0])
    for rows in (7, 17, 48, 95):
        striped = infer_logits(net, x, stripe_rows=rows)
        np.testing.assert_allclose(striped, direct, rtol=0, atol=1e-12)


def test_striped_inference_close_in_float32(small_pairs):
    from histoseg.data import compute_channel_stats, standardize
    img, _ = small_pairs[0]
    stats = compute_channel_stats([img])
    x = standardize(img, stats)
    net = build_network(default_manifest(), seed=0)
    direct = infer_logits(net, x, stripe_rows=x.shape[0])
    striped = infer_logits(net, x, stripe_rows=23)
    np.testing.assert_allclose(striped, direct, atol=1e-4)
    np.testing.assert_array_equal(striped.argmax(axis=2),
                                  direct.argmax(axis=2))


def test_full_resolution_inference_shape():
    # Full-slide single image: bounded memory via striping, ~45 s.
    net = build_network(default_manifest(), seed=0)
    img = np.random.default_rng(6).standard_normal((2064, 1536, 3)) \
        .astype(np.float32)
    logits = infer_logits(net, img)
    assert logits.shape == (2064, 1536, 3)
    assert np.isfinite(logits).all()


def test_infer_logits_validates_input():
    net = build_network(default_manifest(), seed=0)
    with pytest.raises(ContractError):
        infer_logits(net, np.zeros((32, 32, 4), dtype=np.float32))
    with pytest.raises(ContractError):
        infer_logits(net, np.zeros((32, 32, 3), dtype=np.float32),
                     stripe_rows=0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _assert_networks_equal(a, b):
    assert a.manifest == b.manifest
    for ka, kb, ba, bb in zip(a.kernels, b.kernels, a.bn, b.bn):
        np.testing.assert_array_equal(ka.weights, kb.weights)
        np.testing.assert_array_equal(ba.gamma, bb.gamma)
        np.testing.assert_array_equal(ba.beta, bb.beta)
        np.testing.assert_array_equal(ba.running_mean, bb.running_mean)
        np.testing.assert_array_equal(ba.running_var, bb.running_var)


def test_save_load_roundtrip_bit_exact(tmp_path):
    net = build_network(default_manifest(), seed=11)
    net.bn[0].running_mean[:] = 0.25  # make running stats non-trivial
    path = tmp_path / "model.hsg"
    save_model(net, path)
    loaded, stats = load_model(path)
    assert stats is None
    _assert_networks_equal(net, loaded)


def test_save_load_roundtrip_with_channel_stats(tmp_path):
    net = build_network(default_manifest(), seed=12)
    stats = ChannelStats(mean=np.array([180.0, 120.5, 133.25]),
                         std=np.array([40.0, 30.5, 28.125]))
    path = tmp_path / "model.hsg"
    save_model(net, path, channel_stats=stats)
    loaded, got = load_model(path)
    _assert_networks_equal(net, loaded)
    np.testing.assert_array_equal(got.mean, stats.mean.astype(np.float32))
    np.testing.assert_array_equal(got.std, stats.std.astype(np.float32))


def test_model_file_size_matches_accounting(tmp_path):
    net = build_network(default_manifest(), seed=0)
    path = tmp_path / "model.hsg"
    save_model(net, path)
    header = 4 + 4 + 4 + 11 * 5 * 4      # magic, version, count, layer rows
    floats = 296_841 + 4 * 582           # weights + gamma/beta/mean/var
    expected = header + floats * 4 + 4   # + trailing crc32
    assert path.stat().st_size == expected
    assert 1_100_000 < expected < 1_300_000  # the ~1.2 MB figure


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "model.hsg"
    save_model(build_network(default_manifest(), seed=0), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        load_model(path)


def test_load_rejects_unknown_version(tmp_path):
    import zlib

    path = tmp_path / "model.hsg"
    save_model(build_network(default_manifest(), seed=0), path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    body = bytes(blob[:-4])
    path.write_bytes(body + zlib.crc32(body).to_bytes(4, "little"))
    with pytest.raises(BadVersionError):
        load_model(path)


def test_load_rejects_corrupted_payload(tmp_path):
    path = tmp_path / "model.hsg"
    save_model(build_network(default_manifest(), seed=0), path)
    blob = bytearray(path.read_bytes())
    blob[5000] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_model(path)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "model.hsg"
    save_model(build_network(default_manifest(), seed=0), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TruncatedModelError):
        load_model(path)


def test_load_rejects_trailing_garbage(tmp_path):
    path = tmp_path / "model.hsg"
    save_model(build_network(default_manifest(), seed=0), path)
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(ModelFormatError):
        load_model(path)
