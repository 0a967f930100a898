import numpy as np
import pytest

from dsac.predictor import (ConvNet, ConvNetConfig, DirectGrid, HeadConfig, ModelFormatError,
                            apply_heads, conv2d, heads_backward, load_params, make_predictor,
                            parameter_count, pool2x2, predictor_from_architecture, probe_loss,
                            save_params, softplus, upsample_matrix)
from dsac.ssvm import MapGradients

from conftest import backprop_check


def random_grads(rng, U, V, alpha_local=False):
    return MapGradients(rng.normal(size=(V, U)),
                        rng.normal(size=(V, U)) if alpha_local else float(rng.normal()),
                        rng.normal(size=(V, U)), rng.normal(size=(V, U)))


def small_net(U=16, V=16, **kw):
    return ConvNet(ConvNetConfig(U=U, V=V, channels=(4, 6, 8), hidden=8, **kw))


def test_heads_defaults():
    raw = np.zeros((4, 8, 8))
    maps = apply_heads(raw, HeadConfig())
    assert maps.alpha == pytest.approx(np.log(2))
    np.testing.assert_allclose(maps.beta, np.log(2))
    assert not maps.D.any() and not maps.kappa.any()
    assert not apply_heads(raw + 1, HeadConfig(no_kappa=True)).kappa.any()


def test_scalar_heads_are_means(rng):
    raw = rng.normal(size=(4, 8, 8))
    maps = apply_heads(raw, HeadConfig(beta_local=False, kappa_local=False))
    np.testing.assert_allclose(maps.kappa, raw[3].mean())
    np.testing.assert_allclose(maps.beta, softplus(raw[2]).mean())
    assert maps.alpha == pytest.approx(softplus(raw[1]).mean())


@pytest.mark.parametrize("heads", [HeadConfig(), HeadConfig(alpha_local=True),
                                   HeadConfig(beta_local=False, kappa_local=False),
                                   HeadConfig(no_kappa=True)])
def test_heads_backward_matches_finite_differences(rng, heads):
    raw = rng.normal(size=(4, 6, 5))
    g = random_grads(rng, 5, 6, heads.alpha_local)
    analytic = heads_backward(raw, g, heads)
    eps = 1e-6
    for _ in range(30):
        idx = tuple(rng.integers(0, n) for n in raw.shape)
        hi, lo = raw.copy(), raw.copy()
        hi[idx] += eps
        lo[idx] -= eps
        fd = (probe_loss(apply_heads(hi, heads), g) - probe_loss(apply_heads(lo, heads), g)) / (2 * eps)
        assert fd == pytest.approx(analytic[idx], rel=1e-6, abs=1e-9)


def test_conv2d_against_direct_loop(rng):
    x = rng.normal(size=(2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out, _ = conv2d(x, w, b)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_pooling():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_allclose(pool2x2(x, "avg")[0], [[[2.5, 4.5], [10.5, 12.5]]])
    np.testing.assert_allclose(pool2x2(x, "max")[0], [[[5, 7], [13, 15]]])


def test_upsample_rows_sum_to_one():
    R = upsample_matrix(16, 4)
    np.testing.assert_allclose(R.sum(axis=1), 1.0)
    np.testing.assert_allclose(R @ np.full(4, 3.0), 3.0)


def test_convnet_output_shapes(rng):
    net = small_net()
    params = net.init_params(1)
    maps = net.forward(params, rng.uniform(size=(16, 16, 3)))
    assert maps.shape == (16, 16) and np.isscalar(maps.alpha)
    assert params["mlp.w1"].dtype == np.float32
    assert parameter_count(params) == sum(v.size for v in params.values())
    with pytest.raises(ValueError):
        net.forward(params, rng.uniform(size=(8, 8, 3)))


def test_convnet_config_validation():
    with pytest.raises(ValueError):
        ConvNetConfig(U=20, V=16)
    with pytest.raises(ValueError):
        ConvNetConfig(U=16, V=16, pool="median")
    with pytest.raises(ValueError):
        ConvNetConfig(kernels=(3,), channels=(4, 4))


@pytest.mark.parametrize("kw", [{}, {"pool": "max"}, {"include_input": False},
                                {"heads": HeadConfig(alpha_local=True)}])
def test_convnet_backprop(rng, kw):
    net = small_net(**kw)
    params = net.init_params(2, dtype=np.float64)
    patch = rng.uniform(size=(16, 16, 3))
    g = random_grads(rng, 16, 16, net.heads.alpha_local)
    errs, _ = backprop_check(net, params, patch, g, 40, rng)
    assert errs.max() < 1e-4


def test_direct_grid_backward_is_heads_backward(rng):
    net = DirectGrid(8, 8)
    params = {"raw": rng.normal(size=(4, 8, 8))}
    g = random_grads(rng, 8, 8)
    np.testing.assert_array_equal(net.backward(params, None, g)["raw"],
                                  heads_backward(params["raw"], g, net.heads))


def test_make_predictor():
    assert isinstance(make_predictor("direct", 8, 8), DirectGrid)
    assert isinstance(make_predictor("convnet", 16, 16, channels=(4, 4, 4)), ConvNet)
    with pytest.raises(ValueError):
        make_predictor("resnet", 8, 8)


# -- model file ----------------------------------------------------------------

@pytest.mark.parametrize("dtype", ["<f4", "<f8"])
def test_model_roundtrip(tmp_path, rng, dtype):
    net = small_net()
    params = net.init_params(3, dtype=np.float32 if dtype == "<f4" else np.float64)
    path = tmp_path / "model.bin"
    save_params(path, params, net.architecture(), seed=3, dtype=dtype, extra={"note": 1})
    back, header = load_params(path, net.architecture())
    assert header["seed"] == 3 and header["extra"] == {"note": 1}
    for k in params:
        assert np.array_equal(back[k], params[k])
    net2 = predictor_from_architecture(header["architecture"])
    patch = rng.uniform(size=(16, 16, 3))
    np.testing.assert_array_equal(net2.forward(back, patch).D, net.forward(params, patch).D)
    assert not (tmp_path / "model.bin.tmp").exists()


def test_model_rejects_wrong_architecture(tmp_path):
    net = small_net()
    path = tmp_path / "model.bin"
    save_params(path, net.init_params(), net.architecture())
    with pytest.raises(ModelFormatError, match="U=16"):
        load_params(path, small_net(U=32, V=32).architecture())


def test_model_rejects_corruption(tmp_path):
    net = small_net()
    path = tmp_path / "model.bin"
    save_params(path, net.init_params(), net.architecture())
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelFormatError, match="checksum"):
        load_params(path)
    path.write_bytes(b"PK\x03\x04" + bytes(blob[4:]))
    with pytest.raises(ModelFormatError, match="not a model"):
        load_params(path)
