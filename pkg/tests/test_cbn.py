import numpy as np
import pytest

from lvac import cbn


def specs():
    return [
        cbn.CbnSpec("linear3x3", channels=3),
        cbn.CbnSpec("mlp", channels=32, hidden=64),
        cbn.CbnSpec("pa", channels=32),
    ]


def test_param_counts_match_reference_table():
    assert cbn.param_count(cbn.CbnSpec("linear3x3", channels=3)) == 9
    assert cbn.param_count(cbn.CbnSpec("mlp", channels=32, hidden=256)) == 9987
    assert cbn.param_count(cbn.CbnSpec("mlp", channels=32, hidden=64)) == 2499
    assert cbn.param_count(cbn.CbnSpec("pa", channels=32)) == 227


def test_spec_validation():
    with pytest.raises(ValueError):
        cbn.CbnSpec("linear3x3", channels=32)
    with pytest.raises(ValueError):
        cbn.CbnSpec("conv", channels=32)


def test_linear_identity_forward():
    spec = cbn.CbnSpec("linear3x3", channels=3)
    params = cbn.init_params(spec, np.random.default_rng(0))
    assert np.allclose(params.tensors["A"], np.eye(3))
    z = np.array([[0.2, 0.4, 0.6]])
    for x in ([[0.1, 0.1, 0.1]], [[0.9, 0.2, 0.7]]):
        y = cbn.forward(params, np.array(x), z)
        assert np.allclose(y, z)


def test_mlp_zero_weights_output_relu():
    spec = cbn.CbnSpec("mlp", channels=4, hidden=8)
    params = cbn.init_params(spec, np.random.default_rng(1))
    for name in ("W_in", "W_out", "b_h"):
        params.tensors[name][...] = 0.0
    params.tensors["b3"][...] = np.array([1.0, 2.0, -1.0])
    y = cbn.forward(params, np.zeros((5, 3)), np.zeros((5, 4)))
    assert np.allclose(y, [1.0, 2.0, 0.0])


def test_pa_frequency_free_case():
    spec = cbn.CbnSpec("pa", channels=4)
    params = cbn.init_params(spec, np.random.default_rng(2))
    params.tensors["W_in"][...] = 0.0
    params.tensors["b_c"][...] = np.pi / 2  # sin == 1 everywhere
    z = np.array([[0.1, -0.2, 0.3, 0.4]])
    y = cbn.forward(params, np.array([[0.5, 0.5, 0.5]]), z)
    expected = params.tensors["b3"] + z @ params.tensors["W_out"].T
    assert np.allclose(y, expected)


def test_pa_output_bound():
    spec = cbn.CbnSpec("pa", channels=16)
    params = cbn.init_params(spec, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    x = rng.random((200, 3))
    z = rng.standard_normal((200, 16)) * 2
    y = cbn.forward(params, x, z)
    bound = np.abs(params.tensors["W_out"]).sum(axis=1) * np.abs(z).max()
    assert np.all(np.abs(y - params.tensors["b3"]) <= bound + 1e-9)


def test_linear_backward_is_transpose():
    spec = cbn.CbnSpec("linear3x3", channels=3)
    params = cbn.init_params(spec, np.random.default_rng(5))
    params.tensors["A"] = np.random.default_rng(6).standard_normal((3, 3))
    stash = []
    z = np.random.default_rng(7).standard_normal((4, 3))
    cbn.forward(params, np.zeros((4, 3)), z, stash)
    up = np.random.default_rng(8).standard_normal((4, 3))
    grads, dz = cbn.backward(params, stash, up)
    assert np.allclose(dz, up @ params.tensors["A"])
    assert np.allclose(grads["A"], up.T @ z)


def test_zero_upstream_zero_gradients():
    for spec in specs():
        params = cbn.init_params(spec, np.random.default_rng(9))
        stash = []
        n = 6
        cbn.forward(params, np.random.rand(n, 3), np.random.rand(n, spec.channels), stash)
        grads, dz = cbn.backward(params, stash, np.zeros((n, 3)))
        assert np.allclose(dz, 0)
        for g in grads.values():
            assert np.allclose(g, 0)


@pytest.mark.parametrize("family", ["linear3x3", "mlp", "pa"])
def test_backward_matches_finite_differences(family):
    # >= 100 random draws per family, every coordinate checked
    rng = np.random.default_rng(10)
    C = 3 if family == "linear3x3" else 6
    spec = cbn.CbnSpec(family, channels=C, hidden=5)
    h = 1e-5
    for draw in range(100):
        params = cbn.init_params(spec, rng)
        flat = params.pack() + 0.3 * rng.standard_normal(cbn.param_count(spec))
        params.unpack(flat)
        n = 3
        x = rng.random((n, 3))
        z = rng.standard_normal((n, C))
        up = rng.standard_normal((n, 3))
        stash = []
        cbn.forward(params, x, z, stash)
        grads, dz = cbn.backward(params, stash, up)

        def scalar(p, zz):
            return float(np.sum(cbn.forward(p, x, zz) * up))

        gflat = np.concatenate([np.asarray(grads[k]).ravel() for k in params._order()])
        base = params.pack()
        for i in range(base.size):
            pp, pm = params.copy(), params.copy()
            fp, fm = base.copy(), base.copy()
            fp[i] += h
            fm[i] -= h
            pp.unpack(fp)
            pm.unpack(fm)
            fd = (scalar(pp, z) - scalar(pm, z)) / (2 * h)
            assert abs(fd - gflat[i]) <= 1e-4 * max(abs(fd), abs(gflat[i]), 1e-3)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd = (scalar(params, zp) - scalar(params, zm)) / (2 * h)
            assert abs(fd - dz[idx]) <= 1e-4 * max(abs(fd), abs(dz[idx]), 1e-3)


def test_forward_continuous_in_x_for_mlp_pa():
    rng = np.random.default_rng(11)
    for family in ("mlp", "pa"):
        spec = cbn.CbnSpec(family, channels=8, hidden=16)
        params = cbn.init_params(spec, rng)
        z = rng.standard_normal((1, 8))
        x = rng.random((1, 3))
        eps = 1e-6
        y0 = cbn.forward(params, x, z)
        y1 = cbn.forward(params, x + eps, z)
        assert np.max(np.abs(y1 - y0)) < 1e-3


def test_param_file_roundtrip(tmp_path):
    for spec in specs():
        params = cbn.init_params(spec, np.random.default_rng(12))
        path = tmp_path / f"{spec.family}.cbn"
        cbn.save_params(params, path)
        back = cbn.load_params(path)
        assert back.spec == spec
        assert np.allclose(back.pack(), params.pack().astype(np.float32), atol=1e-7)
    # corrupting any byte trips the CRC
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.cbn"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        cbn.load_params(bad)
