import numpy as np
import pytest

from lvac import cbn, codec, pcio, partition, raht, trainer
from conftest import random_cloud


def small_setup(spec=None, lam=2e-3, seed=3, freeze_norm=False, steps=1):
    cloud = random_cloud(0, depth=4, n=80)
    tree = partition.build_tree(cloud, 6)
    if spec is None:
        spec = cbn.CbnSpec("mlp", channels=8, hidden=16)
    config = trainer.TrainConfig(
        spec=spec, target_level=6, lam=lam, steps=steps, seed=seed,
        freeze_normalization=freeze_norm,
    )
    return cloud, tree, config


# ---------------------------------------------------------------------------
# independent straight-line reimplementation (no tape, dense synthesis)
# ---------------------------------------------------------------------------

def _chain_cdf_logits(model, level, c, x):
    """Reimplements the monotone chain directly from the raw parameters."""
    mats, biases, mods = model._slabs(level, model.theta)
    h = np.asarray(x, dtype=np.float64).reshape(1, -1)
    for k in range(len(mats)):
        H = np.log1p(np.exp(mats[k][c]))  # softplus
        lin = H @ h + biases[k][c][:, None]
        if mods[k] is not None:
            lin = lin + np.tanh(mods[k][c])[:, None] * np.tanh(lin)
        h = lin
    return h[0]


def straight_line_loss(state, cloud, tree, config, W):
    s = np.ones(tree.num_coefficients) if config.freeze_normalization else raht.scale_factors(tree)
    delta = np.exp(state.log_delta)
    V = state.V
    U = V[1:] / (s[1:, None] * delta[None, :])
    Ut = U + W
    levels = tree.delta_levels()
    R = 0.0
    for m in range(Ut.shape[0]):
        for c in range(Ut.shape[1]):
            logit_up = _chain_cdf_logits(state.ent, int(levels[m]), c, [Ut[m, c] + 0.5])[0]
            logit_dn = _chain_cdf_logits(state.ent, int(levels[m]), c, [Ut[m, c] - 0.5])[0]
            p = 1 / (1 + np.exp(-logit_up)) - 1 / (1 + np.exp(-logit_dn))
            R -= np.log2(p)
    vhat = np.vstack([V[0:1], Ut * (s[1:, None] * delta[None, :])])
    _, Ts = raht.dense_transforms(tree)
    Z = Ts @ vhat
    x_local = tree.local_coords(cloud.positions)
    zp = Z[tree.point_block()]
    t = state.cbn.tensors
    if config.spec.family == "linear3x3":
        yhat = zp @ t["A"].T
    elif config.spec.family == "mlp":
        X = np.concatenate([x_local, zp], axis=1)
        yhat = np.maximum(np.maximum(X @ t["W_in"].T + t["b_h"], 0) @ t["W_out"].T + t["b3"], 0)
    else:
        g = np.sin(x_local @ t["W_in"].T + t["b_c"])
        yhat = t["b3"] + (zp * g) @ t["W_out"].T
    D = float(np.sum((yhat - cloud.attributes) ** 2))
    return D + config.lam * R, D, R


@pytest.mark.parametrize("family", ["linear3x3", "mlp", "pa"])
def test_loss_matches_straight_line_reimplementation(family):
    C = 3 if family == "linear3x3" else 6
    spec = cbn.CbnSpec(family, channels=C, hidden=10)
    cloud, tree, config = small_setup(spec=spec)
    state = trainer.init_state(cloud, tree, config)
    rng = np.random.default_rng(5)
    state.V = state.V + 0.2 * rng.standard_normal(state.V.shape)
    state.log_delta = 0.2 * rng.standard_normal(C)
    pipe = trainer.Pipeline(cloud, tree, config)
    W = pipe.draw_noise(trainer.step_rng(config.seed, 1))
    J, D, R, _ = pipe.forward(state, W)
    J2, D2, R2 = straight_line_loss(state, cloud, tree, config, W)
    assert abs(J - J2) <= 1e-10 * max(1.0, abs(J2))
    assert abs(D - D2) <= 1e-10 * max(1.0, abs(D2))
    assert abs(R - R2) <= 1e-10 * max(1.0, abs(R2))


def test_gradients_match_finite_differences_every_coordinate():
    # <= 8 blocks, <= 64 points, every learnable coordinate
    cloud = random_cloud(1, depth=4, n=40)
    tree = partition.build_tree(cloud, 3)
    assert tree.num_blocks <= 8
    spec = cbn.CbnSpec("mlp", channels=4, hidden=6)
    config = trainer.TrainConfig(spec=spec, target_level=3, lam=3e-3, steps=1, seed=2)
    state = trainer.init_state(cloud, tree, config)
    rng = np.random.default_rng(6)
    state.V = state.V + 0.2 * rng.standard_normal(state.V.shape)
    pipe = trainer.Pipeline(cloud, tree, config)
    W = pipe.draw_noise(trainer.step_rng(config.seed, 1))
    _, _, _, stash = pipe.forward(state, W)
    grads = pipe.backward(state, stash)

    def loss_at(name, flat):
        saved = {"V": state.V, "log_delta": state.log_delta,
                 "ent": state.ent.theta, "cbn": state.cbn.pack()}
        if name == "V":
            state.V = flat.reshape(state.V.shape)
        elif name == "log_delta":
            state.log_delta = flat
        elif name == "ent":
            state.ent.theta = flat
        else:
            state.cbn.unpack(flat)
        J = pipe.forward(state, W, want_stash=False)[0]
        state.V = saved["V"]
        state.log_delta = saved["log_delta"]
        state.ent.theta = saved["ent"]
        state.cbn.unpack(saved["cbn"])
        return J

    h = 1e-4
    for name in ("V", "log_delta", "ent", "cbn"):
        base = {"V": state.V.ravel(), "log_delta": state.log_delta,
                "ent": state.ent.theta, "cbn": state.cbn.pack()}[name].copy()
        ga = grads[name].ravel()
        for i in range(base.size):
            fp, fm = base.copy(), base.copy()
            fp[i] += h
            fm[i] -= h
            fd = (loss_at(name, fp) - loss_at(name, fm)) / (2 * h)
            assert abs(fd - ga[i]) <= 1e-4 * max(abs(fd), abs(ga[i]), 1e-3), (name, i)


def test_freeze_cbn_zeroes_cbn_gradient():
    spec = cbn.CbnSpec("mlp", channels=4, hidden=6)
    cloud, tree, config = small_setup(spec=spec)
    pretrained = cbn.init_params(spec, np.random.default_rng(0))
    config = trainer.TrainConfig(
        spec=spec, target_level=6, lam=config.lam, steps=1, seed=1, freeze_cbn=True
    )
    state = trainer.init_state(cloud, tree, config, pretrained_cbn=pretrained)
    g = trainer.gradients(state, cloud, tree, config, trainer.step_rng(1, 1))
    assert np.allclose(g["cbn"], 0.0)
    assert not np.allclose(g["V"], 0.0)


def test_lambda_zero_excludes_rate_gradient():
    cloud, tree, config = small_setup(lam=0.0)
    state = trainer.init_state(cloud, tree, config)
    g = trainer.gradients(state, cloud, tree, config, trainer.step_rng(3, 1))
    assert np.allclose(g["ent"], 0.0)
    J, D, R = trainer.loss(state, cloud, tree, config, trainer.step_rng(3, 1))
    assert J == D and R > 0.0


def test_init_state_dc_is_global_mean_color():
    cloud, tree, config = small_setup()
    state = trainer.init_state(cloud, tree, config)
    assert np.allclose(state.V[0, :3], cloud.attributes.mean(axis=0), atol=1e-12)
    assert np.allclose(state.log_delta, 0.0)


def test_init_linear_identity_matches_blockwise_constant_distortion():
    spec = cbn.CbnSpec("linear3x3", channels=3)
    cloud, tree, config = small_setup(spec=spec)
    state = trainer.init_state(cloud, tree, config)
    pipe = trainer.Pipeline(cloud, tree, config)
    W = np.zeros(pipe.noise_shape)
    _, D, _, _ = pipe.forward(state, W)
    starts, ends = tree.block_ranges()
    sums = np.add.reduceat(cloud.attributes, starts, axis=0)
    means = sums / (ends - starts)[:, None]
    D_ref = float(np.sum((cloud.attributes - means[tree.point_block()]) ** 2))
    assert abs(D - D_ref) <= 1e-9 * max(1.0, D_ref)


def test_init_is_deterministic():
    cloud, tree, config = small_setup()
    a = trainer.init_state(cloud, tree, config)
    b = trainer.init_state(cloud, tree, config)
    assert np.array_equal(a.V, b.V)
    assert np.array_equal(a.ent.theta, b.ent.theta)
    assert np.array_equal(a.cbn.pack(), b.cbn.pack())


def test_train_deterministic_bitwise():
    cloud, tree, config = small_setup(steps=25)
    s1 = trainer.train(cloud, tree, config)
    s2 = trainer.train(cloud, tree, config)
    assert np.array_equal(s1.V, s2.V)
    assert np.array_equal(s1.log_delta, s2.log_delta)
    assert np.array_equal(s1.ent.theta, s2.ent.theta)
    assert np.array_equal(s1.cbn.pack(), s2.cbn.pack())


def test_single_block_linear_reaches_least_squares():
    cloud = random_cloud(4, depth=4, n=50)
    tree = partition.build_tree(cloud, 0)
    assert tree.num_blocks == 1
    spec = cbn.CbnSpec("linear3x3", channels=3)
    config = trainer.TrainConfig(spec=spec, target_level=0, lam=0.0, steps=500, seed=5)
    state = trainer.init_state(cloud, tree, config)
    state.V = state.V + 0.3  # knock the init off the optimum
    pipe = trainer.Pipeline(cloud, tree, config)
    frozen = set()
    for step in range(1, config.steps + 1):
        W = pipe.draw_noise(trainer.step_rng(config.seed, step))
        _, _, _, stash = pipe.forward(state, W)
        grads = pipe.backward(state, stash)
        for name in ("V", "log_delta", "ent", "cbn"):
            g = grads[name].ravel()
            m = state.adam_m[name]
            v = state.adam_v[name]
            m += 0.1 * (g - m)
            v += 0.001 * (g * g - v)
            flat = trainer._get_flat(state, name) - 0.01 * (
                m / (1 - 0.9**step)
            ) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
            trainer._set_flat(state, name, flat)
    _, D, _, _ = pipe.forward(state, np.zeros(pipe.noise_shape))
    ybar = cloud.attributes.mean(axis=0)
    D_opt = float(np.sum((cloud.attributes - ybar) ** 2))
    assert D <= 1.01 * D_opt


def test_train_loss_decreases_smoothed():
    cloud = pcio.synthesize_cloud("sphere-shell", 5, 2)
    tree = partition.build_tree(cloud, 15)
    spec = cbn.CbnSpec("mlp", channels=8, hidden=16)
    config = trainer.TrainConfig(spec=spec, target_level=15, lam=1e-3, steps=400, seed=7)
    js = []
    trainer.train(cloud, tree, config, callback=lambda s, J, D, R: js.append(J))
    windows = [np.mean(js[i : i + 100]) for i in range(0, 400, 100)]
    for a, b in zip(windows, windows[1:]):
        assert b <= a * 1.02
    assert windows[-1] < windows[0]


def test_rd_sweep_monotone_rate_in_lambda():
    cloud = random_cloud(6, depth=4, n=200)
    tree = partition.build_tree(cloud, 12)
    spec = cbn.CbnSpec("mlp", channels=8, hidden=16)
    rates = []
    for lam in (1e-3, 1e-2, 1e-1):
        config = trainer.TrainConfig(spec=spec, target_level=12, lam=lam, steps=250, seed=8)
        state = trainer.train(cloud, tree, config)
        pipe = trainer.Pipeline(cloud, tree, config)
        _, _, R, _ = pipe.forward(state, np.zeros(pipe.noise_shape))
        rates.append(R)
    assert rates[0] >= rates[1] >= rates[2]


def test_checkpoint_roundtrip(tmp_path):
    cloud, tree, config = small_setup(steps=10)
    state = trainer.train(cloud, tree, config)
    path = tmp_path / "state.ckpt"
    trainer.save_checkpoint(state, path)
    back = trainer.load_checkpoint(path)
    assert back.config == state.config
    assert np.array_equal(back.V, state.V)
    assert np.array_equal(back.log_delta, state.log_delta)
    assert np.array_equal(back.ent.theta, state.ent.theta)
    assert np.allclose(back.cbn.pack(), state.cbn.pack().astype(np.float32))
    # the embedded CBN casts to float32 either way, so streams match exactly
    s1 = codec.encode(cloud, tree, state)
    s2 = codec.encode(cloud, tree, back)
    assert s1.to_bytes() == s2.to_bytes()


def test_freeze_cbn_requires_params():
    cloud, tree, _ = small_setup()
    spec = cbn.CbnSpec("mlp", channels=8, hidden=16)
    config = trainer.TrainConfig(spec=spec, target_level=6, steps=1, freeze_cbn=True)
    with pytest.raises(ValueError):
        trainer.init_state(cloud, tree, config)
