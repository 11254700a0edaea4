"""Auto-decoder rate-distortion training of latent coefficients.

The decoder-side computation is a fixed pipeline (Fig.-style, left to right):

    coefficient rows V  -> / (s * Delta)  -> + uniform noise -> * (s * Delta)
                                |                                   |
                                +--> cross-entropy rate R           |
                                             hierarchical synthesis <-+
                                             -> per-point CBN -> distortion D

and the loss is J = D + lambda * R.  Because the graph is static and small,
reverse-mode differentiation is a purpose-built tape: each stage stashes what
its hand-written adjoint needs, and ``backward`` replays them in reverse.  No
general autodiff framework is involved; every adjoint is certified against
central finite differences in the tests.

The DC row bypasses noise and rate: the codec transmits it at fixed 2^-8
precision as its own slice, which is rate-negligible and keeps the ablation
with the scale vector disabled from being dominated by a mangled global mean.

Training is full batch, Adam, deterministic under a seed (noise is redrawn
each step from a counter-derived generator).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import cbn as cbn_mod
from .entmodel import FactorizedCdf, level_groups
from .partition import PartitionTree
from .pcio import VoxelizedPointCloud
from .raht import analyze, scale_factors, synthesize_adjoint, synthesize_values

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingDivergence",
    "Pipeline",
    "init_state",
    "loss",
    "gradients",
    "train",
    "step_rng",
    "save_checkpoint",
    "load_checkpoint",
    "DEFAULT_LAMBDA_GRID",
    "PAPER_STEPS",
]

DEFAULT_LAMBDA_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
PAPER_STEPS = 25000  # full-scale preset; desk-scale default is 3000
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; carries the step and the offending values."""


@dataclass(frozen=True)
class TrainConfig:
    spec: cbn_mod.CbnSpec
    target_level: int
    lam: float = 1e-3
    steps: int = 3000
    lr: float = 0.01
    seed: int = 0
    freeze_cbn: bool = False
    freeze_normalization: bool = False
    dtype: str = "float64"  # hot-path compute dtype; parameters stay float64

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


@dataclass
class TrainState:
    config: TrainConfig
    V: np.ndarray  # (num_coefficients, C) float64
    log_delta: np.ndarray  # (C,) float64; Delta = exp(log_delta) stays positive
    ent: FactorizedCdf
    cbn: cbn_mod.CbnParams
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    def check_finite(self) -> None:
        for name, arr in (("V", self.V), ("log_delta", self.log_delta),
                          ("entropy model", self.ent.theta), ("cbn", self.cbn.pack())):
            if not np.all(np.isfinite(arr)):
                raise TrainingDivergence(f"non-finite values in {name}")


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Fresh per-step generator derived from the master seed and step index."""
    return np.random.default_rng(np.random.SeedSequence([0x5EED, seed, step]))


class Pipeline:
    """Precomputed geometry bindings plus the forward/backward tape."""

    def __init__(self, cloud: VoxelizedPointCloud, tree: PartitionTree, config: TrainConfig):
        if tree.point_count != len(cloud):
            raise ValueError("tree does not match the cloud")
        if config.target_level != tree.target_level:
            raise ValueError("config target level does not match the tree")
        self.tree = tree
        self.config = config
        dt = np.dtype(config.dtype)
        self.x_local = tree.local_coords(cloud.positions).astype(dt)
        self.y = cloud.attributes.astype(dt)
        starts, _ = tree.block_ranges()
        self.block_starts = starts
        self.point_block = tree.point_block()
        if config.freeze_normalization:
            self.s = np.ones(tree.num_coefficients)
        else:
            self.s = scale_factors(tree)
        self.delta_levels = tree.delta_levels()
        self.groups = level_groups(self.delta_levels)
        self.noise_shape = (tree.num_coefficients - 1, config.spec.channels)
        self._s_col = self.s[1:, None].astype(dt)

    def modeled_levels(self):
        return sorted({lvl for lvl, _ in self.groups})

    def draw_noise(self, rng: np.random.Generator) -> np.ndarray:
        dt = np.dtype(self.config.dtype)
        return rng.random(size=self.noise_shape, dtype=dt) - dt.type(0.5)

    def _eval_cbn(self, state: TrainState) -> cbn_mod.CbnParams:
        if np.dtype(self.config.dtype) == np.float64:
            return state.cbn
        dt = np.dtype(self.config.dtype)
        return cbn_mod.CbnParams(
            state.cbn.spec, {k: v.astype(dt) for k, v in state.cbn.tensors.items()}
        )

    def forward(self, state: TrainState, W: np.ndarray, want_stash: bool = True):
        """Returns (J, D, R, stash)."""
        dt = np.dtype(self.config.dtype)
        delta = state.delta
        scale = self._s_col * delta.astype(dt)[None, :]  # (M, C)
        Vf = state.V.astype(dt, copy=False)
        U = Vf[1:] / scale
        Ut = U + W.astype(dt, copy=False)
        R, rate_stash = state.ent.rate_forward(Ut, self.groups)
        vhat = np.empty_like(Vf)
        vhat[0] = Vf[0]
        np.multiply(Ut, scale, out=vhat[1:])
        Z = synthesize_values(self.tree, vhat)
        zp = Z[self.point_block]
        cbn_eval = self._eval_cbn(state)
        cbn_stash: list = []
        yhat = cbn_mod.forward(cbn_eval, self.x_local, zp, cbn_stash if want_stash else None)
        resid = yhat - self.y
        D = float(np.sum(resid * resid, dtype=np.float64))
        J = D + self.config.lam * float(R)
        stash = None
        if want_stash:
            stash = {
                "delta": delta, "scale": scale, "U": U, "Ut": Ut,
                "rate_stash": rate_stash, "cbn_eval": cbn_eval,
                "cbn_stash": cbn_stash, "resid": resid,
            }
        return J, float(D), float(R), stash

    def backward(self, state: TrainState, stash: dict) -> dict:
        """Adjoint sweep; returns float64 gradients keyed like the learnables."""
        lam = self.config.lam
        scale = stash["scale"]
        delta = stash["delta"]

        d_yhat = 2.0 * stash["resid"]
        cbn_grads, dzp = cbn_mod.backward(stash["cbn_eval"], stash["cbn_stash"], d_yhat)
        # per-point latent gradients collapse to per-block sums; points are
        # Morton-sorted so each block is one contiguous segment
        dZ = np.add.reduceat(dzp, self.block_starts, axis=0)
        dcoeff = synthesize_adjoint(self.tree, dZ)

        d_vhat = dcoeff[1:]
        d_Ut = d_vhat * scale
        if lam != 0.0:
            pieces, d_ent = state.ent.rate_backward(stash["rate_stash"], upstream=lam)
            for piece in pieces:
                if piece is not None:
                    rows, dU_rate = piece
                    d_Ut[rows] += dU_rate
        else:
            d_ent = np.zeros_like(state.ent.theta)

        dV = np.empty((state.V.shape[0], state.V.shape[1]))
        dV[0] = dcoeff[0]
        dV[1:] = d_Ut / scale
        # Delta feeds both the division into U and the multiply back out
        d_delta = (
            np.sum(d_vhat * stash["Ut"] * self._s_col, axis=0, dtype=np.float64)
            - np.sum(d_Ut * stash["U"], axis=0, dtype=np.float64) / delta
        )
        d_log_delta = d_delta * delta

        if self.config.freeze_cbn:
            d_cbn = np.zeros(cbn_mod.param_count(state.cbn.spec))
        else:
            d_cbn = np.concatenate(
                [np.asarray(cbn_grads[n], dtype=np.float64).ravel() for n in state.cbn._order()]
            )
        return {
            "V": dV,
            "log_delta": np.asarray(d_log_delta, dtype=np.float64),
            "ent": d_ent,
            "cbn": d_cbn,
        }


def init_state(
    cloud: VoxelizedPointCloud,
    tree: PartitionTree,
    config: TrainConfig,
    pretrained_cbn: cbn_mod.CbnParams | None = None,
) -> TrainState:
    """Deterministic starting point.

    The first three latent channels carry each block's mean color through the
    analysis transform (so the initial DC row is the global mean color and a
    linear CBN at identity reproduces the blockwise-constant fit); remaining
    channels start as small zero-mean noise.
    """
    if config.freeze_cbn and pretrained_cbn is None:
        raise ValueError("freeze_cbn requires pretrained CBN parameters")
    rng = np.random.default_rng(np.random.SeedSequence([0x1A17, config.seed]))
    C = config.spec.channels
    starts, ends = tree.block_ranges()
    sums = np.add.reduceat(cloud.attributes, starts, axis=0)
    means = sums / (ends - starts)[:, None]
    Z0 = np.zeros((tree.num_blocks, C))
    Z0[:, :3] = means
    if C > 3:
        Z0[:, 3:] = rng.normal(0.0, 0.01, size=(tree.num_blocks, C - 3))
    V = analyze(tree, Z0).values

    pipe_levels = sorted(set(int(l) for l in tree.delta_levels()))
    ent = FactorizedCdf(pipe_levels, C, seed=config.seed)
    if pretrained_cbn is not None:
        if pretrained_cbn.spec != config.spec:
            raise ValueError("pretrained CBN spec does not match the config")
        params = pretrained_cbn.copy()
    else:
        params = cbn_mod.init_params(config.spec, rng)

    state = TrainState(
        config=config,
        V=V,
        log_delta=np.zeros(C),
        ent=ent,
        cbn=params,
    )
    for name, size in _learnable_sizes(state).items():
        state.adam_m[name] = np.zeros(size)
        state.adam_v[name] = np.zeros(size)
    return state


def _learnable_sizes(state: TrainState) -> dict:
    return {
        "V": state.V.size,
        "log_delta": state.log_delta.size,
        "ent": state.ent.theta.size,
        "cbn": cbn_mod.param_count(state.cbn.spec),
    }


def _get_flat(state: TrainState, name: str) -> np.ndarray:
    if name == "V":
        return state.V.ravel()
    if name == "log_delta":
        return state.log_delta
    if name == "ent":
        return state.ent.theta
    return state.cbn.pack()


def _set_flat(state: TrainState, name: str, value: np.ndarray) -> None:
    if name == "V":
        state.V = value.reshape(state.V.shape)
    elif name == "log_delta":
        state.log_delta = value
    elif name == "ent":
        state.ent.theta = value
    else:
        state.cbn.unpack(value)


def loss(state, cloud, tree, config, rng):
    """One stochastic evaluation of (J, D, R) under a fresh noise draw."""
    pipe = Pipeline(cloud, tree, config)
    W = pipe.draw_noise(rng)
    J, D, R, _ = pipe.forward(state, W, want_stash=False)
    return J, D, R


def gradients(state, cloud, tree, config, rng):
    """Gradients of J under the same noise draw a paired loss() call would use."""
    pipe = Pipeline(cloud, tree, config)
    W = pipe.draw_noise(rng)
    _, _, _, stash = pipe.forward(state, W)
    return pipe.backward(state, stash)


def train(
    cloud: VoxelizedPointCloud,
    tree: PartitionTree,
    config: TrainConfig,
    pretrained_cbn: cbn_mod.CbnParams | None = None,
    callback=None,
) -> TrainState:
    """Full-batch Adam for ``config.steps`` steps; deterministic per seed.

    ``callback(step, J, D, R)`` is invoked after each step when given.  Raises
    :class:`TrainingDivergence` on a non-finite loss.
    """
    state = init_state(cloud, tree, config, pretrained_cbn=pretrained_cbn)
    pipe = Pipeline(cloud, tree, config)
    frozen = {"cbn"} if config.freeze_cbn else set()
    for step in range(1, config.steps + 1):
        W = pipe.draw_noise(step_rng(config.seed, step))
        J, D, R, stash = pipe.forward(state, W)
        if not np.isfinite(J):
            raise TrainingDivergence(f"non-finite loss at step {step}: D={D}, R={R}")
        grads = pipe.backward(state, stash)
        # bias-corrected Adam with the correction folded into the step size
        lr_t = config.lr * np.sqrt(1.0 - ADAM_BETA2**step) / (1.0 - ADAM_BETA1**step)
        eps_t = ADAM_EPS * np.sqrt(1.0 - ADAM_BETA2**step)
        for name in ("V", "log_delta", "ent", "cbn"):
            if name in frozen:
                continue
            g = grads[name].ravel()
            m = state.adam_m[name]
            v = state.adam_v[name]
            m += (1.0 - ADAM_BETA1) * (g - m)
            np.multiply(g, g, out=g)
            v += (1.0 - ADAM_BETA2) * (g - v)
            np.sqrt(v, out=g)
            g += eps_t
            np.divide(m, g, out=g)
            p = _get_flat(state, name) - lr_t * g
            _set_flat(state, name, p)
        state.step = step
        if callback is not None:
            callback(step, J, D, R)
    state.check_finite()
    return state


# ---------------------------------------------------------------------------
# Checkpoints (Adam moments are not persisted; checkpoints are for encoding,
# not for resuming)
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"LVCK"
_CKPT_VERSION = 1
_FLAG_FREEZE_CBN = 1
_FLAG_FREEZE_NORM = 2
_FLAG_F32 = 4


def save_checkpoint(state: TrainState, path) -> None:
    cfg = state.config
    flags = (
        (_FLAG_FREEZE_CBN if cfg.freeze_cbn else 0)
        | (_FLAG_FREEZE_NORM if cfg.freeze_normalization else 0)
        | (_FLAG_F32 if cfg.dtype == "float32" else 0)
    )
    cbn_blob = cbn_mod.params_to_bytes(state.cbn)
    out = bytearray()
    out += _CKPT_MAGIC
    out += struct.pack(
        "<BBHHBBdIdqI",
        _CKPT_VERSION,
        cbn_mod._FAMILY_TAG[cfg.spec.family],
        cfg.spec.channels,
        cfg.spec.hidden,
        cfg.target_level,
        flags,
        cfg.lam,
        cfg.steps,
        cfg.lr,
        cfg.seed,
        state.step,
    )
    out += struct.pack("<I", state.V.shape[0])
    out += state.V.astype("<f8").tobytes()
    out += state.log_delta.astype("<f8").tobytes()
    levels = state.ent.levels
    out += struct.pack("<H", len(levels))
    out += bytes(levels)
    out += struct.pack("<B", len(state.ent.widths))
    out += bytes(state.ent.widths)
    out += state.ent.theta.astype("<f8").tobytes()
    out += struct.pack("<I", len(cbn_blob))
    out += cbn_blob
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise ValueError("checkpoint CRC mismatch")
    off = 4
    (version, family_tag, C, H, level, flags, lam, steps, lr, seed, step) = struct.unpack(
        "<BBHHBBdIdqI", blob[off : off + 40]
    )
    off += 40
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    spec = cbn_mod.CbnSpec(cbn_mod._TAG_FAMILY[family_tag], channels=C, hidden=H)
    config = TrainConfig(
        spec=spec,
        target_level=level,
        lam=lam,
        steps=steps,
        lr=lr,
        seed=seed,
        freeze_cbn=bool(flags & _FLAG_FREEZE_CBN),
        freeze_normalization=bool(flags & _FLAG_FREEZE_NORM),
        dtype="float32" if flags & _FLAG_F32 else "float64",
    )
    (n_coef,) = struct.unpack("<I", blob[off : off + 4])
    off += 4
    V = np.frombuffer(blob[off : off + 8 * n_coef * C], dtype="<f8").reshape(n_coef, C).copy()
    off += 8 * n_coef * C
    log_delta = np.frombuffer(blob[off : off + 8 * C], dtype="<f8").copy()
    off += 8 * C
    (n_levels,) = struct.unpack("<H", blob[off : off + 2])
    off += 2
    levels = list(blob[off : off + n_levels])
    off += n_levels
    (n_widths,) = struct.unpack("<B", blob[off : off + 1])
    off += 1
    widths = tuple(blob[off : off + n_widths])
    off += n_widths
    ent = FactorizedCdf(levels, C, widths=widths, seed=config.seed)
    theta = np.frombuffer(blob[off : off + 8 * ent.theta.size], dtype="<f8").copy()
    off += 8 * ent.theta.size
    ent.theta = theta
    (cbn_len,) = struct.unpack("<I", blob[off : off + 4])
    off += 4
    params = cbn_mod.params_from_bytes(blob[off : off + cbn_len])
    state = TrainState(config=config, V=V, log_delta=log_delta, ent=ent, cbn=params, step=step)
    for name, size in _learnable_sizes(state).items():
        state.adam_m[name] = np.zeros(size)
        state.adam_v[name] = np.zeros(size)
    return state
