"""Block-local coordinate-based networks mapping (position, latent) to color.

Three families:

* ``linear3x3`` -- y = A z with a 3x3 matrix; position is ignored, so the
  block's attribute field is constant.  9 parameters.
* ``mlp`` -- two-layer ReLU perceptron on the concatenated [x, z] input, ReLU
  on the output layer as well.  9987 parameters at H=256, 2499 at H=64 (C=32).
* ``pa`` -- position-attention: the latent gates per-channel sinusoids of the
  position, followed by an output projection.  227 parameters at C=32.

Forward and backward are batched over points, with analytic gradients for
every parameter tensor and the latent input (ReLU subgradient at 0 is 0).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CbnSpec",
    "CbnParams",
    "param_count",
    "init_params",
    "forward",
    "backward",
    "save_params",
    "load_params",
]

FAMILIES = ("linear3x3", "mlp", "pa")
_FAMILY_TAG = {"linear3x3": 0, "mlp": 1, "pa": 2}
_TAG_FAMILY = {v: k for k, v in _FAMILY_TAG.items()}


@dataclass(frozen=True)
class CbnSpec:
    family: str
    channels: int = 32
    hidden: int = 64  # mlp only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown CBN family {self.family!r}")
        if self.family == "linear3x3" and self.channels != 3:
            raise ValueError("linear3x3 requires channels == 3")
        if self.channels < 3:
            raise ValueError("need at least 3 latent channels")

    @property
    def label(self) -> str:
        if self.family == "linear3x3":
            return "linear(3x3)"
        if self.family == "mlp":
            return f"mlp({3 + self.channels}x{self.hidden}x3)"
        return f"pa(3x{self.channels}x3)"


@dataclass
class CbnParams:
    """Family-specific tensors, plus flat pack/unpack for the optimizer."""

    spec: CbnSpec
    tensors: dict = field(default_factory=dict)

    def _order(self):
        if self.spec.family == "linear3x3":
            return ("A",)
        if self.spec.family == "mlp":
            return ("W_in", "b_h", "W_out", "b3")
        return ("W_in", "b_c", "W_out", "b3")

    def pack(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self._order()])

    def unpack(self, flat: np.ndarray) -> None:
        off = 0
        for n in self._order():
            t = self.tensors[n]
            self.tensors[n] = flat[off : off + t.size].reshape(t.shape).copy()
            off += t.size
        if off != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def copy(self) -> "CbnParams":
        return CbnParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})


def param_count(spec: CbnSpec) -> int:
    C, H = spec.channels, spec.hidden
    if spec.family == "linear3x3":
        return 9
    if spec.family == "mlp":
        return H * (3 + C) + H + 3 * H + 3
    return 3 + 3 * C + C + 3 * C


def init_params(spec: CbnSpec, rng: np.random.Generator) -> CbnParams:
    """Fan-in-scaled uniform weights, zero biases; linear starts at identity.

    The position-attention input weights get a 4x boost so the sinusoids span
    a few cycles across a unit block while staying below the voxel Nyquist
    rate.
    """
    C, H = spec.channels, spec.hidden
    t: dict[str, np.ndarray] = {}
    if spec.family == "linear3x3":
        t["A"] = np.eye(3)
    elif spec.family == "mlp":
        a_in = 1.0 / np.sqrt(3 + C)
        a_out = 1.0 / np.sqrt(H)
        t["W_in"] = rng.uniform(-a_in, a_in, size=(H, 3 + C))
        t["b_h"] = np.zeros(H)
        t["W_out"] = rng.uniform(-a_out, a_out, size=(3, H))
        t["b3"] = np.zeros(3)
    else:
        t["W_in"] = rng.uniform(-4.0 / np.sqrt(3), 4.0 / np.sqrt(3), size=(C, 3))
        t["b_c"] = np.zeros(C)
        t["W_out"] = rng.uniform(-1.0 / np.sqrt(C), 1.0 / np.sqrt(C), size=(3, C))
        t["b3"] = np.zeros(3)
    return CbnParams(spec, t)


def forward(params: CbnParams, x_local: np.ndarray, z: np.ndarray, stash: list | None = None):
    """Evaluate the network on batched inputs.

    ``x_local`` is (N, 3) in [0, 1]^3, ``z`` is (N, C); returns (N, 3).  Pass a
    list as ``stash`` to record what :func:`backward` needs.
    """
    spec = params.spec
    x_local = np.asarray(x_local)
    z = np.asarray(z)
    t = params.tensors
    if z.ndim != 2 or z.shape[1] != spec.channels:
        raise ValueError(f"z must be (N, {spec.channels}), got {z.shape}")
    if spec.family == "linear3x3":
        y = z @ t["A"].T
        if stash is not None:
            stash.append(("linear3x3", z))
        return y
    if spec.family == "mlp":
        X = np.concatenate([x_local, z], axis=1)
        pre_h = X @ t["W_in"].T + t["b_h"]
        h = np.maximum(pre_h, 0.0)
        pre_y = h @ t["W_out"].T + t["b3"]
        y = np.maximum(pre_y, 0.0)
        if stash is not None:
            stash.append(("mlp", X, pre_h > 0.0, h, pre_y > 0.0))
        return y
    # pa
    pre = x_local @ t["W_in"].T + t["b_c"]
    g = np.sin(pre)
    zg = z * g
    y = zg @ t["W_out"].T + t["b3"]
    if stash is not None:
        stash.append(("pa", x_local, z, pre, g, zg))
    return y


def backward(params: CbnParams, stash: list, upstream: np.ndarray):
    """Gradients of sum(upstream * forward) for every tensor and for z."""
    spec = params.spec
    t = params.tensors
    rec = stash[-1]
    upstream = np.asarray(upstream)
    grads: dict[str, np.ndarray] = {}
    if spec.family == "linear3x3":
        _, z = rec
        grads["A"] = upstream.T @ z
        dz = upstream @ t["A"]
        return grads, dz
    if spec.family == "mlp":
        _, X, mask_h, h, mask_y = rec
        d_pre_y = upstream * mask_y
        grads["b3"] = d_pre_y.sum(axis=0)
        grads["W_out"] = d_pre_y.T @ h
        dh = d_pre_y @ t["W_out"]
        d_pre_h = dh * mask_h
        grads["b_h"] = d_pre_h.sum(axis=0)
        grads["W_in"] = d_pre_h.T @ X
        dX = d_pre_h @ t["W_in"]
        return grads, dX[:, 3:]
    _, x_local, z, pre, g, zg = rec
    grads["b3"] = upstream.sum(axis=0)
    grads["W_out"] = upstream.T @ zg
    dzg = upstream @ t["W_out"]
    dz = dzg * g
    dg = dzg * z
    dpre = dg * np.cos(pre)
    grads["b_c"] = dpre.sum(axis=0)
    grads["W_in"] = dpre.T @ x_local
    return grads, dz


# ---------------------------------------------------------------------------
# Parameter file format (frozen / pre-trained networks)
# ---------------------------------------------------------------------------

def save_params(params: CbnParams, path) -> None:
    """Header {family tag, C, H}, tensors row-major as f32 LE, trailing CRC32."""
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> CbnParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def params_to_bytes(params: CbnParams) -> bytes:
    spec = params.spec
    head = struct.pack("<BHH", _FAMILY_TAG[spec.family], spec.channels, spec.hidden)
    body = params.pack().astype("<f4").tobytes()
    return head + body + struct.pack("<I", zlib.crc32(head + body))


def params_from_bytes(blob: bytes) -> CbnParams:
    if len(blob) < 9:
        raise ValueError("CBN parameter block too short")
    payload, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise ValueError("CBN parameter block CRC mismatch")
    tag, C, H = struct.unpack("<BHH", payload[:5])
    if tag not in _TAG_FAMILY:
        raise ValueError(f"unknown CBN family tag {tag}")
    spec = CbnSpec(_TAG_FAMILY[tag], channels=C, hidden=H)
    flat = np.frombuffer(payload[5:], dtype="<f4").astype(np.float64)
    if flat.size != param_count(spec):
        raise ValueError("CBN parameter block has the wrong tensor length")
    params = init_params(spec, np.random.default_rng(0))
    params.unpack(flat)
    return params
