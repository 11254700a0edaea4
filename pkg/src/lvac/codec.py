"""End-to-end bitstream codec and the non-learned transform-coding baseline.

Stream layout (little-endian, bit-exact):

    magic "LVAC" | version u8 | depth u8 | L u8 | C u8 | family u8 | H u16
    | flags u8 | delta C x f32 | slice directory (L+1)*C x (u32 count, u32
    bytes) | CRC32 of the header | payload slices | optional CBN block

Slices run level-major from the root down, channel-minor; each is an
independent run-length Golomb-Rice stream padded to a byte.  The root DC gets
its own level-0 slices: the learned path transmits it as fixed-point with 8
fractional bits (rate-negligible, and it keeps the no-normalization ablation
from mangling the global mean), while the baseline path quantizes it like any
other coefficient.  Geometry travels out of band: the decoder is handed the
partition tree and reconstruction is conditioned on it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import cbn as cbn_mod
from .partition import PartitionTree, block_of
from .pcio import VoxelizedPointCloud, rgb_to_yuv_bt709, yuv_to_rgb_bt709, _YUV_TO_RGB, _CHROMA_OFFSET
from .quant import round_half_away
from .raht import analyze, scale_factors, synthesize_values
from .rlgr import BitSink, BitSource, DecodeError, rlgr_decode, rlgr_encode

__all__ = [
    "Bitstream",
    "SideInfoPolicy",
    "DecodedModel",
    "CodecError",
    "encode",
    "decode",
    "query",
    "reconstruct_cloud",
    "reconstruction_error",
    "raht_baseline_encode",
    "raht_baseline_decode",
    "accounted_bits",
]

MAGIC = b"LVAC"
VERSION = 1
DC_FRACTION_BITS = 8
FLAG_NORMALIZED = 1
FLAG_CBN_EXTERNAL = 2
FLAG_BASELINE = 4
FLAG_YUV = 8
_BASELINE_FAMILY_TAG = 255


class CodecError(ValueError):
    """Malformed or inconsistent bitstream."""


@dataclass(frozen=True)
class SideInfoPolicy:
    """How CBN parameter bits are charged to the reported rate."""

    bits_per_parameter: int = 32
    include_entropy_model: bool = False  # inference always codes with RLGR

    def __post_init__(self):
        if self.bits_per_parameter < 0:
            raise ValueError("bits per parameter must be >= 0")


@dataclass
class Bitstream:
    depth: int
    target_level: int
    channels: int
    family: str | None  # None for the baseline path
    hidden: int
    normalized: bool
    cbn_external: bool
    baseline: bool
    yuv: bool
    delta: np.ndarray  # (C,) float32 values as serialized
    slice_dir: list  # [(count, nbytes)] level-major, channel-minor
    payload: bytes
    cbn_blob: bytes | None = None

    @property
    def header_bits(self) -> int:
        return 8 * (12 + 4 * self.channels + 8 * len(self.slice_dir) + 4)

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    @property
    def total_bits(self) -> int:
        return 8 * len(self.to_bytes())

    def to_bytes(self) -> bytes:
        flags = (
            (FLAG_NORMALIZED if self.normalized else 0)
            | (FLAG_CBN_EXTERNAL if self.cbn_external else 0)
            | (FLAG_BASELINE if self.baseline else 0)
            | (FLAG_YUV if self.yuv else 0)
        )
        family_tag = _BASELINE_FAMILY_TAG if self.family is None else cbn_mod._FAMILY_TAG[self.family]
        head = bytearray()
        head += MAGIC
        head += struct.pack(
            "<BBBBBHB", VERSION, self.depth, self.target_level, self.channels,
            family_tag, self.hidden, flags,
        )
        head += np.asarray(self.delta, dtype="<f4").tobytes()
        for count, nbytes in self.slice_dir:
            head += struct.pack("<II", count, nbytes)
        head += struct.pack("<I", zlib.crc32(bytes(head)))
        out = bytes(head) + self.payload
        if self.cbn_blob is not None:
            out += self.cbn_blob
        return out

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Bitstream":
        if len(blob) < 16 or blob[:4] != MAGIC:
            raise CodecError("not an LVAC stream")
        version, depth, level, channels, family_tag, hidden, flags = struct.unpack(
            "<BBBBBHB", blob[4:12]
        )
        if version != VERSION:
            raise CodecError(f"unsupported stream version {version}")
        off = 12
        delta = np.frombuffer(blob[off : off + 4 * channels], dtype="<f4").copy()
        if delta.size != channels:
            raise CodecError("truncated step-size table")
        off += 4 * channels
        n_slices = (level + 1) * channels
        slice_dir = []
        need = off + 8 * n_slices + 4
        if len(blob) < need:
            raise CodecError("truncated slice directory")
        for _ in range(n_slices):
            count, nbytes = struct.unpack("<II", blob[off : off + 8])
            slice_dir.append((count, nbytes))
            off += 8
        (crc,) = struct.unpack("<I", blob[off : off + 4])
        if zlib.crc32(blob[:off]) != crc:
            raise CodecError("header CRC mismatch")
        off += 4
        payload_len = sum(nbytes for _, nbytes in slice_dir)
        payload = blob[off : off + payload_len]
        if len(payload) < payload_len:
            raise CodecError("truncated payload")
        off += payload_len
        cbn_blob = blob[off:] if off < len(blob) else None
        if cbn_blob == b"":
            cbn_blob = None
        baseline = bool(flags & FLAG_BASELINE)
        family = None if family_tag == _BASELINE_FAMILY_TAG else cbn_mod._TAG_FAMILY.get(family_tag)
        if family is None and not baseline:
            raise CodecError(f"unknown CBN family tag {family_tag}")
        return cls(
            depth=depth,
            target_level=level,
            channels=channels,
            family=family,
            hidden=hidden,
            normalized=bool(flags & FLAG_NORMALIZED),
            cbn_external=bool(flags & FLAG_CBN_EXTERNAL),
            baseline=baseline,
            yuv=bool(flags & FLAG_YUV),
            delta=delta,
            slice_dir=slice_dir,
            payload=payload,
            cbn_blob=cbn_blob,
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Bitstream":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class DecodedModel:
    """Decoder-side state: per-block latents plus the attribute network."""

    zhat: np.ndarray  # (num_blocks, C) float64
    spec: cbn_mod.CbnSpec | None
    params: cbn_mod.CbnParams | None
    baseline: bool
    yuv: bool


def _delta_row_starts(tree: PartitionTree) -> np.ndarray:
    """Row offset of each delta level in the coefficient matrix (1-based rows)."""
    counts = np.zeros(tree.target_level + 1, dtype=np.int64)
    for level in range(1, tree.target_level + 1):
        counts[level] = tree.links[level - 1].branching.shape[0]
    starts = np.empty(tree.target_level + 2, dtype=np.int64)
    starts[0] = 1
    starts[1:] = 1 + np.cumsum(counts)
    return starts  # rows of level l are [starts[l], starts[l+1])


def _code_slices(tree: PartitionTree, dc_syms: np.ndarray, delta_syms: np.ndarray):
    """RLGR-code the DC row and each (level, channel) slice; returns
    (directory, payload)."""
    C = dc_syms.shape[0]
    starts = _delta_row_starts(tree)
    directory = []
    chunks = []
    for level in range(tree.target_level + 1):
        if level == 0:
            rows = None
        else:
            rows = slice(starts[level] - 1, starts[level + 1] - 1)  # into delta_syms
        for c in range(C):
            syms = dc_syms[c : c + 1] if level == 0 else delta_syms[rows, c]
            if syms.size == 0:
                directory.append((0, 0))
                continue
            sink = BitSink()
            rlgr_encode(syms, sink)
            blob = sink.getvalue()
            directory.append((int(syms.size), len(blob)))
            chunks.append(blob)
    return directory, b"".join(chunks)


def _decode_slices(stream: Bitstream, tree: PartitionTree):
    """Inverse of :func:`_code_slices`; returns (dc_syms, delta_syms)."""
    C = stream.channels
    starts = _delta_row_starts(tree)
    n_delta = int(starts[-1] - 1)
    dc_syms = np.zeros(C, dtype=np.int64)
    delta_syms = np.zeros((n_delta, C), dtype=np.int64)
    off = 0
    idx = 0
    for level in range(stream.target_level + 1):
        for c in range(C):
            count, nbytes = stream.slice_dir[idx]
            idx += 1
            if count == 0:
                if nbytes:
                    raise CodecError("empty slice with nonzero length")
                continue
            src = BitSource(stream.payload[off : off + nbytes])
            off += nbytes
            syms = rlgr_decode(src, count)
            if level == 0:
                if count != 1:
                    raise CodecError("DC slice must hold one symbol per channel")
                dc_syms[c] = syms[0]
            else:
                rows = slice(starts[level] - 1, starts[level + 1] - 1)
                if count != rows.stop - rows.start:
                    raise CodecError(f"slice count mismatch at level {level}")
                delta_syms[rows, c] = syms
    return dc_syms, delta_syms


def encode(
    cloud: VoxelizedPointCloud,
    tree: PartitionTree,
    state,
    policy: SideInfoPolicy = SideInfoPolicy(),
    inline_cbn: bool | None = None,
) -> Bitstream:
    """Freeze a trained state into a bitstream.

    Delta rows are quantized as round(V / (s * Delta)); the DC row is sent at
    fixed 2^-8 precision.  The CBN is embedded when ``inline_cbn`` (default:
    only under the 32-bits-per-parameter policy); otherwise the stream is
    flagged as requiring external CBN parameters.
    """
    config = state.config
    if tree.target_level != config.target_level:
        raise CodecError("trained state and tree disagree on the target level")
    if state.V.shape[0] != tree.num_coefficients:
        raise CodecError("trained state does not match the tree")
    C = config.spec.channels
    delta = np.asarray(state.delta, dtype=np.float32).astype(np.float64)
    s = np.ones(tree.num_coefficients) if config.freeze_normalization else scale_factors(tree)
    dc_syms = round_half_away(state.V[0] * (1 << DC_FRACTION_BITS))
    delta_syms = round_half_away(state.V[1:] / (s[1:, None] * delta[None, :]))
    directory, payload = _code_slices(tree, dc_syms, delta_syms)

    if inline_cbn is None:
        inline_cbn = policy.bits_per_parameter >= 32
    blob = cbn_mod.params_to_bytes(state.cbn) if inline_cbn else None
    return Bitstream(
        depth=tree.depth,
        target_level=tree.target_level,
        channels=C,
        family=config.spec.family,
        hidden=config.spec.hidden,
        normalized=not config.freeze_normalization,
        cbn_external=not inline_cbn,
        baseline=False,
        yuv=False,
        delta=np.asarray(state.delta, dtype=np.float32),
        slice_dir=directory,
        payload=payload,
        cbn_blob=blob,
    )


def decode(
    stream: Bitstream,
    tree: PartitionTree,
    external_cbn: cbn_mod.CbnParams | None = None,
) -> DecodedModel:
    """Reconstruct per-block latents (and the CBN) from a stream.

    The tree must be the one the stream was encoded against; attribute
    decoding is conditioned on that geometry.
    """
    if tree.target_level != stream.target_level or tree.depth != stream.depth:
        raise CodecError("tree does not match the stream geometry parameters")
    dc_syms, delta_syms = _decode_slices(stream, tree)
    C = stream.channels
    delta = stream.delta.astype(np.float64)
    s = scale_factors(tree) if stream.normalized else np.ones(tree.num_coefficients)
    vhat = np.empty((tree.num_coefficients, C))
    if stream.baseline:
        vhat[0] = dc_syms * (s[0] * delta)
    else:
        vhat[0] = dc_syms / float(1 << DC_FRACTION_BITS)
    vhat[1:] = delta_syms * (s[1:, None] * delta[None, :])
    zhat = synthesize_values(tree, vhat)

    if stream.baseline:
        return DecodedModel(zhat=zhat, spec=None, params=None, baseline=True, yuv=stream.yuv)
    if stream.cbn_blob is not None:
        params = cbn_mod.params_from_bytes(stream.cbn_blob)
    elif external_cbn is not None:
        params = external_cbn
    else:
        raise CodecError("stream requires external CBN parameters but none were given")
    spec = cbn_mod.CbnSpec(stream.family, channels=C, hidden=stream.hidden)
    if params.spec != spec:
        raise CodecError("external CBN parameters do not match the stream's spec")
    return DecodedModel(zhat=zhat, spec=spec, params=params, baseline=False, yuv=False)


def _baseline_colors(zhat_rows: np.ndarray, yuv: bool) -> np.ndarray:
    colors = zhat_rows / 255.0
    if yuv:
        colors = (colors - _CHROMA_OFFSET) @ _YUV_TO_RGB.T
    return np.clip(colors, 0.0, 1.0)


def query(model: DecodedModel, tree: PartitionTree, position):
    """Attributes at an arbitrary grid position; None in unoccupied space."""
    block = block_of(tree, position)
    if block is None:
        return None
    if model.baseline:
        return _baseline_colors(model.zhat[block : block + 1], model.yuv)[0]
    x_local = tree.local_coords(np.asarray(position, dtype=np.int64).reshape(1, 3))
    y = cbn_mod.forward(model.params, x_local, model.zhat[block : block + 1])
    return np.clip(y[0], 0.0, 1.0)


def reconstruct_cloud(
    model: DecodedModel, tree: PartitionTree, positions: np.ndarray
) -> VoxelizedPointCloud:
    """Evaluate the decoded model at every given (occupied) position."""
    positions = np.asarray(positions, dtype=np.int64)
    from .pcio import morton_keys

    keys = morton_keys(positions, tree.depth)
    pref = keys >> (3 * tree.depth - tree.target_level)
    blocks = np.searchsorted(tree.prefixes[tree.target_level], pref)
    if np.any(blocks >= tree.num_blocks) or np.any(
        tree.prefixes[tree.target_level][blocks] != pref
    ):
        raise ValueError("positions include unoccupied blocks")
    if model.baseline:
        colors = _baseline_colors(model.zhat[blocks], model.yuv)
    else:
        x_local = tree.local_coords(positions)
        colors = np.clip(cbn_mod.forward(model.params, x_local, model.zhat[blocks]), 0.0, 1.0)
    return VoxelizedPointCloud(tree.depth, positions, colors)


def reconstruction_error(
    model: DecodedModel, tree: PartitionTree, cloud: VoxelizedPointCloud
) -> float:
    """Total squared error sum over points and channels, in [0, 1] units."""
    recon = reconstruct_cloud(model, tree, cloud.positions)
    diff = recon.attributes - cloud.attributes
    return float(np.sum(diff * diff))


def accounted_bits(stream: Bitstream, policy: SideInfoPolicy) -> int:
    """Rate charged to a stream: actual stream bits, plus the parameterized
    CBN cost when the network is not embedded."""
    bits = stream.total_bits
    if stream.cbn_blob is None and not stream.baseline and stream.family is not None:
        spec = cbn_mod.CbnSpec(stream.family, channels=stream.channels, hidden=stream.hidden)
        bits += policy.bits_per_parameter * cbn_mod.param_count(spec)
    return bits


# ---------------------------------------------------------------------------
# RAHT + RLGR baseline (non-learned transform coding of the colors)
# ---------------------------------------------------------------------------

def raht_baseline_encode(
    cloud: VoxelizedPointCloud,
    tree: PartitionTree,
    delta_scalar: float,
    colorspace: str = "rgb",
) -> tuple[Bitstream, VoxelizedPointCloud]:
    """Transform-code the colors themselves with one scalar step size.

    Colors (in 0..255 scale, optionally BT.709 YUV) become per-block constant
    latents, are hierarchically transformed, normalized, quantized with
    ``delta_scalar`` and RLGR-coded.  Returns the stream and the encoder-side
    reconstruction.
    """
    if colorspace not in ("rgb", "yuv"):
        raise ValueError("colorspace must be 'rgb' or 'yuv'")
    if delta_scalar <= 0:
        raise ValueError("step size must be positive")
    work = rgb_to_yuv_bt709(cloud) if colorspace == "yuv" else cloud
    starts, ends = tree.block_ranges()
    sums = np.add.reduceat(work.attributes, starts, axis=0)
    Z = 255.0 * sums / (ends - starts)[:, None]
    V = analyze(tree, Z).values
    s = scale_factors(tree)
    delta = np.full(3, float(delta_scalar))
    syms = round_half_away(V / (s[:, None] * delta[None, :]))
    directory, payload = _code_slices(tree, syms[0], syms[1:])
    stream = Bitstream(
        depth=tree.depth,
        target_level=tree.target_level,
        channels=3,
        family=None,
        hidden=0,
        normalized=True,
        cbn_external=False,
        baseline=True,
        yuv=colorspace == "yuv",
        delta=delta.astype(np.float32),
        slice_dir=directory,
        payload=payload,
    )
    model = decode(stream, tree)
    return stream, reconstruct_cloud(model, tree, cloud.positions)


def raht_baseline_decode(stream: Bitstream, tree: PartitionTree) -> VoxelizedPointCloud:
    if not stream.baseline:
        raise CodecError("not a baseline stream")
    model = decode(stream, tree)
    return reconstruct_cloud(model, tree, tree_positions(tree))


def tree_positions(tree: PartitionTree) -> np.ndarray:
    """Voxel positions implied by the tree's Morton prefixes at the voxel level."""
    if tree.target_level != 3 * tree.depth:
        raise ValueError("positions are only recoverable from a voxel-level tree")
    keys = tree.prefixes[tree.target_level]
    d = tree.depth
    x = np.zeros_like(keys)
    y = np.zeros_like(keys)
    z = np.zeros_like(keys)
    for k in range(d):
        x |= ((keys >> (3 * k + 2)) & 1) << k
        y |= ((keys >> (3 * k + 1)) & 1) << k
        z |= ((keys >> (3 * k)) & 1) << k
    return np.stack([x, y, z], axis=1)
