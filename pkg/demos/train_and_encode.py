"""Train latents for one cloud, write a bitstream, decode it back.

The latents live on blocks of a spatial partition tree and are optimized in
an auto-decoder loop against distortion plus a rate proxy.  After training,
coefficients are rounded, entropy coded, and the decoder reconstructs the
same attributes bit for bit, then answers queries at arbitrary positions.
"""

import numpy as np

from lvac import cbn, codec, metrics, partition, pcio, trainer

cloud = pcio.synthesize_cloud("sphere-shell", 6, seed=1)
L = 3 * cloud.depth  # one voxel per block
tree = partition.build_tree(cloud, L)
print(f"cloud: {len(cloud)} points; {tree.num_blocks} blocks at level {L}")

config = trainer.TrainConfig(
    spec=cbn.CbnSpec("mlp", channels=32, hidden=64),
    target_level=L,
    lam=3e-4,
    steps=600,
    seed=4,
)
trace = []
state = trainer.train(cloud, tree, config, callback=lambda s, J, D, R: trace.append((s, J, D, R)))
for s, J, D, R in trace[:: len(trace) // 6]:
    print(f"  step {s:4d}: J={J:9.2f}  D={D:9.2f}  R={R:9.0f} bits (proxy)")

policy = codec.SideInfoPolicy(bits_per_parameter=0)
stream = codec.encode(cloud, tree, state, policy, inline_cbn=False)
model = codec.decode(stream, tree, external_cbn=state.cbn)
recon = codec.reconstruct_cloud(model, tree, cloud.positions)
print(f"\nstream: {stream.total_bits // 8} bytes "
      f"({stream.payload_bits / len(cloud):.3f} bpp of coefficients, "
      f"{stream.header_bits / len(cloud):.3f} bpp of header; the header "
      f"amortizes away on full-size clouds)")
print(f"psnr: {metrics.psnr_rgb(cloud, recon):.2f} dB")

# decode-side equals encode-side reconstruction exactly
again = codec.decode(codec.Bitstream.from_bytes(stream.to_bytes()), tree, external_cbn=state.cbn)
assert np.array_equal(again.zhat, model.zhat)
print("decoder reconstruction is bit-exact against the encoder's")

# the decoded model answers anywhere inside occupied blocks
inside = cloud.positions[len(cloud) // 2]
print(f"query at stored point {inside}: {codec.query(model, tree, inside).round(4)}")
empty = next(
    p for p in [(0, 0, 0), (1, 1, 1), (63, 63, 63)]
    if partition.block_of(tree, p) is None
)
print(f"query in empty space {empty}: {codec.query(model, tree, empty)}")
