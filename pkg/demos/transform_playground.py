"""Walk through the hierarchical transform on a small synthetic cloud.

Shows the partition tree, perfect reconstruction, the weighted Parseval
identity that the normalization scales guarantee, and the dense matrix pair
for a tiny instance.
"""

import numpy as np

from lvac import pcio, partition, raht

cloud = pcio.synthesize_cloud("sphere-shell", 5, seed=3)
print(f"cloud: {len(cloud)} occupied voxels on a {1 << cloud.depth}^3 grid")

L = 9  # blocks of 4x4x4 voxels
tree = partition.build_tree(cloud, L)
print(f"target level {L}: {tree.num_blocks} blocks, "
      f"{tree.num_coefficients} transform coefficients")
print(f"block side lengths: {tree.block_side()}")

# transform the per-block mean colors, like the non-learned codec does
starts, ends = tree.block_ranges()
Z = np.add.reduceat(cloud.attributes, starts, axis=0) / (ends - starts)[:, None]
coeffs = raht.analyze(tree, Z)
print(f"\nroot DC (weighted global mean): {coeffs.root_dc.round(4)}")
for lvl in np.unique(coeffs.levels[1:]):
    mask = coeffs.levels[1:] == lvl
    print(f"  level {lvl}: {int(mask.sum())} deltas, mean |dz| = "
          f"{np.abs(coeffs.deltas[mask]).mean():.4f}")

Z_back = raht.synthesize(tree, coeffs)
print(f"perfect reconstruction error: {np.abs(Z_back - Z).max():.2e}")

s = raht.scale_factors(tree)
weighted_energy = float(np.sum(tree.weights[L][:, None] * Z**2))
coeff_energy = float(np.sum((coeffs.values / s[:, None]) ** 2))
print(f"weighted Parseval: sum w|z|^2 = {weighted_energy:.6f}, "
      f"|S^-1 V|^2 = {coeff_energy:.6f}")

# a tiny instance small enough to materialize the matrices
small = pcio.make_cloud(2, [[0, 0, 0], [1, 0, 0], [2, 3, 1], [3, 3, 3]], np.random.rand(4, 3))
small_tree = partition.build_tree(small, 6)
Ta, Ts = raht.dense_transforms(small_tree)
print(f"\ndense pair on {small_tree.num_blocks} voxels: "
      f"|Ts Ta - I|_max = {np.abs(Ts @ Ta - np.eye(len(small))).max():.2e}")
print("analysis matrix:")
print(Ta.round(3))
