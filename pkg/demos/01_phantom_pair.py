"""Generate one phantom CT/CBCT pair and look at what the degradation did.

    python demos/01_phantom_pair.py
"""

import numpy as np

from cfpct.phantom import DegradationRanges, PhantomSpec, make_pair

spec = PhantomSpec(image_size=64, vessel_tree_depth=4)
# default-severity degradation, sampled the way make_dataset does it
params = DegradationRanges().sample(np.random.default_rng(3), seed=3)
print(params)
pair = make_pair(spec, params, seed=3)

ct, cbct, lungs = pair.ct.voxels[0], pair.cbct.voxels[0], pair.lung_mask.voxels[0].astype(bool)
print(f"volume shape (D, H, W): {pair.ct.shape}")
print(f"lung fraction: {lungs.mean():.3f}")
print(f"CT   HU range [{ct.min():7.1f}, {ct.max():6.1f}]  lung mean {ct[lungs].mean():7.1f}")
print(f"CBCT HU range [{cbct.min():7.1f}, {cbct.max():6.1f}]  lung mean {cbct[lungs].mean():7.1f}")
print(f"true rigid misalignment: {pair.true_rigid}")
print(f"streaks drawn on slice 0: {len(pair.streaks[0])}")

# a coarse ASCII view of the CBCT slice
rows = cbct[::4, ::2]
shades = np.array(list(" .:-=+*#%@"))
scaled = np.clip((rows + 1000) / 1200, 0, 0.999)
for r in scaled:
    print("".join(shades[(r * len(shades)).astype(int)]))
