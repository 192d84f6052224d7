"""Run the preprocessing chain on a small dataset and inspect the prepared slices.

The chain is rigid alignment, then mask, crop/resize, HU clip and HU-to-LAC.

    python demos/02_preprocess.py /tmp/cfpct-demo
"""

import sys
from pathlib import Path

from cfpct.data import load_prepared, prepare_dataset
from cfpct.phantom import DegradationRanges, PhantomSpec, make_dataset

root = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/cfpct-demo")
manifest = make_dataset(20, PhantomSpec(image_size=64, vessel_tree_depth=4), DegradationRanges(), root / "dataset", seed=0)
doc = prepare_dataset(manifest, root / "prepared", out_size=64)

for entry in doc["pairs"][:5]:
    est, true = entry["estimated_rigid"], entry["true_rigid"]
    print(f"{entry['id']} [{entry['split']:>5}]  estimated dx={est['dx']:+.2f} dy={est['dy']:+.2f} rot={est['rotation']:+.2f}"
          f"   true dx={true['dx']:+.2f} dy={true['dy']:+.2f} rot={true['rotation']:+.2f}")

train = load_prepared(root / "prepared", "train")
print(f"\n{len(train)} training slices, LAC range [{train.ct.min():.4f}, {train.ct.max():.4f}]")
