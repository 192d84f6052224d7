"""Drive the harness end to end: a tiny Table-1 grid with content-addressed, reusable runs.

Running it twice reuses every finished run. The same thing from the shell:

    cfpct matrix --preset desk --config tiny.json --grid table1

    python demos/05_matrix.py /tmp/cfpct-matrix
"""

import sys

from cfpct import harness

out = sys.argv[1] if len(sys.argv) > 1 else "/tmp/cfpct-matrix"
cfg = harness.resolve_config("desk", {
    "global": {"out_dir": out},
    "phantom": {"n_pairs": 16},
    "mtfs": {"epochs": 1, "max_train_pairs": 8},
    "translate": {"epochs": 1, "max_train_pairs": 8},
    "matrix": {"replicates": 1},
})
run, doc = harness.cmd_matrix(cfg, "table1", rows=["base", "unet-mse", "unet-cfp"])
print(f"run directory: {run.dir}")
print(run.output(doc, "table").read_text())
print("cell status:", doc["cell_status"])
