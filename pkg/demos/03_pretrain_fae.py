"""Pre-train the feature autoencoder with all three tasks and watch gradnorm move the weights.

Needs the prepared data from 02_preprocess.py.

    python demos/03_pretrain_fae.py /tmp/cfpct-demo
"""

import sys
from pathlib import Path

import torch

from cfpct.data import load_prepared
from cfpct.fae import FaeConfig
from cfpct.mtfs import MtfsConfig, classifier_accuracy, train_mtfs

torch.set_num_threads(1)
root = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/cfpct-demo")
train = load_prepared(root / "prepared", "train")

fae = FaeConfig(input_size=64, width_multiplier=0.25, blocks_per_stage=(1, 1, 3, 1), residual_layers=6)
cfg = MtfsConfig(fae=fae, epochs=4, lr=1e-3, batch_size=8)
result = train_mtfs(train, (1, 2, 3), cfg, seed=0, out_dir=root / "fae")

for rec in result.log:
    losses = "  ".join(f"{k} {v:.4f}" for k, v in rec["losses"].items())
    weights = "  ".join(f"{k} {v:.3f}" for k, v in rec["weights"].items())
    print(f"epoch {rec['epoch']}: {losses} | weights {weights}")
print(f"modality classifier train accuracy: {classifier_accuracy(result.network, train):.3f}")
print(f"checkpoint: {result.checkpoint}")
