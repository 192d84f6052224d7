"""Train a U-Net translator with MSE and with the feature-pyramid loss, then compare on held-out slices.

Needs 02_preprocess.py and 03_pretrain_fae.py first.

    python demos/04_translate.py /tmp/cfpct-demo
"""

import sys
from pathlib import Path

import torch

from cfpct.data import load_prepared
from cfpct.metrics import evaluate_pairs
from cfpct.translate import TranslateConfig, train_translation

torch.set_num_threads(1)
root = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/cfpct-demo")
train = load_prepared(root / "prepared", "train")
test = load_prepared(root / "prepared", "test")

for loss in ("mse", "cfp"):
    cfg = TranslateConfig(input_size=64, base_channels=8, se_reduction=4, lr=1e-3, batch_size=4, epochs=5, loss_kind=loss)
    result = train_translation(train, root / "fae" / "mtfs.npz" if loss == "cfp" else None, cfg, seed=0)
    agg = evaluate_pairs(test, result.model, ["ssim", "psnr"]).aggregate()
    print(f"unet-{loss}: SSIM {agg['base_ssim']['mean']:.4f} -> {agg['sct_ssim']['mean']:.4f}, "
          f"PSNR {agg['base_psnr']['mean']:.2f} -> {agg['sct_psnr']['mean']:.2f} dB")
