"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The heavy criteria (6 to 9) train desk-scale models on a 667-pair phantom
dataset (200 held-out test pairs). They run in a fresh directory unless
CFPCT_ACCEPT_OUT points at a directory to reuse finished runs from.
"""

import os
import time

import numpy as np
import pytest
import torch
from torch import nn

from cfpct import harness
from cfpct.cfp import cfp_loss, content_loss, gram, style_loss
from cfpct.data import load_prepared
from cfpct.fae import FaeConfig, ResBlock, build_fae
from cfpct.metrics import pearson, psnr
from cfpct.mtfs import (
    RECOVERY_CHANNELS,
    TaskWeights,
    build_recovery_head,
    classifier_accuracy,
    gradnorm_step,
    load_mtfs,
    predict_dvf,
    warp,
)
from cfpct.pipeline import Volume, hu_to_lac, hu_to_lac_array, load_volume, save_volume
from cfpct.translate import TranslateConfig, build_car_unet
from criteria import record
from oracles import content_loop, finite_difference_error, gram_loop, pearson_loop, psnr_loop, style_loop


def rand(*shape, rng):
    return torch.from_numpy(rng.normal(size=shape))


def check(number, ok, detail):
    record(number, ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# exact oracles and invariants


def test_criterion_1_formula_exactness():
    t0 = time.time()
    expected = np.array([0.192, 0.0, 0.2304])
    worst_lac = float(np.max(np.abs(hu_to_lac_array(np.array([0.0, -1000.0, 200.0])) - expected)))
    # Volumes hold float32, so the container path is exact to float32 rounding only
    hu = Volume(np.array([[[0.0, -1000.0, 200.0]]], np.float32))
    vol_err = float(np.max(np.abs(hu_to_lac(hu).voxels[0, 0] - expected.astype(np.float32))))
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        c, h, w = rng.integers(1, 4, size=3)
        a, b = rand(c, h, w, rng=rng), rand(c, h, w, rng=rng)
        worst = max(
            worst,
            abs(float(content_loss(a, b)) - content_loop(a.numpy(), b.numpy())),
            float(np.max(np.abs(gram(a).numpy() - gram_loop(a.numpy())))),
            abs(float(style_loss(a, b)) - style_loop(a.numpy(), b.numpy())),
        )
        x = rng.uniform(-1000, 200, size=(6, 6))
        y = x + rng.normal(0, 50, size=(6, 6))
        worst = max(worst, abs(psnr(x, y) - psnr_loop(x, y, 1200.0)), abs(pearson(x, y) - pearson_loop(x, y)))
    secs = time.time() - t0
    ok = worst_lac < 1e-9 and vol_err == 0.0 and worst < 1e-6 and secs < 60
    check(1, ok, f"HU->LAC err {worst_lac:.1e} (<1e-9), float32 volume path exact={vol_err == 0.0}; worst oracle err {worst:.1e} (<1e-6) over 100 instances; {secs:.1f}s (<60s)")


def test_criterion_2_gradients():
    t0 = time.time()
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(3):
        a, b = rand(3, 4, 4, rng=rng), rand(3, 4, 4, rng=rng)
        errs.append(finite_difference_error(lambda x: content_loss(x, b), a))
        errs.append(finite_difference_error(lambda x: style_loss(x, b), a))
        sides = (4, 2, 1, 1)
        pb = [rand(3, s, s, rng=rng).abs() for s in sides]
        rest = [rand(3, s, s, rng=rng).abs() for s in sides]
        errs.append(finite_difference_error(lambda x: cfp_loss([x] + rest[1:], pb), a.abs()))
        img = rand(1, 1, 8, 8, rng=rng)
        dvf = torch.from_numpy(rng.integers(-2, 2, size=(1, 2, 8, 8)) + rng.uniform(0.2, 0.8, size=(1, 2, 8, 8)))
        weight = rand(1, 1, 8, 8, rng=rng)
        errs.append(finite_difference_error(lambda x: (warp(x, dvf) * weight).sum(), img))
        errs.append(finite_difference_error(lambda d: (warp(img, d) * weight).sum(), dvf))
    secs = time.time() - t0
    ok = max(errs) < 1e-4 and secs < 120
    check(2, ok, f"max relative FD error {max(errs):.1e} (<1e-4) for content/style/cfp/warp; {secs:.1f}s (<120s)")


def test_criterion_3_perceptual_identities():
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst_self, worst_perm, worst_sym, min_eig = 0.0, 0.0, 0.0, np.inf
    for _ in range(50):
        chans = rng.integers(1, 6, size=4)
        side = 8
        pyr = [rand(int(c), side >> i, side >> i, rng=rng).abs() for i, c in enumerate(chans)]
        worst_self = max(worst_self, abs(float(cfp_loss(pyr, pyr))))
        other = [rand(*p.shape, rng=rng).abs() for p in pyr]
        for p, q in zip(pyr, other):
            c, h, w = p.shape
            perm = torch.from_numpy(rng.permutation(h * w))
            pp, qp = (t.reshape(c, -1)[:, perm].reshape(c, h, w) for t in (p, q))
            worst_perm = max(worst_perm, abs(float(style_loss(pp, qp)) - float(style_loss(p, q))))
            g = gram(p)
            worst_sym = max(worst_sym, float((g - g.T).abs().max()))
            min_eig = min(min_eig, float(torch.linalg.eigvalsh(g).min()))
    secs = time.time() - t0
    ok = worst_self == 0.0 and worst_perm < 1e-12 and worst_sym == 0.0 and min_eig > -1e-10 and secs < 60
    check(3, ok, f"cfp(p,p) max {worst_self:.1e}; permutation drift {worst_perm:.1e}; Gram asym {worst_sym:.1e}, min eig {min_eig:.1e}; 50 pyramids; {secs:.1f}s")


def _toy_losses(scales, seed=0):
    torch.manual_seed(seed)
    layer = nn.Linear(4, 4)
    h = layer(torch.randn(8, 4))
    return layer, [s * h.pow(2).mean() for s in scales]


def test_criterion_4_gradnorm_contract():
    t0 = time.time()
    rng = np.random.default_rng(4)
    worst_sum, min_w = 0.0, np.inf
    for i in range(100):
        t = int(rng.integers(2, 4))
        layer, losses = _toy_losses(rng.uniform(0.01, 50, t), seed=i)
        w = rng.uniform(0.05, 3, t)
        tw = TaskWeights(w * t / w.sum(), rng.uniform(0.01, 50, t))
        new = gradnorm_step(losses, tw, layer, lr_w=float(rng.uniform(0.001, 5)))
        worst_sum = max(worst_sum, abs(new.w.sum() - t))
        min_w = min(min_w, float(new.w.min()))
    layer, (l1, _) = _toy_losses((1.0, 1.0))
    tw = TaskWeights.uniform(2)
    max_gap = 0.0
    for _ in range(100):
        tw = gradnorm_step([l1, l1], tw, layer)
        max_gap = max(max_gap, abs(tw.w[0] - tw.w[1]))
        worst_sum = max(worst_sum, abs(tw.w.sum() - 2))
    layer, losses = _toy_losses((10.0, 1.0))
    strong = gradnorm_step(losses, TaskWeights.uniform(2), layer)
    decreased = strong.w[0] < 1.0
    secs = time.time() - t0
    ok = min_w > 0 and worst_sum < 1e-6 and max_gap < 1e-9 and decreased and secs < 60
    check(4, ok, f"min weight {min_w:.2e} (>0); |sum-T| {worst_sum:.1e} (<1e-6); symmetric gap over 100 steps {max_gap:.1e}; over-strong weight 1 -> {strong.w[0]:.4f}; {secs:.1f}s")


def test_criterion_5_architecture_shapes():
    t0 = time.time()
    problems = []
    fae = build_fae(FaeConfig(), seed=0)
    with torch.no_grad():
        taps = fae(torch.zeros(1, 1, 256, 256))
    shapes = [tuple(t.shape[1:]) for t in taps]
    if shapes != [(32, 256, 256), (64, 128, 128), (128, 64, 64), (256, 32, 32)]:
        problems.append(f"FAE pyramid {shapes}")
    head = build_recovery_head(FaeConfig(), seed=0)
    chans = [m.out_channels for m in head.modules() if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        out = head(taps[3])
    if chans != [256, 256, 256, 128, 128, 64, 64, 32, 1] or list(RECOVERY_CHANNELS) != chans or tuple(out.shape) != (1, 1, 256, 256):
        problems.append(f"recovery head {chans} -> {tuple(out.shape)}")
    cfg = TranslateConfig()
    net = build_car_unet(cfg, seed=0)
    counts = [sum(isinstance(m, ResBlock) for m in level.modules()) for level in net.encoder]
    widths = [cfg.base_channels * 2**i for i in range(4)]
    census = [sum(p.numel() for b in level.blocks for p in b.parameters()) // (2 * (9 * c * c + c)) for level, c in zip(net.encoder, widths)]
    if counts != [2, 4, 6, 8] or census != [2, 4, 6, 8]:
        problems.append(f"res blocks {counts}, parameter census {census}")
    x = torch.rand(2, 1, 256, 256) * 0.25
    with torch.no_grad():
        y = net(x)
    unet_err = float((y - x).abs().max())
    block = ResBlock(8)
    nn.init.zeros_(block.conv2.weight)
    nn.init.zeros_(block.conv2.bias)
    z = torch.rand(1, 8, 6, 6)
    with torch.no_grad():
        block_err = float((block(z) - z).abs().max())
    if y.shape != x.shape or unet_err > 1e-6 or block_err > 1e-6:
        problems.append(f"identity at zero init: unet {unet_err:.1e}, block {block_err:.1e}")
    secs = time.time() - t0
    ok = not problems and secs < 60
    check(5, ok, ("shapes, channels, census and zero-init identities hold" if not problems else "; ".join(problems)) + f"; {secs:.1f}s")


# --------------------------------------------------------------------------
# trained desk-scale behaviour


@pytest.fixture(scope="session")
def accept_root(tmp_path_factory):
    path = os.environ.get("CFPCT_ACCEPT_OUT")
    return path if path else str(tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="session")
def desk_cfg(accept_root):
    return harness.resolve_config("desk", None, [{"global": {"out_dir": accept_root}}])


@pytest.fixture(scope="session")
def desk_prepared(desk_cfg, accept_root):
    _, gen = harness.cmd_phantom_gen(desk_cfg, root=accept_root)
    gen_dir = harness.Run("phantom-gen", desk_cfg, root=accept_root).dir
    run, doc = harness.cmd_prep(desk_cfg, gen_dir / gen["outputs"]["dataset"], root=accept_root)
    assert doc["splits"]["test"] == 200
    return run.output(doc, "prepared")


def _override(cfg, **sections):
    layers = [{k: v} for k, v in sections.items()]
    return harness.resolve_config(cfg["global"]["preset"], cfg, layers)


def test_criterion_6_warp_and_registration(desk_cfg, desk_prepared, accept_root):
    t0 = time.time()
    img = torch.rand(2, 1, 16, 16)
    zero_exact = torch.equal(warp(img, torch.zeros(2, 2, 16, 16)), img)
    dvf = torch.zeros(2, 2, 16, 16)
    dvf[:, 0] = 3.0
    int_err = float((warp(img, dvf)[..., :-3] - img[..., 3:]).abs().max())
    ramp = torch.arange(16, dtype=torch.float32).repeat(16, 1)[None, None]
    dvf = torch.zeros(1, 2, 16, 16)
    dvf[:, 0] = 0.5
    half_err = float((warp(ramp, dvf)[..., :-1] - (ramp[..., :-1] + 0.5)).abs().max())

    cfg = _override(desk_cfg, mtfs={"tasks": [2], "epochs": 40})
    run, doc = harness.cmd_mtfs_train(cfg, desk_prepared, [2], root=accept_root)
    net = load_mtfs(run.output(doc, "checkpoint"))
    test = load_prepared(desk_prepared, "test")
    ct = torch.from_numpy(test.ct).unsqueeze(1)
    mask = torch.from_numpy(test.mask).bool()
    epe = {}
    for shift in (4, -4):
        # content rolled by +shift columns is recovered as dx = +shift
        d = predict_dvf(net, torch.roll(ct, shift, dims=3), ct)
        epe[shift] = float(torch.sqrt((d[:, 0] - shift) ** 2 + d[:, 1] ** 2)[mask].mean())
    secs = time.time() - t0
    ok = zero_exact and int_err < 1e-6 and half_err < 1e-5 and max(epe.values()) < 1.0 and secs < 600
    check(6, ok, f"zero-DVF exact={zero_exact}; integer err {int_err:.1e}, half-pixel err {half_err:.1e}; "
                 f"held-out EPE +4: {epe[4]:.3f}px, -4: {epe[-4]:.3f}px (<1); {secs:.0f}s (<600s)")


def test_criterion_7_classifier_separability(desk_cfg, desk_prepared, accept_root):
    t0 = time.time()
    cfg = _override(desk_cfg, mtfs={"tasks": [3], "epochs": 5})
    run, doc = harness.cmd_mtfs_train(cfg, desk_prepared, [3], root=accept_root)
    train = load_prepared(desk_prepared, "train").subset(cfg["mtfs"]["max_train_pairs"])
    acc = classifier_accuracy(load_mtfs(run.output(doc, "checkpoint")), train)
    secs = time.time() - t0
    check(7, acc >= 0.95 and secs < 300, f"task-3-only train accuracy after 5 epochs {acc:.4f} (>=0.95); {secs:.0f}s (<300s)")


@pytest.fixture(scope="session")
def table1(desk_cfg, desk_prepared, accept_root):
    t0 = time.time()
    run, doc = harness.cmd_matrix(desk_cfg, "table1", root=accept_root)
    return run, doc, time.time() - t0


def test_criterion_8_table1_direction(table1):
    run, doc, secs = table1
    table = harness.read_table(run.output(doc, "table"))
    n_rep = doc["config"]["matrix"]["replicates"]
    complete = list(table) == list(harness.TABLE1_ROWS) and all(r["n_ok"] == n_rep for r in table.values())
    base = table["base"]["ssim_mean"]
    margins = {k: table[k]["ssim_mean"] - base for k in ("unet-mse", "unet-cfp")}
    style = {k: table[k]["style_l4_mean"] for k in ("unet-mse", "unet-cfp")}
    secs = doc["timings"]["seconds"]
    ok = complete and min(margins.values()) >= 0.02 and style["unet-cfp"] < style["unet-mse"] and secs <= 4 * 3600
    check(8, ok, f"SSIM base {base:.4f}, margin mse {margins['unet-mse']:+.4f}, cfp {margins['unet-cfp']:+.4f} (>=0.02); "
                 f"style_l4 cfp {style['unet-cfp']:.3e} vs mse {style['unet-mse']:.3e} (strictly lower); "
                 f"7 rows x {n_rep} seeds complete={complete}; {secs / 60:.0f} min (<=240)")


def test_criterion_9_table2_ablation(table1, desk_cfg, accept_root):
    run, doc = harness.cmd_matrix(desk_cfg, "table2", root=accept_root)
    table = harness.read_table(run.output(doc, "table"))
    n_rep = doc["config"]["matrix"]["replicates"]
    cfp_rows = [r for r in harness.TABLE2_ROWS if r.startswith("cfp-")]
    trained = all(table[r]["n_ok"] == n_rep for r in cfp_rows) and table["mse"]["n_ok"] == n_rep
    structure = len(cfp_rows) == 7 and "mse" in table and set(cfp_rows) <= set(table)
    ssim = {r: table[r]["ssim_mean"] for r in cfp_rows}
    best = ssim["cfp-123"] >= max(ssim["cfp-2"], ssim["cfp-3"])
    secs = doc["timings"]["seconds"]
    ok = trained and structure and best and secs <= 2 * 3600
    detail = ", ".join(f"{r[4:]}:{v:.4f}" for r, v in ssim.items())
    check(9, ok, f"all 7 subsets trained={trained}, rows ok={structure}; SSIM {detail}; "
                 f"{{1,2,3}} >= {{2}},{{3}}: {best}; {secs / 60:.0f} min (<=120, shared cells reused from table1)")


def test_criterion_10_determinism_and_persistence(tmp_path):
    t0 = time.time()
    cfg = harness.resolve_config("desk", {
        "phantom": {"n_pairs": 12},
        "translate": {"epochs": 2, "max_train_pairs": 8, "res_blocks_per_level": [1, 1, 1, 1]},
    }, [{"global": {"out_dir": str(tmp_path / "a")}}])
    root = tmp_path / "a"
    _, gen = harness.cmd_phantom_gen(cfg, root=root)
    prep_run, prep = harness.cmd_prep(cfg, harness.Run("phantom-gen", cfg, root=root).dir / gen["outputs"]["dataset"], root=root)
    prepared = prep_run.output(prep, "prepared")
    trun, tdoc = harness.cmd_translate_train(cfg, prepared, root=root)
    erun, edoc = harness.cmd_eval(cfg, prepared, trun.output(tdoc, "checkpoint"), root=root)
    t_again, t_again_doc = harness.rerun(trun.manifest_path, tmp_path / "b")
    e_again, e_again_doc = harness.rerun(erun.manifest_path, tmp_path / "b")
    same_ckpt = t_again.output(t_again_doc, "checkpoint").read_bytes() == trun.output(tdoc, "checkpoint").read_bytes()
    same_csv = e_again.output(e_again_doc, "csv").read_bytes() == erun.output(edoc, "csv").read_bytes()
    # evaluating the re-trained checkpoint gives the same CSV too
    e_new, e_new_doc = harness.cmd_eval(cfg, prepared, t_again.output(t_again_doc, "checkpoint"), root=tmp_path / "c")
    same_chain = e_new.output(e_new_doc, "csv").read_bytes() == erun.output(edoc, "csv").read_bytes()
    rng = np.random.default_rng(10)
    lossless = True
    for shape, domain in (((3, 5, 7), "HU"), ((1, 16, 16), "LAC"), ((2, 4, 4), "unitless")):
        vox = rng.uniform(-1000, 200, shape) if domain == "HU" else rng.uniform(0, 1, shape)
        if domain == "unitless":
            vox = (vox > 0.5).astype(np.uint8)
        v = Volume(vox, spacing=(0.7, 0.7, 2.5), value_domain=domain, provenance="roundtrip")
        back = load_volume(save_volume(v, tmp_path / f"vol_{domain}"))
        lossless &= np.array_equal(back.voxels, v.voxels) and back.voxels.dtype == v.voxels.dtype
        lossless &= back.spacing == v.spacing and back.value_domain == domain and back.provenance == "roundtrip"
    secs = time.time() - t0
    ok = same_ckpt and same_csv and same_chain and lossless and secs < 300
    check(10, ok, f"rerun checkpoint identical={same_ckpt}, eval CSV identical={same_csv}, via retrained model={same_chain}; "
                  f"container lossless={lossless}; {secs:.0f}s (<300s)")
