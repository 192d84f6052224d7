"""Multi-task feature selection: three heads on the shared autoencoder, trained jointly.

Task 1 recovers the input slice, task 2 registers an augmented CBCT slice to
its CT partner through a coarse-to-fine pyramid decoder, task 3 classifies
modality (CBCT=0, CT=1). With two or more tasks active the losses are
combined with gradnorm weights.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .data import SliceSet
from .errors import ShapeError, TrainingError, ValidationError
from .fae import FaeConfig, FeatureAutoencoder, build_fae, conv3x3, he_init_
from .seeding import derive_seed, torch_generator

TASKS = (1, 2, 3)
TASK_NAMES = {1: "recovery", 2: "registration", 3: "classification"}
ABLATION_SUBSETS = ((1,), (2,), (3,), (1, 2), (2, 3), (1, 3), (1, 2, 3))
RECOVERY_CHANNELS = (256, 256, 256, 128, 128, 64, 64, 32, 1)
UPSAMPLE_BEFORE = (3, 5, 7)  # zero-based conv indices preceded by a 2x upsample


# --------------------------------------------------------------------------
# heads


class RecoveryHead(nn.Module):
    """Nine 3x3 convolutions decoding the deepest feature map back to one image channel."""

    def __init__(self, in_channels: int, width_multiplier: float = 1.0):
        super().__init__()
        chans = [max(1, int(round(c * width_multiplier))) for c in RECOVERY_CHANNELS[:-1]] + [1]
        self.out_channels = tuple(chans)
        convs, cin = [], in_channels
        for c in chans:
            convs.append(conv3x3(cin, c))
            cin = c
        self.convs = nn.ModuleList(convs)

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            if i in UPSAMPLE_BEFORE:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
        return x


def build_recovery_head(cfg: FaeConfig, seed: int = 0, in_channels: int | None = None) -> RecoveryHead:
    cfg.validate()
    deepest = cfg.channels[3]
    if in_channels is not None and in_channels != deepest:
        raise ValidationError(f"recovery head input channels {in_channels} != FAE deepest channels {deepest}")
    head = RecoveryHead(deepest, cfg.width_multiplier)
    he_init_(head, torch_generator(seed))
    return head


def _zero_(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class _DvfPredictor(nn.Sequential):
    def __init__(self, cin: int, hidden: int):
        super().__init__(conv3x3(cin, hidden), nn.ReLU(), conv3x3(hidden, hidden), nn.ReLU(), conv3x3(hidden, 2))

    def zero_output(self):
        _zero_(self[-1])


class RegistrationHead(nn.Module):
    """Dual-pyramid decoder: coarse DVF from level 4, residual refinement down to level 1.

    DVFs are in pixel units of their own level; moving from level ``l+1`` to
    ``l`` upsamples the field and doubles it.
    """

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        self.channels = tuple(channels)
        c4 = self.channels[3]
        self.coarse = _DvfPredictor(2 * c4, max(c4, 16))
        self.refine = nn.ModuleList(_DvfPredictor(2 * c + 2, max(c, 16)) for c in self.channels[:3])

    def zero_outputs(self):
        self.coarse.zero_output()
        for r in self.refine:
            r.zero_output()

    def forward(self, pyr_moving: Sequence[torch.Tensor], pyr_fixed: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(pyr_moving) != 4 or len(pyr_fixed) != 4:
            raise ShapeError("registration head expects two 4-level pyramids")
        for a, b in zip(pyr_moving, pyr_fixed):
            if a.shape != b.shape:
                raise ShapeError(f"pyramid level mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        dvf = self.coarse(torch.cat([pyr_moving[3], pyr_fixed[3]], 1))
        for level in (2, 1, 0):
            size = pyr_fixed[level].shape[-2:]
            dvf = 2.0 * F.interpolate(dvf, size=size, mode="bilinear", align_corners=False)
            warped = warp(pyr_moving[level], dvf)
            dvf = dvf + self.refine[level](torch.cat([warped, pyr_fixed[level], dvf], 1))
        return dvf


def build_registration_head(cfg: FaeConfig, seed: int = 0) -> RegistrationHead:
    cfg.validate()
    head = RegistrationHead(cfg.channels)
    he_init_(head, torch_generator(seed))
    head.zero_outputs()
    return head


class ClassifierHead(nn.Module):
    """Global average pool over the deepest map, then one fully connected layer to 2 logits."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, 2)

    def forward(self, x):
        return self.fc(x.mean(dim=(2, 3)))


def build_classifier_head(cfg: FaeConfig, seed: int = 0) -> ClassifierHead:
    cfg.validate()
    head = ClassifierHead(cfg.channels[3])
    he_init_(head, torch_generator(seed))
    return head


# --------------------------------------------------------------------------
# warping and losses


def warp(image: torch.Tensor, dvf: torch.Tensor) -> torch.Tensor:
    """Backward warp: ``out[y, x] = image[y + dy, x + dx]``, bilinear, zero outside.

    ``dvf[:, 0]`` is dx (columns), ``dvf[:, 1]`` is dy (rows). A zero field
    returns the image bit-exactly. Differentiable in both arguments.
    """
    if image.dim() != 4 or dvf.dim() != 4 or dvf.shape[1] != 2:
        raise ShapeError(f"warp expects (N,C,H,W) image and (N,2,H,W) dvf, got {tuple(image.shape)}, {tuple(dvf.shape)}")
    if image.shape[0] != dvf.shape[0] or image.shape[-2:] != dvf.shape[-2:]:
        raise ShapeError(f"warp shape mismatch: image {tuple(image.shape)} vs dvf {tuple(dvf.shape)}")
    n, c, h, w = image.shape
    ys = torch.arange(h, dtype=dvf.dtype, device=dvf.device).view(1, h, 1)
    xs = torch.arange(w, dtype=dvf.dtype, device=dvf.device).view(1, 1, w)
    x = xs + dvf[:, 0]
    y = ys + dvf[:, 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = image.reshape(n, c, h * w)

    def corner(yi, xi):
        valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).to(image.dtype)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(n, 1, h * w).expand(n, c, h * w)
        return torch.gather(flat, 2, idx).reshape(n, c, h, w) * valid.unsqueeze(1)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    return (
        corner(y0, x0) * ((1 - wx) * (1 - wy))
        + corner(y0, x0 + 1) * (wx * (1 - wy))
        + corner(y0 + 1, x0) * ((1 - wx) * wy)
        + corner(y0 + 1, x0 + 1) * (wx * wy)
    )


def rigid_dvf(rotation_deg: torch.Tensor, dx: torch.Tensor, dy: torch.Tensor, size: int) -> torch.Tensor:
    """Per-sample DVF that, through :func:`warp`, moves content by the rigid motion."""
    n = rotation_deg.shape[0]
    c = (size - 1) / 2.0
    grid = torch.arange(size, dtype=torch.float32)
    yy = grid.view(1, size, 1).expand(n, size, size)
    xx = grid.view(1, 1, size).expand(n, size, size)
    th = torch.deg2rad(rotation_deg).view(n, 1, 1)
    px = xx - c - dx.view(n, 1, 1)
    py = yy - c - dy.view(n, 1, 1)
    sx = torch.cos(th) * px + torch.sin(th) * py + c
    sy = -torch.sin(th) * px + torch.cos(th) * py + c
    return torch.stack([sx - xx, sy - yy], 1)


def _same_shape(a: torch.Tensor, b: torch.Tensor, name: str):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def recovery_loss(decoded: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(decoded, target, "recovery_loss")
    return (decoded - target).pow(2).mean()


def registration_loss(warped: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
    """MSE between a warped image and its fixed partner; usable in either direction."""
    _same_shape(warped, fixed, "registration_loss")
    return (warped - fixed).pow(2).mean()


def classification_loss(logits: torch.Tensor, label) -> torch.Tensor:
    label = torch.as_tensor(label, dtype=torch.long, device=logits.device)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    label = label.reshape(-1)
    if not bool(((label == 0) | (label == 1)).all()):
        raise ValidationError(f"labels must be 0 (CBCT) or 1 (CT), got {label.tolist()}")
    return F.cross_entropy(logits, label)


# --------------------------------------------------------------------------
# gradnorm


@dataclass
class TaskWeights:
    w: np.ndarray
    initial_losses: np.ndarray | None = None
    alpha: float = 1.5
    grad_norms: np.ndarray | None = None

    @classmethod
    def uniform(cls, n_tasks: int, alpha: float = 1.5) -> "TaskWeights":
        return cls(np.ones(n_tasks), None, alpha)

    @property
    def n_tasks(self) -> int:
        return len(self.w)


def _shared_param(shared_layer) -> torch.Tensor:
    if isinstance(shared_layer, nn.Module):
        return shared_layer.weight
    return shared_layer


def combine(losses: Sequence[torch.Tensor], tw: TaskWeights) -> torch.Tensor:
    return sum(float(w) * l for w, l in zip(tw.w, losses))


def gradnorm_step(
    losses: Sequence[torch.Tensor],
    tw: TaskWeights,
    shared_layer,
    lr_w: float = 0.025,
    task_ids: Sequence[object] | None = None,
) -> TaskWeights:
    """One gradnorm update of the task weights.

    Gradient norms ``G_i = ||d(w_i L_i)/dW||`` are taken on ``shared_layer``.
    Targets ``mean(G) * r_i**alpha`` use inverse training rates
    ``r_i = (L_i/L_i(0)) / mean_j(L_j/L_j(0))`` and are held constant while
    ``sum_i |G_i - target_i|`` is differentiated with respect to ``w``. After
    the step weights are clamped at 1e-4 and rescaled to sum to the task count.
    The graph behind ``losses`` is retained.
    """
    task_ids = list(task_ids) if task_ids is not None else list(range(len(losses)))
    if len(losses) != tw.n_tasks:
        raise ValidationError(f"{len(losses)} losses for {tw.n_tasks} task weights")
    values = []
    for tid, loss in zip(task_ids, losses):
        v = float(loss.detach())
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss for task {tid}: {v}", task=tid)
        values.append(v)
    L = torch.tensor(values, dtype=torch.float64)
    init = torch.tensor(tw.initial_losses if tw.initial_losses is not None else values, dtype=torch.float64)
    W = _shared_param(shared_layer)
    raw = []
    for loss in losses:
        (g,) = torch.autograd.grad(loss, W, retain_graph=True, allow_unused=True)
        raw.append(0.0 if g is None else float(g.detach().double().norm()))
    g = torch.tensor(raw, dtype=torch.float64)
    w = torch.tensor(np.asarray(tw.w, dtype=np.float64), requires_grad=True)
    G = w * g
    ratio = L / init.clamp_min(1e-12)
    r = ratio / ratio.mean().clamp_min(1e-12)
    target = (G.mean() * r.pow(tw.alpha)).detach()
    (G - target).abs().sum().backward()
    with torch.no_grad():
        new_w = (w - lr_w * w.grad).clamp_min(1e-4)
        new_w = new_w * (len(values) / new_w.sum())
    return TaskWeights(new_w.numpy().copy(), init.numpy().copy(), tw.alpha, (new_w.detach() * g).numpy())


# --------------------------------------------------------------------------
# network + training


class MtfsNetwork(nn.Module):
    def __init__(self, fae: FeatureAutoencoder, tasks: Sequence[int], seed: int):
        super().__init__()
        self.fae = fae
        self.tasks = tuple(sorted(tasks))
        cfg = fae.cfg
        self.recovery = build_recovery_head(cfg, derive_seed(seed, "head1")) if 1 in self.tasks else None
        self.registration = build_registration_head(cfg, derive_seed(seed, "head2")) if 2 in self.tasks else None
        self.classifier = build_classifier_head(cfg, derive_seed(seed, "head3")) if 3 in self.tasks else None

    def heads(self) -> dict[str, nn.Module]:
        out = {}
        for name in ("recovery", "registration", "classifier"):
            m = getattr(self, name)
            if m is not None:
                out[name] = m
        return out


@dataclass(frozen=True)
class MtfsConfig:
    fae: FaeConfig = field(default_factory=FaeConfig)
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 1.5
    lr_w: float = 0.025
    recovery_modalities: str = "both"
    aug_rotation: float = 10.0
    aug_offset: float = 10.0
    reg_direction: str = "cbct_to_ct"
    max_train_pairs: int | None = None

    def validate(self) -> "MtfsConfig":
        self.fae.validate()
        if self.recovery_modalities not in ("both", "ct"):
            raise ValidationError(f"recovery_modalities must be 'both' or 'ct', got {self.recovery_modalities!r}")
        if self.reg_direction not in ("cbct_to_ct", "ct_to_cbct"):
            raise ValidationError(f"reg_direction must be 'cbct_to_ct' or 'ct_to_cbct', got {self.reg_direction!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValidationError("epochs, batch_size and lr must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fae"] = self.fae.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MtfsConfig":
        d = dict(d)
        d["fae"] = FaeConfig.from_dict(d["fae"])
        return cls(**d)


@dataclass
class MtfsResult:
    network: MtfsNetwork
    log: list
    task_weights: TaskWeights | None
    checkpoint: Path | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def augment_rigid(images: torch.Tensor, rng: np.random.Generator, max_rot: float, max_off: float) -> torch.Tensor:
    n, _, s, _ = images.shape
    rot = torch.tensor(rng.uniform(-max_rot, max_rot, n), dtype=torch.float32)
    dx = torch.tensor(rng.uniform(-max_off, max_off, n), dtype=torch.float32)
    dy = torch.tensor(rng.uniform(-max_off, max_off, n), dtype=torch.float32)
    return warp(images, rigid_dvf(rot, dx, dy, s))


def _task_losses(net: MtfsNetwork, cb: torch.Tensor, ct: torch.Tensor, cfg: MtfsConfig, rng) -> tuple[dict, dict]:
    tasks = net.tasks
    losses, stats = {}, {}
    b = cb.shape[0]
    taps = None
    if 1 in tasks or 3 in tasks:
        both = torch.cat([cb, ct], 0)
        taps = net.fae(both)
        deep = taps[-1]
        if 1 in tasks:
            recon = net.recovery(deep)
            if cfg.recovery_modalities == "both":
                losses[1] = recovery_loss(recon, both)
            else:
                losses[1] = recovery_loss(recon[b:], ct)
        if 3 in tasks:
            logits = net.classifier(deep)
            labels = torch.cat([torch.zeros(b, dtype=torch.long), torch.ones(b, dtype=torch.long)])
            losses[3] = classification_loss(logits, labels)
            stats["accuracy"] = float((logits.argmax(1) == labels).float().mean())
    if 2 in tasks:
        src, dst = (cb, ct) if cfg.reg_direction == "cbct_to_ct" else (ct, cb)
        moving = augment_rigid(src, rng, cfg.aug_rotation, cfg.aug_offset)
        pyr_m = net.fae(moving)
        if taps is not None:
            pyr_f = [t[b:] for t in taps] if dst is ct else [t[:b] for t in taps]
        else:
            pyr_f = net.fae(dst)
        dvf = net.registration(pyr_m, pyr_f)
        losses[2] = registration_loss(warp(moving, dvf), dst)
    return losses, stats


def train_mtfs(
    dataset: SliceSet,
    task_subset: Sequence[int],
    cfg: MtfsConfig,
    seed: int,
    out_dir: str | Path | None = None,
) -> MtfsResult:
    """Train the shared autoencoder with the selected heads.

    Writes ``train_log.jsonl`` and ``mtfs.npz`` under ``out_dir`` when given.
    A non-finite loss aborts with :class:`TrainingError` after the log so far
    has been written.
    """
    tasks = tuple(sorted(set(task_subset)))
    if not tasks:
        raise ValidationError("task_subset must contain at least one task")
    if any(t not in TASKS for t in tasks):
        raise ValidationError(f"tasks must be drawn from {TASKS}, got {tasks}")
    cfg.validate()
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if dataset.ct.shape[-1] != cfg.fae.input_size:
        raise ShapeError(f"dataset side {dataset.ct.shape[-1]} != fae input_size {cfg.fae.input_size}")
    data = dataset.subset(cfg.max_train_pairs)
    torch.manual_seed(derive_seed(seed, "mtfs-torch"))
    fae = build_fae(cfg.fae, derive_seed(seed, "fae"))
    net = MtfsNetwork(fae, tasks, seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(derive_seed(seed, "mtfs-batches"))
    tw = TaskWeights.uniform(len(tasks), cfg.alpha) if len(tasks) >= 2 else None
    cb_all = torch.from_numpy(data.cbct).unsqueeze(1)
    ct_all = torch.from_numpy(data.ct).unsqueeze(1)
    out_dir = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []
    shared = fae.last_shared_conv

    def flush():
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "train_log.jsonl", "w") as fh:
                for rec in log:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        net.train()
        sums = {t: 0.0 for t in tasks}
        acc_sum, n_batches = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, rng):
            cb, ct = cb_all[idx], ct_all[idx]
            losses, stats = _task_losses(net, cb, ct, cfg, rng)
            ordered = [losses[t] for t in tasks]
            for t, l in zip(tasks, ordered):
                if not torch.isfinite(l):
                    log.append({"epoch": epoch, "aborted": True, "task": t, "loss": float(l.detach())})
                    flush()
                    raise TrainingError(f"non-finite {TASK_NAMES[t]} loss at epoch {epoch}", task=t)
            if tw is not None:
                total = combine(ordered, tw)
                new_tw = gradnorm_step(ordered, tw, shared, cfg.lr_w, task_ids=tasks)
            else:
                total = ordered[0]
                new_tw = None
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if new_tw is not None:
                tw = new_tw
            for t, l in zip(tasks, ordered):
                sums[t] += float(l.detach())
            acc_sum += stats.get("accuracy", 0.0)
            n_batches += 1
        rec = {
            "epoch": epoch,
            "losses": {TASK_NAMES[t]: sums[t] / n_batches for t in tasks},
            "weights": {TASK_NAMES[t]: float(w) for t, w in zip(tasks, tw.w)} if tw is not None else {TASK_NAMES[tasks[0]]: 1.0},
            "wall_time": time.perf_counter() - t0,
        }
        if 3 in tasks:
            rec["train_accuracy_running"] = acc_sum / n_batches
        log.append(rec)
        flush()
    net.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_mtfs(out_dir / "mtfs.npz", net, cfg, seed, tw)
    return MtfsResult(net, log, tw, ckpt)


def save_mtfs(path, net: MtfsNetwork, cfg: MtfsConfig, seed: int, tw: TaskWeights | None) -> Path:
    meta = {
        "kind": "mtfs",
        "fae_config": cfg.fae.to_dict(),
        "mtfs_config": cfg.to_dict(),
        "tasks": list(net.tasks),
        "seed": int(seed),
        "task_weights": None if tw is None else [float(w) for w in tw.w],
    }
    return save_checkpoint(path, {"fae": net.fae, **net.heads()}, meta)


def load_mtfs(path) -> MtfsNetwork:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "mtfs":
        raise ValidationError(f"{path} is not an MTFS checkpoint")
    cfg = MtfsConfig.from_dict(header["mtfs_config"])
    net = MtfsNetwork(FeatureAutoencoder(cfg.fae), header["tasks"], header["seed"])
    load_into(net.fae, arrays, "fae")
    for name, head in net.heads().items():
        load_into(head, arrays, name)
    net.eval()
    return net


@torch.no_grad()
def classifier_accuracy(net: MtfsNetwork, data: SliceSet, batch_size: int = 64) -> float:
    if net.classifier is None:
        raise ValidationError("network has no classifier head")
    net.eval()
    correct = 0
    for i in range(0, len(data), batch_size):
        cb = torch.from_numpy(data.cbct[i : i + batch_size]).unsqueeze(1)
        ct = torch.from_numpy(data.ct[i : i + batch_size]).unsqueeze(1)
        logits = net.classifier(net.fae.deepest(torch.cat([cb, ct], 0)))
        labels = torch.cat([torch.zeros(len(cb), dtype=torch.long), torch.ones(len(ct), dtype=torch.long)])
        correct += int((logits.argmax(1) == labels).sum())
    return correct / (2 * len(data))


@torch.no_grad()
def predict_dvf(net: MtfsNetwork, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
    if net.registration is None:
        raise ValidationError("network has no registration head")
    net.eval()
    return net.registration(net.fae(moving), net.fae(fixed))
