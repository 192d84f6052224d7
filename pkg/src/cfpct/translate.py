"""CBCT-to-CT translation networks trained with pixel MSE or the feature-pyramid loss.

Three model kinds share one generator, a residual U-Net with channel
attention (CAR-U-Net):

* ``unet``: generator alone, reconstruction loss only.
* ``gan``: generator plus a least-squares patch discriminator.
* ``cyclegan``: two generators and two discriminators, cycle consistency as
  mean absolute difference, plus the paired reconstruction term in both
  directions (switch off with ``paired_recon=False``).

``loss_kind`` picks MSE or CFP for the reconstruction term of every variant.
The loss net is frozen and never handed to an optimizer.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cfp import CfpConfig, cfp_loss
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .data import SliceSet
from .errors import ConfigurationError, DomainError, ShapeError, TrainingError, ValidationError
from .fae import FeatureAutoencoder, ResBlock, conv3x3, freeze, he_init_, load_fae
from .pipeline import Volume
from .seeding import derive_seed, torch_generator

MODEL_KINDS = ("unet", "gan", "cyclegan")
LOSS_KINDS = ("mse", "cfp")


@dataclass(frozen=True)
class TranslateConfig:
    model_kind: str = "unet"
    loss_kind: str = "mse"
    input_size: int = 256
    base_channels: int = 32
    res_blocks_per_level: tuple = (2, 4, 6, 8)
    se_reduction: int = 16
    adv_weight: float = 0.01
    cycle_weight: float = 10.0
    paired_recon: bool = True
    cfp: CfpConfig = field(default_factory=CfpConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 10
    max_train_pairs: int | None = None

    def validate(self) -> "TranslateConfig":
        if self.model_kind not in MODEL_KINDS:
            raise ValidationError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if len(self.res_blocks_per_level) != 4 or any(n < 0 for n in self.res_blocks_per_level):
            raise ValidationError(f"res_blocks_per_level must be 4 non-negative counts, got {self.res_blocks_per_level}")
        if self.adv_weight < 0 or self.cycle_weight < 0:
            raise ValidationError("adv_weight and cycle_weight must be >= 0")
        if self.input_size <= 0 or self.input_size % 16:
            raise ValidationError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        for k in range(5):
            c = self.base_channels * 2**k
            if c % self.se_reduction:
                raise ValidationError(f"SE reduction {self.se_reduction} does not divide channel count {c}")
        self.cfp.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["res_blocks_per_level"] = list(self.res_blocks_per_level)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TranslateConfig":
        d = dict(d)
        d["res_blocks_per_level"] = tuple(d["res_blocks_per_level"])
        d["cfp"] = CfpConfig(**d["cfp"])
        return cls(**d)


# --------------------------------------------------------------------------
# networks


class SEBlock(nn.Module):
    """Squeeze-and-excitation: sigmoid channel gates from globally pooled features."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ValidationError(f"channels {channels} not divisible by reduction {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(x.mean(dim=(2, 3))))))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None]


class EncoderLevel(nn.Module):
    def __init__(self, cin: int, cout: int, n_blocks: int):
        super().__init__()
        self.conv = conv3x3(cin, cout)
        self.blocks = nn.ModuleList(ResBlock(cout) for _ in range(n_blocks))

    def forward(self, x):
        x = torch.relu(self.conv(x))
        for b in self.blocks:
            x = b(x)
        return x


class DecoderLevel(nn.Module):
    def __init__(self, cin: int, cout: int, reduction: int):
        super().__init__()
        self.up = conv3x3(cin, cout)
        self.se = SEBlock(cout, reduction)
        self.conv1 = conv3x3(2 * cout, cout)
        self.conv2 = conv3x3(cout, cout)

    def forward(self, x, skip):
        x = torch.relu(self.up(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = torch.cat([x, self.se(skip)], 1)
        return torch.relu(self.conv2(torch.relu(self.conv1(x))))


class CarUNet(nn.Module):
    """Residual U-Net with SE gates on every skip and a global input-to-output skip.

    Four encoder levels with ``res_blocks_per_level`` residual blocks each,
    four max-pool downsamplings, a two-conv bottleneck, and a decoder that
    concatenates SE-gated encoder features. The last layer is a zero-initialised
    1x1 convolution, so the untrained network is the identity.
    """

    def __init__(self, base: int, res_blocks=(2, 4, 6, 8), reduction: int = 16):
        super().__init__()
        ch = [base * 2**k for k in range(5)]
        self.encoder = nn.ModuleList(
            EncoderLevel(1 if k == 0 else ch[k - 1], ch[k], res_blocks[k]) for k in range(4)
        )
        self.bottleneck = nn.Sequential(conv3x3(ch[3], ch[4]), nn.ReLU(), conv3x3(ch[4], ch[4]), nn.ReLU())
        self.decoder = nn.ModuleList(DecoderLevel(ch[k + 1], ch[k], reduction) for k in reversed(range(4)))
        self.head = nn.Conv2d(ch[0], 1, 1)

    def forward(self, x):
        skips, h = [], x
        for level in self.encoder:
            h = level(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottleneck(h)
        for level, skip in zip(self.decoder, reversed(skips)):
            h = level(h, skip)
        return x + self.head(h)

    def se_blocks(self) -> list[SEBlock]:
        return [d.se for d in self.decoder]


def build_car_unet(cfg: TranslateConfig, seed: int = 0) -> CarUNet:
    cfg.validate()
    net = CarUNet(cfg.base_channels, cfg.res_blocks_per_level, cfg.se_reduction)
    n_blocks = max(sum(cfg.res_blocks_per_level), 1)
    he_init_(net, torch_generator(seed), residual_scale=1.0 / np.sqrt(n_blocks))
    nn.init.zeros_(net.head.weight)
    nn.init.zeros_(net.head.bias)
    return net


class PatchDiscriminator(nn.Module):
    """Four stride-2 4x4 convolutions then a 1-channel 3x3 score map."""

    def __init__(self, base: int):
        super().__init__()
        chans = [1, base, 2 * base, 4 * base, 8 * base]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1) for i in range(4))
        self.score = nn.Conv2d(chans[-1], 1, 3, padding=1)

    def forward(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.score(x)


def build_discriminator(cfg: TranslateConfig, seed: int = 0) -> PatchDiscriminator:
    cfg.validate()
    d = PatchDiscriminator(cfg.base_channels)
    he_init_(d, torch_generator(seed))
    return d


def ls_discriminator_loss(real_score: torch.Tensor, fake_score: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((real_score - 1).pow(2).mean() + fake_score.pow(2).mean())


def ls_generator_loss(fake_score: torch.Tensor) -> torch.Tensor:
    return (fake_score - 1).pow(2).mean()


class TranslationModel(nn.Module):
    """Container for the networks of one model kind. ``generator`` maps CBCT to sCT."""

    def __init__(self, cfg: TranslateConfig, seed: int):
        super().__init__()
        self.cfg = cfg
        self.generator = build_car_unet(cfg, derive_seed(seed, "G_AB"))
        self.discriminator = None
        self.generator_ba = None
        self.discriminator_a = None
        if cfg.model_kind in ("gan", "cyclegan"):
            self.discriminator = build_discriminator(cfg, derive_seed(seed, "D_B"))
        if cfg.model_kind == "cyclegan":
            self.generator_ba = build_car_unet(cfg, derive_seed(seed, "G_BA"))
            self.discriminator_a = build_discriminator(cfg, derive_seed(seed, "D_A"))

    def parts(self) -> dict[str, nn.Module]:
        names = ("generator", "discriminator", "generator_ba", "discriminator_a")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def generator_params(self):
        for n in ("generator", "generator_ba"):
            m = getattr(self, n)
            if m is not None:
                yield from m.parameters()

    def discriminator_params(self):
        for n in ("discriminator", "discriminator_a"):
            m = getattr(self, n)
            if m is not None:
                yield from m.parameters()


# --------------------------------------------------------------------------
# losses and training


class ReconLoss:
    """MSE or CFP between a synthetic image and its paired target (both ``(N,1,S,S)``)."""

    def __init__(self, kind: str, loss_net: FeatureAutoencoder | None = None, cfp_cfg: CfpConfig = CfpConfig()):
        if kind == "cfp" and loss_net is None:
            raise ConfigurationError("loss_kind='cfp' requires a trained FAE checkpoint")
        self.kind = kind
        self.loss_net = freeze(loss_net) if loss_net is not None else None
        self.cfp_cfg = cfp_cfg

    def __call__(self, fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
        if self.kind == "mse":
            return (fake - real).pow(2).mean()
        with torch.no_grad():
            target = self.loss_net(real)
        return cfp_loss(self.loss_net(fake), target, self.cfp_cfg)


def cycle_term(model: TranslationModel, cbct: torch.Tensor, ct: torch.Tensor) -> torch.Tensor:
    """``mean|x - G_BA(G_AB(x))| + mean|y - G_AB(G_BA(y))|``."""
    rec_cb = model.generator_ba(model.generator(cbct))
    rec_ct = model.generator(model.generator_ba(ct))
    return (cbct - rec_cb).abs().mean() + (ct - rec_ct).abs().mean()


def _generator_losses(model: TranslationModel, recon: ReconLoss, cb, ct) -> dict:
    cfg = model.cfg
    terms = {}
    fake_ct = model.generator(cb)
    if cfg.model_kind == "unet":
        terms["recon"] = recon(fake_ct, ct)
        return terms, fake_ct, None
    if cfg.model_kind == "gan":
        terms["recon"] = recon(fake_ct, ct)
        terms["adv"] = ls_generator_loss(model.discriminator(fake_ct))
        return terms, fake_ct, None
    fake_cb = model.generator_ba(ct)
    zero = fake_ct.new_zeros(())
    terms["recon"] = recon(fake_ct, ct) + recon(fake_cb, cb) if cfg.paired_recon else zero
    terms["adv"] = ls_generator_loss(model.discriminator(fake_ct)) + ls_generator_loss(model.discriminator_a(fake_cb))
    rec_cb = model.generator_ba(fake_ct)
    rec_ct = model.generator(fake_cb)
    terms["cycle"] = (cb - rec_cb).abs().mean() + (ct - rec_ct).abs().mean()
    return terms, fake_ct, fake_cb


def _generator_total(cfg: TranslateConfig, terms: dict) -> torch.Tensor:
    total = terms["recon"]
    if "adv" in terms:
        total = total + cfg.adv_weight * terms["adv"]
    if "cycle" in terms:
        total = total + cfg.cycle_weight * terms["cycle"]
    return total


def _discriminator_loss(model: TranslationModel, cb, ct, fake_ct, fake_cb) -> torch.Tensor:
    d = ls_discriminator_loss(model.discriminator(ct), model.discriminator(fake_ct.detach()))
    if fake_cb is not None:
        d = d + ls_discriminator_loss(model.discriminator_a(cb), model.discriminator_a(fake_cb.detach()))
    return d


@dataclass
class TranslateResult:
    model: TranslationModel
    log: list
    checkpoint: Path | None = None


def _resolve_loss_net(fae_checkpoint) -> FeatureAutoencoder | None:
    if fae_checkpoint is None:
        return None
    if isinstance(fae_checkpoint, FeatureAutoencoder):
        return fae_checkpoint
    return load_fae(fae_checkpoint)


def train_translation(
    dataset: SliceSet,
    fae_checkpoint,
    cfg: TranslateConfig,
    seed: int,
    out_dir: str | Path | None = None,
) -> TranslateResult:
    """Train one translation model; ``fae_checkpoint`` is a path, an FAE, or None (MSE only)."""
    cfg.validate()
    loss_net = _resolve_loss_net(fae_checkpoint)
    if cfg.loss_kind == "cfp" and loss_net is None:
        raise ConfigurationError("loss_kind='cfp' requires a trained FAE checkpoint")
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if dataset.ct.shape[-1] != cfg.input_size:
        raise ShapeError(f"dataset side {dataset.ct.shape[-1]} != input_size {cfg.input_size}")
    if loss_net is not None and loss_net.cfg.input_size != cfg.input_size:
        raise ConfigurationError(f"loss net input size {loss_net.cfg.input_size} != translation input size {cfg.input_size}")
    data = dataset.subset(cfg.max_train_pairs)
    torch.manual_seed(derive_seed(seed, "translate-torch"))
    model = TranslationModel(cfg, seed)
    recon = ReconLoss(cfg.loss_kind, loss_net, cfg.cfp)
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(model.generator_params(), lr=cfg.lr, betas=betas)
    disc = list(model.discriminator_params())
    opt_d = torch.optim.Adam(disc, lr=cfg.lr, betas=betas) if disc else None
    rng = np.random.default_rng(derive_seed(seed, "translate-batches"))
    cb_all = torch.from_numpy(data.cbct).unsqueeze(1)
    ct_all = torch.from_numpy(data.ct).unsqueeze(1)
    out_dir = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []

    def flush():
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "train_log.jsonl", "w") as fh:
                for rec in log:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        sums: dict[str, float] = {}
        n = 0
        for idx in _chunks(rng.permutation(len(data)), cfg.batch_size):
            cb, ct = cb_all[idx], ct_all[idx]
            terms, fake_ct, fake_cb = _generator_losses(model, recon, cb, ct)
            total = _generator_total(cfg, terms)
            if not torch.isfinite(total):
                log.append({"epoch": epoch, "aborted": True, "loss": float(total)})
                flush()
                raise TrainingError(f"non-finite generator loss at epoch {epoch}")
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()
            if opt_d is not None:
                d_loss = _discriminator_loss(model, cb, ct, fake_ct, fake_cb)
                if not torch.isfinite(d_loss):
                    log.append({"epoch": epoch, "aborted": True, "loss": float(d_loss)})
                    flush()
                    raise TrainingError(f"non-finite discriminator loss at epoch {epoch}")
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                terms["disc"] = d_loss
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(total.detach())
            n += 1
        log.append({"epoch": epoch, "losses": {k: v / n for k, v in sums.items()}, "wall_time": time.perf_counter() - t0})
        flush()
    model.eval()
    ckpt = save_translation(out_dir / "translate.npz", model, seed) if out_dir is not None else None
    return TranslateResult(model, log, ckpt)


def _chunks(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def save_translation(path, model: TranslationModel, seed: int) -> Path:
    meta = {"kind": "translate", "translate_config": model.cfg.to_dict(), "seed": int(seed)}
    return save_checkpoint(path, model.parts(), meta)


def load_translation(path) -> TranslationModel:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "translate":
        raise ValidationError(f"{path} is not a translation checkpoint")
    model = TranslationModel(TranslateConfig.from_dict(header["translate_config"]), header["seed"])
    for name, part in model.parts().items():
        load_into(part, arrays, name)
    model.eval()
    return model


@torch.no_grad()
def translate_slices(generator: nn.Module, slices: np.ndarray, batch_size: int = 64) -> np.ndarray:
    generator.eval()
    out = []
    for i in range(0, len(slices), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(slices[i : i + batch_size], dtype=np.float32)).unsqueeze(1)
        out.append(generator(x)[:, 0].numpy())
    if not out:
        return np.zeros_like(slices, dtype=np.float32)
    return np.clip(np.concatenate(out), 0.0, None).astype(np.float32)


def infer(model, cbct: Volume) -> Volume:
    """Synthetic CT for a preprocessed LAC CBCT volume, slice by slice.

    ``model`` is a :class:`TranslationModel` or a checkpoint path. Outputs are
    clamped at zero so they remain valid attenuation values.
    """
    if not isinstance(model, TranslationModel):
        model = load_translation(model)
    if cbct.value_domain != "LAC":
        raise DomainError(f"infer expects a LAC volume, got {cbct.value_domain}")
    size = model.cfg.input_size
    if cbct.shape[1:] != (size, size):
        raise ShapeError(f"volume slices {cbct.shape[1:]} do not match model size {size}")
    sct = translate_slices(model.generator, cbct.voxels)
    return cbct.with_voxels(sct, value_domain="LAC", provenance=f"sCT({cbct.provenance})")
