"""Encoders, generators and discriminators for disentangled translation.

Each modality gets its own content encoder, attribute encoder, generator and
patch discriminator; a single content discriminator tries to tell which
modality a content code came from.  Images are ``(B, 1, H, W)`` tensors in
``[-1, 1]``, content codes ``(B, C, H', W')``, attribute codes ``(B, C_a)``.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import NetConfig


class ShapeError(ValueError):
    pass


def _conv_block(cin, cout, k, stride, norm=True):
    layers = [nn.Conv2d(cin, cout, k, stride=stride, padding=(k - 1) // 2 if stride == 1 else 1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return layers


class ResBlock(nn.Module):
    def __init__(self, channels: int, extra: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels + extra, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(channels)

    def forward(self, x, inject=None):
        h = x if inject is None else torch.cat([x, inject], dim=1)
        h = F.relu(self.norm1(self.conv1(h)))
        return x + self.norm2(self.conv2(h))


class ContentEncoder(nn.Module):
    """Three downsampling blocks (stride 1, 2, 2) followed by residual blocks."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        b = cfg.base_channels
        self.content_size = cfg.content_size
        self.down = nn.Sequential(
            *_conv_block(1, b, cfg.edge_kernel, 1),
            *_conv_block(b, 2 * b, 4, 2),
            *_conv_block(2 * b, cfg.content_channels, 4, 2),
        )
        self.res = nn.ModuleList(ResBlock(cfg.content_channels) for _ in range(cfg.n_res_content))

    def forward(self, x):
        h = self.down(x)
        if h.shape[-1] != self.content_size or h.shape[-2] != self.content_size:
            h = F.adaptive_avg_pool2d(h, self.content_size)
        for block in self.res:
            h = block(h)
        return h


class AttributeEncoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        b = cfg.base_channels
        chans = [1, b, 2 * b, 4 * b, 4 * b]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += _conv_block(cin, cout, 4, 2, norm=False)
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], cfg.attr_channels)

    def forward(self, x):
        h = self.body(x).mean(dim=(2, 3))
        return self.head(h)


class Generator(nn.Module):
    """Residual blocks with the combined attribute map injected into every
    block, two transposed-conv upsampling blocks and a 1x1 projection to ``tanh``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c, b = cfg.content_channels, cfg.base_channels
        self.work_size = cfg.image_size // 4
        self.attr_in = 2 * cfg.attr_channels
        self.res = nn.ModuleList(ResBlock(c, extra=self.attr_in) for _ in range(cfg.n_res_gen))
        self.up1 = nn.Sequential(nn.ConvTranspose2d(c, 2 * b, 4, 2, 1), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(2 * b, b, 4, 2, 1), nn.ReLU(inplace=True))
        self.out = nn.Conv2d(b, 1, 1)

    def forward(self, content, attr):
        if attr.shape[1] != self.attr_in:
            raise ShapeError(f"combined attribute has {attr.shape[1]} channels, expected {self.attr_in}")
        if attr.dim() == 2:
            attr = attr[:, :, None, None].expand(-1, -1, content.shape[2], content.shape[3])
        if attr.shape[0] != content.shape[0] or attr.shape[2:] != content.shape[2:]:
            raise ShapeError(f"content {tuple(content.shape)} and attribute {tuple(attr.shape)} disagree")
        if content.shape[-1] != self.work_size:
            size = (self.work_size, self.work_size)
            content = F.interpolate(content, size=size, mode="bilinear", align_corners=False)
            attr = F.interpolate(attr, size=size, mode="bilinear", align_corners=False)
        h = content
        for block in self.res:
            h = block(h, attr)
        h = self.up2(self.up1(h))
        return torch.tanh(self.out(h))


class PatchDiscriminator(nn.Module):
    """Multi-scale patch discriminator; returns one score grid per scale."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.scales = nn.ModuleList()
        for _ in range(cfg.disc_scales):
            d = cfg.disc_channels
            layers = [nn.Conv2d(1, d, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            for _ in range(cfg.disc_layers - 1):
                layers += [nn.Conv2d(d, 2 * d, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
                d *= 2
            layers.append(nn.Conv2d(d, 1, 3, 1, 1))
            self.scales.append(nn.Sequential(*layers))

    def forward(self, x):
        outs = []
        for i, net in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            outs.append(net(x))
        return outs


class ContentDiscriminator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.content_channels
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, c, 3, 2, 1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Linear(c, cfg.num_modalities)

    def forward(self, z):
        return self.head(self.body(z).mean(dim=(2, 3)))


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ModelBundle(nn.Module):
    """All trainable components of the translation model."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        k = cfg.num_modalities
        n_content = 1 if cfg.share_content_encoder else k
        self.content_encoders = nn.ModuleList(ContentEncoder(cfg) for _ in range(n_content))
        self.attribute_encoders = nn.ModuleList(AttributeEncoder(cfg) for _ in range(k))
        self.generators = nn.ModuleList(Generator(cfg) for _ in range(k))
        self.domain_discriminators = nn.ModuleList(PatchDiscriminator(cfg) for _ in range(k))
        self.content_discriminator = ContentDiscriminator(cfg)
        init_weights(self, cfg.init_std)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def generator_parameters(self):
        for part in (self.content_encoders, self.attribute_encoders, self.generators):
            yield from part.parameters()

    def discriminator_parameters(self):
        yield from self.domain_discriminators.parameters()
        yield from self.content_discriminator.parameters()

    def _check_image(self, m):
        s = self.cfg.image_size
        if m.dim() != 4 or m.shape[1] != 1 or m.shape[2] != s or m.shape[3] != s:
            raise ShapeError(f"expected images of shape (B, 1, {s}, {s}), got {tuple(m.shape)}")

    def _check_modality(self, modality):
        if not 0 <= modality < self.cfg.num_modalities:
            raise ValueError(f"unknown modality {modality}")

    def encode_content(self, m, modality: int):
        self._check_image(m)
        self._check_modality(modality)
        enc = self.content_encoders[0 if self.cfg.share_content_encoder else modality]
        return enc(m)

    def encode_attribute(self, m, modality: int):
        self._check_image(m)
        self._check_modality(modality)
        return self.attribute_encoders[modality](m)

    def generate(self, content, attribute_combined, target_modality: int):
        self._check_modality(target_modality)
        return self.generators[target_modality](content, attribute_combined)

    def discriminate_domain(self, m, modality: int):
        self._check_image(m)
        self._check_modality(modality)
        return self.domain_discriminators[modality](m)

    def discriminate_content(self, z):
        cfg = self.cfg
        if z.dim() != 4 or z.shape[1] != cfg.content_channels:
            raise ShapeError(f"expected content codes with {cfg.content_channels} channels, got {tuple(z.shape)}")
        return self.content_discriminator(z)


def write_npz(path, arrays: dict) -> None:
    """``np.savez`` with fixed member timestamps so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED, allowZip64=True) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def save_model(bundle: ModelBundle, path: str | Path) -> None:
    """Write ``<path>`` (npz of parameters keyed by component) and ``<path>.json``."""
    path = Path(path)
    write_npz(path, {k: v.detach().cpu().numpy() for k, v in bundle.state_dict().items()})
    meta = {"net": bundle.cfg.__dict__, "parameter_count": bundle.parameter_count}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path: str | Path) -> ModelBundle:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    bundle = ModelBundle(NetConfig(**meta["net"]))
    with np.load(path) as data:
        load_state_arrays(bundle, {k: data[k] for k in data.files})
    return bundle


def load_state_arrays(bundle: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = bundle.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for key, ref in state.items():
        if tuple(arrays[key].shape) != tuple(ref.shape):
            raise ShapeError(f"{key}: checkpoint shape {arrays[key].shape} != model shape {tuple(ref.shape)}")
    bundle.load_state_dict({k: torch.from_numpy(np.array(arrays[k])) for k in state})
