"""Toy ViT encoder with spectrally modulated projections, and the frozen style extractor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .hypernet import LAYOUTS, hypernet_shape_for
from .seeding import substream_seed
from .spectral import SpectralLayer, svd_factorize

ABLATION_MODES = ("frozen", "static_only", "hyper_only", "hybrid", "reversed", "dynamic_all")
ATTN = ("q", "k", "v", "o")
MLP = ("fc1", "fc2")


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 8
    mlp_ratio: int = 4
    injected_layers: list[int] = field(default_factory=lambda: [2, 4, 6])
    embed_dim: int = 64
    d_style: int = 32
    hyper_layout: str = "width:2r"
    hyper_activation: str = "relu"

    def __post_init__(self):
        for name in ("image_size", "patch_size", "d_model", "n_heads", "n_layers", "mlp_ratio", "embed_dim", "d_style"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("encoder.d_model must be divisible by encoder.n_heads")
        if self.image_size % self.patch_size:
            raise ConfigError("encoder.image_size must be divisible by encoder.patch_size")
        if any(not 1 <= i <= self.n_layers for i in self.injected_layers):
            raise ConfigError(f"encoder.injected_layers must lie in [1, {self.n_layers}]")
        if len(set(self.injected_layers)) != len(self.injected_layers):
            raise ConfigError("encoder.injected_layers has duplicates")
        if self.hyper_layout not in LAYOUTS:
            raise ConfigError(f"encoder.hyper_layout must be one of {sorted(LAYOUTS)}")
        if self.hyper_activation not in ("relu", "gelu"):
            raise ConfigError("encoder.hyper_activation must be relu or gelu")


def _gaussian(shape, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    # drawn in 64-bit so 32- and 64-bit models share the same base weights
    return torch.randn(shape, generator=generator, dtype=torch.float64) / math.sqrt(fan_in)


class StyleExtractor(nn.Module):
    """Frozen random conv stack with global average pooling: image -> style vector ``z``."""

    def __init__(self, d_style: int = 32, image_size: int = 32, seed: int = 0, bias: bool = False, widths=(16, 32)):
        super().__init__()
        self.image_size = image_size
        g = torch.Generator().manual_seed(seed)
        chans = (1, *widths, d_style)
        dtype = torch.get_default_dtype()
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            w = _gaussian((cout, cin, 3, 3), cin * 9, g) * math.sqrt(2.0)
            self.register_buffer(f"w{i}", w.to(dtype))
            b = torch.randn(cout, generator=g, dtype=torch.float64) * 0.1 if bias else torch.zeros(cout, dtype=torch.float64)
            self.register_buffer(f"b{i}", b.to(dtype))
        self.n_convs = len(chans) - 1

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        x = images.reshape(-1, 1, self.image_size, self.image_size)
        for i in range(self.n_convs):
            stride = 2 if i < self.n_convs - 1 else 1
            x = F.conv2d(x, getattr(self, f"w{i}"), getattr(self, f"b{i}"), stride=stride, padding=1)
            if i < self.n_convs - 1:
                x = F.relu(x)
        return x.mean(dim=(2, 3)).detach()


def extract_style(ex: StyleExtractor, image: torch.Tensor) -> torch.Tensor:
    return ex(image)


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig, g: torch.Generator):
        super().__init__()
        d, hidden = cfg.d_model, cfg.d_model * cfg.mlp_ratio
        dtype = torch.get_default_dtype()
        for name in ATTN:
            setattr(self, name, svd_factorize(_gaussian((d, d), d, g), dtype))
        self.fc1 = svd_factorize(_gaussian((hidden, d), d, g), dtype)
        self.fc2 = svd_factorize(_gaussian((d, hidden), hidden, g), dtype)
        self.n_heads = cfg.n_heads

    def spectral_layers(self) -> dict[str, SpectralLayer]:
        return {name: getattr(self, name) for name in ATTN + MLP}

    def forward(self, x: torch.Tensor, ds_attn=None, ds_mlp=None) -> torch.Tensor:
        B, T, d = x.shape
        dh = d // self.n_heads
        h = F.layer_norm(x, (d,))
        q, k, v = (getattr(self, n)(h, ds_attn).view(B, T, self.n_heads, dh).transpose(1, 2) for n in "qkv")
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        a = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.o(a, ds_attn)
        h = F.layer_norm(x, (d,))
        return x + self.fc2(F.gelu(self.fc1(h, ds_mlp)))


class Encoder(nn.Module):
    """Random-init frozen ViT backbone; only singular-value offsets, hypernets and the head train."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, mode: str = "hybrid"):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        dtype = torch.get_default_dtype()
        p, d = cfg.patch_size, cfg.d_model
        n_patches = (cfg.image_size // p) ** 2
        self.register_buffer("patch_weight", _gaussian((d, p * p), p * p, g).to(dtype))
        self.register_buffer("pos_embed", (0.5 * _gaussian((n_patches + 1, d), 1, g)).to(dtype))
        self.register_buffer("cls_token", (0.5 * _gaussian((d,), 1, g)).to(dtype))
        self.blocks = nn.ModuleList(Block(cfg, g) for _ in range(cfg.n_layers))
        self.proj = nn.Parameter(_gaussian((cfg.embed_dim, d), d, g).to(dtype))

        # hypernets get their own streams so their init is independent of construction order
        self.attn_hypernets = nn.ModuleDict()
        self.mlp_hypernets = nn.ModuleDict()
        for layer in cfg.injected_layers:
            for kind, bank in (("attn", self.attn_hypernets), ("mlp", self.mlp_hypernets)):
                hg = torch.Generator().manual_seed(substream_seed(seed, "hypernet", kind, layer))
                bank[str(layer)] = hypernet_shape_for(d, cfg.d_style, cfg.hyper_layout, cfg.hyper_activation, hg)
        self.mode = None
        set_ablation_mode(self, mode)

    def _dynamic_flags(self, layer: int) -> tuple[bool, bool]:
        injected = layer in self.cfg.injected_layers
        attn = injected and self.mode in ("hyper_only", "hybrid", "dynamic_all")
        mlp = injected and self.mode in ("reversed", "dynamic_all")
        return attn, mlp

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        B = images.shape[0]
        p, n = self.cfg.patch_size, self.cfg.image_size // self.cfg.patch_size
        x = images.reshape(B, n, p, n, p).permute(0, 1, 3, 2, 4).reshape(B, n * n, p * p)
        return x - 0.5

    def forward(self, images: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        s = self.cfg.image_size
        if images.ndim == 2:
            images = images[None]
        if images.shape[-2:] != (s, s):
            raise ShapeError(f"expected {s}x{s} images, got {tuple(images.shape[-2:])}")
        B = images.shape[0]
        x = self.patchify(images) @ self.patch_weight.T
        x = torch.cat([self.cls_token.expand(B, 1, -1), x], dim=1) + self.pos_embed
        for layer, blk in enumerate(self.blocks, start=1):
            attn_dyn, mlp_dyn = self._dynamic_flags(layer)
            if (attn_dyn or mlp_dyn) and z is None:
                raise ShapeError("a style vector is required when dynamic modulation is active")
            ds_attn = self.attn_hypernets[str(layer)](z) if attn_dyn else None
            ds_mlp = self.mlp_hypernets[str(layer)](z) if mlp_dyn else None
            x = blk(x, ds_attn, ds_mlp)
        cls = F.layer_norm(x[:, 0], (self.cfg.d_model,))
        return F.normalize(cls @ self.proj.T, dim=-1)

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint learning-rate groups: static offsets plus head, and hypernetworks."""
        static, hyper, seen = [self.proj], [], {id(self.proj)}
        for blk in self.blocks:
            for layer in blk.spectral_layers().values():
                p = layer.delta_s_static
                if layer.static_enabled and id(p) not in seen:
                    static.append(p)
                    seen.add(id(p))
        for bank in (self.attn_hypernets, self.mlp_hypernets):
            for net in bank.values():
                hyper.extend(p for p in net.parameters() if p.requires_grad)
        return {"static": static, "hyper": hyper}

    def num_trainable(self) -> int:
        return sum(p.numel() for ps in self.trainable_groups().values() for p in ps)


def set_ablation_mode(enc: Encoder, mode: str) -> Encoder:
    """Switch which offset pathways exist and train.

    frozen: none. static_only: MLP static. hyper_only: attention dynamic at
    injected layers. hybrid: both of the above. reversed: attention static (q/k
    and v/o share one offset vector each, matching the MLP parameter count),
    fc1 dynamic at injected layers. dynamic_all: hybrid plus fc1 dynamic.
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; choose from {ABLATION_MODES}")
    enc.mode = mode
    static_mlp = mode in ("static_only", "hybrid", "dynamic_all")
    static_attn = mode == "reversed"
    for layer, blk in enumerate(enc.blocks, start=1):
        _set_tied(blk, tied=static_attn)
        for name in ATTN:
            getattr(blk, name).set_static(static_attn)
        for name in MLP:
            getattr(blk, name).set_static(static_mlp)
        attn_dyn, mlp_dyn = enc._dynamic_flags(layer)
        for name in ATTN:
            getattr(blk, name).dynamic_enabled = attn_dyn
        blk.fc1.dynamic_enabled = mlp_dyn
        blk.fc2.dynamic_enabled = False
        if str(layer) in enc.attn_hypernets:
            enc.attn_hypernets[str(layer)].requires_grad_(attn_dyn)
            enc.mlp_hypernets[str(layer)].requires_grad_(mlp_dyn)
    return enc


def _set_tied(blk: Block, tied: bool) -> None:
    for lead, follow in (("q", "k"), ("v", "o")):
        a, b = getattr(blk, lead), getattr(blk, follow)
        if tied and b.delta_s_static is not a.delta_s_static:
            b.delta_s_static = a.delta_s_static
        elif not tied and b.delta_s_static is a.delta_s_static:
            b.delta_s_static = nn.Parameter(a.delta_s_static.detach().clone())


class StyleRetriever(nn.Module):
    """Style extractor feeding the encoder: image -> unit embedding."""

    def __init__(self, enc_cfg: EncoderConfig, seed: int = 0, mode: str = "hybrid"):
        super().__init__()
        self.encoder = Encoder(enc_cfg, seed=substream_seed(seed, "init", "encoder"), mode=mode)
        self.extractor = StyleExtractor(enc_cfg.d_style, enc_cfg.image_size, seed=substream_seed(seed, "init", "style"))

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images, self.extractor(images))


def encode(enc: Encoder, ex: StyleExtractor, image: torch.Tensor) -> torch.Tensor:
    return enc(image, ex(image))
