"""ID control branch and feature injection.

The control branch is a trainable copy of the denoiser's encoder and middle
trunk. The rendered-3D latent enters through a zero convolution, refined ID
tokens enter through zero-initialized cross-attention at every resolution,
and each tapped feature map leaves through a zero convolution. All three
zero families make the branch exactly inert at initialization: the tapped
pyramid is all zeros and the raw trunk features coincide with the frozen
encoder's own activations.

Injection replaces the denoiser's skip merge. The injector normalizes the
concatenated skip/decoder pair exactly like the base merge and then applies
a feature-wise affine predicted from the control map, so zero control
features reproduce the base merge bit for bit.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import CrossAttention2d, ToyUNet, merge_skip, timestep_embedding
from .errors import ConfigurationError, ShapeError


def zero_conv(ch_in: int, ch_out: int) -> nn.Conv2d:
    conv = nn.Conv2d(ch_in, ch_out, 1)
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
    return conv


class IDInjector(nn.Module):
    """Skip-merge replacement at one injection site.

    ``modulate`` maps the control features to a gain/shift pair through a
    two-conv head whose final conv starts at zero, then applies
    (1 + gain) * z' + shift. Modes: "affine" (gain and shift), "additive"
    (shift only), "off" (base merge, control ignored).
    """

    def __init__(self, site_channels: int, groups: int, mode: str = "affine"):
        super().__init__()
        if mode not in ("affine", "additive", "off"):
            raise ConfigurationError(f"unknown injector mode {mode!r}")
        self.site_channels = site_channels
        self.groups = groups
        self.mode = mode
        merged = 2 * site_channels
        self.conv1 = nn.Conv2d(site_channels, site_channels, 3, padding=1)
        self.conv2 = zero_conv(site_channels, 2 * merged)

    def modulate(self, z_prime: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        gain, shift = self.conv2(F.silu(self.conv1(c))).chunk(2, dim=1)
        if self.mode == "additive":
            return z_prime + shift
        return (1.0 + gain) * z_prime + shift

    def forward(self, z_e: torch.Tensor, z_d: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        z_prime = merge_skip(z_e, z_d, self.groups)
        if self.mode == "off":
            return z_prime
        if c.shape[1] != self.site_channels:
            raise ShapeError(
                f"control map has {c.shape[1]} channels, injector expects {self.site_channels}"
            )
        return self.modulate(z_prime, c)


def inject(z_e: torch.Tensor, z_d: torch.Tensor, c: torch.Tensor, injector: IDInjector) -> torch.Tensor:
    """Functional form of the injected merge."""
    return injector(z_e, z_d, c)


def inject_baseline(z_e: torch.Tensor, z_d: torch.Tensor, groups: int = 8) -> torch.Tensor:
    """The plain merge the injector must reduce to under zero control."""
    return merge_skip(z_e, z_d, groups)


@dataclass
class ControlFeatures:
    """Per-site tapped pyramid plus the raw trunk activations."""

    pyramid: list
    block_features: dict


@dataclass
class ControlSignal:
    """What the denoiser consumes: the pyramid and the injectors to apply."""

    features: list
    injectors: nn.ModuleList
    block_features: dict = field(default_factory=dict)


class IDCtrl(nn.Module):
    """Trainable encoder copy conditioned on the 3D latent and ID tokens."""

    def __init__(self, unet: ToyUNet, id_dim: int, z3d_channels: int | None = None):
        super().__init__()
        cfg = unet.cfg
        self.cfg = cfg
        self.groups = unet.groups
        z3d_channels = unet.in_channels if z3d_channels is None else z3d_channels
        self.entry = zero_conv(z3d_channels, unet.in_channels)
        # trainable copies of the frozen trunk
        for name in ("conv_in", "enc1", "down1", "enc2", "down2", "enc3", "mid1", "mid2", "time_mlp"):
            setattr(self, name, copy.deepcopy(getattr(unet, name)))
        w0, w1, w2 = cfg.widths
        self.id_attn = nn.ModuleDict(
            {
                "enc1": CrossAttention2d(w0, id_dim, zero_init=True),
                "enc2": CrossAttention2d(w1, id_dim, zero_init=True),
                "enc3": CrossAttention2d(w2, id_dim, zero_init=True),
                "mid": CrossAttention2d(w2, id_dim, zero_init=True),
            }
        )
        self.tap_names = list(unet.tap_names)
        self.taps = nn.ModuleList(
            zero_conv(self._tap_channels(name), ch) for name, (ch, _) in zip(self.tap_names, unet.injection_shapes)
        )

    def _tap_channels(self, name: str) -> int:
        w0, w1, w2 = self.cfg.widths
        return {"stem": w0, "enc1": w0, "enc2": w1, "enc3": w2, "mid": w2}[name]

    def trunk(self, z, t, z3d, f_id) -> dict:
        """Raw trunk activations, before the output zero convs."""
        if z3d.shape != z.shape[:1] + self.entry.weight.shape[1:2] + z.shape[2:]:
            raise ShapeError(
                f"3D latent shape {tuple(z3d.shape)} incompatible with noisy latent {tuple(z.shape)}"
            )
        if f_id.dim() == 2:
            f_id = f_id[None].expand(z.shape[0], -1, -1)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        h0 = self.conv_in(z + self.entry(z3d))
        h = h0
        for blk in self.enc1:
            h = blk(h, temb)
        h, _ = self.id_attn["enc1"](h, f_id)
        e1 = h
        h = self.down1(e1)
        for blk in self.enc2:
            h = blk(h, temb)
        h, _ = self.id_attn["enc2"](h, f_id)
        e2 = h
        h = self.down2(e2)
        for blk in self.enc3:
            h = blk(h, temb)
        h, _ = self.id_attn["enc3"](h, f_id)
        e3 = h
        m = self.mid1(e3, temb)
        m, _ = self.id_attn["mid"](m, f_id)
        m = self.mid2(m, temb)
        return {"stem": h0, "enc1": e1, "enc2": e2, "enc3": e3, "mid": m}

    def forward(self, z, t, z3d, f_id) -> ControlFeatures:
        if isinstance(t, int):
            t = torch.full((z.shape[0],), t, dtype=torch.long)
        feats = self.trunk(z, t, z3d, f_id)
        pyramid = [tap(feats[name]) for name, tap in zip(self.tap_names, self.taps)]
        return ControlFeatures(pyramid, feats)


def init_ctrl_from_unet(unet: ToyUNet, id_dim: int, z3d_channels: int | None = None) -> IDCtrl:
    """Control branch initialized from the denoiser trunk weights."""
    return IDCtrl(unet, id_dim, z3d_channels)


def build_injectors(unet: ToyUNet, mode: str = "affine") -> nn.ModuleList:
    """One injector per injection site, in forward order."""
    return nn.ModuleList(IDInjector(ch, unet.groups, mode=mode) for ch, _ in unet.injection_shapes)


def ctrl_forward(ctrl: IDCtrl, injectors: nn.ModuleList, z, t, z3d, f_id) -> ControlSignal:
    """Run the control branch and package its output for the denoiser."""
    if len(injectors) != len(ctrl.taps):
        raise ConfigurationError(
            f"{len(injectors)} injectors for {len(ctrl.taps)} injection sites"
        )
    feats = ctrl(z, t, z3d, f_id)
    return ControlSignal(feats.pyramid, injectors, feats.block_features)
