"""Toy UNet noise predictor and the text-encoder stub.

The UNet runs three latent resolutions with text cross-attention at the two
lowest. Skip connections merge through a group-normalized concatenation; when
a control path is attached, that merge is replaced by the ID injector at the
four injection sites (after the middle block and after each decoder block),
so a freshly initialized control path leaves the output bit-identical to the
unconditional forward pass.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DenoiserConfig
from .errors import ConfigurationError, ShapeError


@dataclass
class TextCondition:
    """Fixed-length token array for one prompt."""

    tokens: torch.Tensor  # (L, d_txt)
    prompt: str


def _word_embedding(word: str, dim: int) -> torch.Tensor:
    """Deterministic hash embedding: the word seeds a generator."""
    seed = int.from_bytes(hashlib.md5(word.encode()).digest()[:4], "little")
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(dim, generator=gen)


class TextEncoderStub(nn.Module):
    """Attribute-keyword hash embedding plus a small frozen self-attention
    mixer. Unknown words share one OOV embedding; the empty prompt maps to a
    learned null embedding sequence (the condition-dropout target)."""

    def __init__(self, vocab: list[str] | None = None, dim: int = 64, length: int = 16, seed: int = 13):
        super().__init__()
        if vocab is None:
            from .datapipe import caption_vocabulary

            vocab = caption_vocabulary()
        self.dim = dim
        self.length = length
        self.embeddings = {w: _word_embedding(w, dim) for w in vocab}
        self.oov = _word_embedding("\x00oov", dim)
        self.pad = torch.zeros(dim)
        gen = torch.Generator().manual_seed(seed)
        self.null_embedding = nn.Parameter(torch.randn(length, dim, generator=gen) * 0.02)
        self.mixer = nn.MultiheadAttention(dim, 2, batch_first=True)
        with torch.no_grad():
            for p in self.mixer.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
        for p in self.mixer.parameters():
            p.requires_grad_(False)

    def tokenize(self, prompt: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", prompt.lower())

    def raw_tokens(self, prompt: str) -> torch.Tensor:
        words = self.tokenize(prompt)[: self.length]
        rows = [self.embeddings.get(w, self.oov) for w in words]
        rows += [self.pad] * (self.length - len(rows))
        return torch.stack(rows)

    def forward(self, prompt: str) -> TextCondition:
        if not self.tokenize(prompt):
            return TextCondition(self.null_embedding.detach().clone(), prompt)
        x = self.raw_tokens(prompt)[None]
        with torch.no_grad():
            mixed, _ = self.mixer(x, x, x)
        return TextCondition((x + mixed)[0], prompt)

    def null_condition(self) -> TextCondition:
        return TextCondition(self.null_embedding.detach().clone(), "")


def encode_text(prompt: str, encoder: TextEncoderStub) -> TextCondition:
    return encoder(prompt)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of (possibly batched) timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
    args = t.to(freqs.dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, ch_out)
        self.norm2 = nn.GroupNorm(groups, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention2d(nn.Module):
    """Cross-attention from spatial positions (queries) onto context tokens,
    applied residually. ``zero_init`` zeroes the output projection so the
    layer has no influence until trained."""

    def __init__(self, channels: int, ctx_dim: int, heads: int = 4, zero_init: bool = False):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels) if channels % 8 == 0 else nn.GroupNorm(1, channels)
        self.attn = nn.MultiheadAttention(
            channels, heads, kdim=ctx_dim, vdim=ctx_dim, batch_first=True
        )
        if zero_init:
            with torch.no_grad():
                self.attn.out_proj.weight.zero_()
                self.attn.out_proj.bias.zero_()

    def forward(self, x, ctx, key_padding_mask=None, need_weights=False):
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        out, weights = self.attn(
            q, ctx, ctx, key_padding_mask=key_padding_mask, need_weights=need_weights
        )
        x = x + out.transpose(1, 2).reshape(b, c, h, w)
        return (x, weights) if need_weights else (x, None)


def merge_skip(z_e: torch.Tensor, z_d: torch.Tensor, groups: int) -> torch.Tensor:
    """Base skip merge: group-normalized concat(z_e, z_d), no learned affine.
    The ID injector reduces to exactly this when its convs are zero and the
    control features vanish."""
    if z_e.shape != z_d.shape:
        raise ShapeError(f"skip/decoder shapes differ: {tuple(z_e.shape)} vs {tuple(z_d.shape)}")
    return F.group_norm(torch.cat([z_e, z_d], dim=1), groups)


class ToyUNet(nn.Module):
    """Noise predictor with 3 resolutions and 4 injection sites.

    ``injection_shapes`` lists (channels, downsample) per site in forward
    order: after-middle, then after each decoder block.
    """

    def __init__(self, in_channels: int, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        if len(cfg.widths) != 3:
            raise ConfigurationError("ToyUNet expects exactly 3 resolution widths")
        w0, w1, w2 = cfg.widths
        self.cfg = cfg
        self.in_channels = in_channels
        self.groups = cfg.group_count
        td = cfg.time_dim

        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(in_channels, w0, 3, padding=1)

        def level(ch_in, ch_out):
            return nn.ModuleList(
                [ResBlock(ch_in if i == 0 else ch_out, ch_out, td, self.groups) for i in range(cfg.blocks_per_level)]
            )

        self.enc1 = level(w0, w0)
        self.down1 = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.enc2 = level(w0, w1)
        self.down2 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.enc3 = level(w1, w2)
        self.mid1 = ResBlock(w2, w2, td, self.groups)
        self.mid2 = ResBlock(w2, w2, td, self.groups)

        self.txt_attn = nn.ModuleDict()
        for lvl in cfg.text_attn_levels:
            ch = (w0, w1, w2)[lvl]
            self.txt_attn[str(lvl)] = CrossAttention2d(ch, cfg.text_dim)
        self.mid_attn = CrossAttention2d(w2, cfg.text_dim)

        # decoder: injector-merge then blocks, mirrored
        self.reduce_mid = nn.Conv2d(2 * w2, w2, 1)
        self.dec3 = level(w2, w2)
        self.dec3_attn = CrossAttention2d(w2, cfg.text_dim)
        self.up3 = nn.Conv2d(w2, w1, 3, padding=1)
        self.reduce3 = nn.Conv2d(2 * w1, w1, 1)
        self.dec2 = level(w1, w1)
        self.dec2_attn = CrossAttention2d(w1, cfg.text_dim)
        self.up2 = nn.Conv2d(w1, w0, 3, padding=1)
        self.reduce2 = nn.Conv2d(2 * w0, w0, 1)
        self.dec1 = level(w0, w0)
        self.reduce1 = nn.Conv2d(2 * w0, w0, 1)
        self.norm_out = nn.GroupNorm(self.groups, w0)
        self.conv_out = nn.Conv2d(w0, in_channels, 3, padding=1)

        # (channels, spatial downsample factor) per injection site
        self.injection_shapes = [(w2, 4), (w1, 2), (w0, 1), (w0, 1)]
        # encoder taps whose resolutions pair with the injection sites
        self.tap_names = ["mid", "enc2", "enc1", "stem"]

    def arch_hash(self) -> str:
        blob = json.dumps(
            {"in_channels": self.in_channels, **self.cfg.__dict__}, sort_keys=True, default=str
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def encode_features(self, z, temb, txt, run_txt_attn=True):
        """Shared encoder+middle trunk; the control branch replicates this
        layout (without the text attention)."""
        h0 = self.conv_in(z)
        h = h0
        for blk in self.enc1:
            h = blk(h, temb)
        if run_txt_attn and "0" in self.txt_attn:
            h, _ = self.txt_attn["0"](h, txt)
        e1 = h
        h = self.down1(e1)
        for blk in self.enc2:
            h = blk(h, temb)
        if run_txt_attn and "1" in self.txt_attn:
            h, _ = self.txt_attn["1"](h, txt)
        e2 = h
        h = self.down2(e2)
        for blk in self.enc3:
            h = blk(h, temb)
        if run_txt_attn and "2" in self.txt_attn:
            h, _ = self.txt_attn["2"](h, txt)
        e3 = h
        m = self.mid1(e3, temb)
        if run_txt_attn:
            m, _ = self.mid_attn(m, txt)
        m = self.mid2(m, temb)
        return {"stem": h0, "enc1": e1, "enc2": e2, "enc3": e3, "mid": m}

    def _merge(self, z_e, z_d, site, control):
        if control is None:
            return merge_skip(z_e, z_d, self.groups)
        return control.injectors[site](z_e, z_d, control.features[site])

    def forward(self, z, t, txt, control=None, txt_mask=None):
        """Predict the noise. ``control`` carries per-site features and the
        injector modules; absent control is the unconditional/base mode."""
        if z.dim() != 4 or z.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, H, W) latent, got {tuple(z.shape)}")
        if isinstance(t, int):
            t = torch.full((z.shape[0],), t, dtype=torch.long)
        if txt.dim() == 2:
            txt = txt[None].expand(z.shape[0], -1, -1)
        if control is not None and len(control.features) != len(self.injection_shapes):
            raise ConfigurationError(
                f"control pyramid has {len(control.features)} maps, expected {len(self.injection_shapes)}"
            )
        if control is not None:
            for i, ((ch, ds), f) in enumerate(zip(self.injection_shapes, control.features)):
                want = (z.shape[0], ch, z.shape[2] // ds, z.shape[3] // ds)
                if tuple(f.shape) != want:
                    raise ConfigurationError(
                        f"control map {i} has shape {tuple(f.shape)}, expected {want}"
                    )

        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        feats = self.encode_features(z, temb, txt)

        h = self.reduce_mid(self._merge(feats["enc3"], feats["mid"], 0, control))
        for blk in self.dec3:
            h = blk(h, temb)
        h, _ = self.dec3_attn(h, txt, key_padding_mask=txt_mask)
        h = self.up3(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.reduce3(self._merge(feats["enc2"], h, 1, control))
        for blk in self.dec2:
            h = blk(h, temb)
        h, _ = self.dec2_attn(h, txt, key_padding_mask=txt_mask)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.reduce2(self._merge(feats["enc1"], h, 2, control))
        for blk in self.dec1:
            h = blk(h, temb)
        h = self.reduce1(self._merge(feats["stem"], h, 3, control))
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_noise(
    unet: ToyUNet,
    zt: torch.Tensor,
    t: int | torch.Tensor,
    txt: TextCondition | torch.Tensor,
    control=None,
) -> torch.Tensor:
    """Single-sample convenience wrapper around :meth:`ToyUNet.forward`."""
    tokens = txt.tokens if isinstance(txt, TextCondition) else txt
    batched = zt.dim() == 4
    z = zt if batched else zt[None]
    out = unet(z, t, tokens, control=control)
    return out if batched else out[0]
