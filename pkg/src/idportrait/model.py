"""Full pipeline aggregate: codec, schedule, denoiser, ID encoder, control.

``build_model`` wires every subsystem from one RunConfig; ``generate`` runs
the identity-preserving sampling loop (reference identity, target expression
and pose, text prompt)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .control import IDCtrl, build_injectors, ctrl_forward, init_ctrl_from_unet
from .denoiser import TextEncoderStub, ToyUNet
from .diffusion import LatentCodec, NoiseSchedule, build_schedule, sample
from .errors import ConfigurationError
from .face3d import BlendshapeBasis, FaceParams, build_basis, compose_mesh, recombine, render_mono
from .identity import (
    ColorCueFaceDetector,
    GlobalEmbedderNet,
    IDFusion,
    LocalPatchEncoder,
    detect_largest_face,
    embed_global,
    embed_local,
)
from .images import AnnotatedImage


@dataclass
class IDFeatures:
    f_id: torch.Tensor  # (32, dim) refined tokens
    global_emb: np.ndarray
    local_emb: np.ndarray


class DiffPCModel:
    """All trainable and frozen pieces of the pipeline plus its constants."""

    def __init__(self, cfg: RunConfig, basis: BlendshapeBasis | None = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.basis = basis or build_basis(
            n_id=cfg.face3d.n_id,
            n_expr=cfg.face3d.n_expr,
            n_lat=cfg.face3d.n_lat,
            n_lon=cfg.face3d.n_lon,
            seed=cfg.face3d.basis_seed,
        )
        self.codec = LatentCodec(cfg.codec.factor, cfg.codec.mode)
        self.sched: NoiseSchedule = build_schedule(
            cfg.diffusion.timesteps,
            cfg.diffusion.beta_start,
            cfg.diffusion.beta_end,
            cfg.diffusion.schedule_kind,
            cfg.diffusion.sigma_mode,
        )
        in_channels = self.codec.latent_shape(cfg.image_size)[0]
        self.unet = ToyUNet(in_channels, cfg.denoiser)
        self.text = TextEncoderStub(dim=cfg.denoiser.text_dim, length=cfg.denoiser.text_len)
        self.global_embedder = GlobalEmbedderNet(dim=cfg.identity.global_dim)
        self.local_encoder = LocalPatchEncoder(dim=cfg.identity.local_dim)
        self.fusion = IDFusion(
            dim=cfg.identity.dim,
            global_dim=cfg.identity.global_dim,
            local_dim=cfg.identity.local_dim,
            depth=cfg.identity.depth,
            heads=cfg.identity.heads,
        )
        self.ctrl: IDCtrl = init_ctrl_from_unet(self.unet, cfg.identity.dim)
        self.injectors = build_injectors(self.unet)
        self.detector = ColorCueFaceDetector()

    def modules(self) -> dict:
        return {
            "unet": self.unet,
            "text": self.text,
            "global_embedder": self.global_embedder,
            "local_encoder": self.local_encoder,
            "fusion": self.fusion,
            "ctrl": self.ctrl,
            "injectors": self.injectors,
        }

    # -- conditioning ------------------------------------------------------

    def encode_reference(self, ref_image: AnnotatedImage, detector=None) -> IDFeatures:
        crop = detect_largest_face(ref_image, detector or self.detector)
        if crop is None:
            raise ConfigurationError("no face detected in the reference image")
        g = embed_global(crop, self.global_embedder)
        l = embed_local(crop, self.local_encoder)
        f_id = self.fusion(
            torch.as_tensor(g, dtype=torch.float32), torch.as_tensor(l, dtype=torch.float32)
        )
        return IDFeatures(f_id, g, l)

    def control_image(self, params: FaceParams) -> AnnotatedImage:
        """Canonical grayscale render of the 3D face for the control branch."""
        out = render_mono(compose_mesh(params, self.basis), self.cfg.image_size)
        return AnnotatedImage.from_gray(out.image)

    def control_latent(self, params: FaceParams) -> torch.Tensor:
        return self.codec.encode(self.control_image(params).to_tensor())

    # -- inference ---------------------------------------------------------

    def generate(
        self,
        ref_image: AnnotatedImage,
        target_params: FaceParams,
        prompt: str,
        seed: int,
        steps: int | None = None,
        ref_params: FaceParams | None = None,
        use_control: bool = True,
        use_id_tokens: bool = True,
    ) -> AnnotatedImage:
        """Sample one image: reference identity, target expression/pose, prompt.

        When ``ref_params`` is given the 3D control render uses the reference
        identity coefficients with the target's expression and pose; otherwise
        ``target_params`` is rendered as-is. ``use_control=False`` drops the
        whole control path (base model); ``use_id_tokens=False`` zeroes the
        refined ID features (ablation)."""
        steps = steps or self.cfg.diffusion.sampler_steps
        txt = self.text(prompt).tokens
        shape = (1,) + self.codec.latent_shape(self.cfg.image_size)
        if use_control:
            params = recombine(ref_params, target_params) if ref_params is not None else target_params
            z3d = self.control_latent(params)[None]
            with torch.no_grad():
                f_id = self.encode_reference(ref_image).f_id
            if not use_id_tokens:
                f_id = torch.zeros_like(f_id)

        def denoise(zt, t, _conditions):
            with torch.no_grad():
                control = None
                if use_control:
                    control = ctrl_forward(self.ctrl, self.injectors, zt, t, z3d, f_id)
                return self.unet(zt, t, txt[None].expand(zt.shape[0], -1, -1), control=control)

        z = sample(denoise, shape, self.sched, steps, seed)
        img = self.codec.decode(z[0])
        return AnnotatedImage.from_tensor(
            img,
            {
                "prompt": prompt,
                "seed": seed,
                "steps": steps,
                "config_hash": self.cfg.hash(),
            },
        )


def build_model(cfg: RunConfig | None = None, basis: BlendshapeBasis | None = None) -> DiffPCModel:
    return DiffPCModel(cfg or RunConfig(), basis)
