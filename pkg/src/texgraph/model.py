"""Full model assembly: backbone -> graph layers -> patch encoder -> linear head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as bb
from .errors import ConfigError, ContractError
from .graphmod import (
    ContextGraphParams,
    FusionParams,
    MultiStageGraphConfig,
    context_aware_graph,
    fuse,
    multi_stage_graph,
)
from .imageops import global_avg_pool
from .patchenc import Codebook, PatchConfig, aggregate_multiscale, fuse_global
from .tensor import Parameter, Tensor, add, matmul, reshape

__all__ = ["ModelConfig", "Model", "init_model_params", "model_forward"]


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build and run the classifier.

    The desk-scale default uses a 3-stage backbone so the deepest map of
    a 64x64 input is 8x8, large enough for the 3/5/7 window sizes.
    Ablation flags bypass individual modules: with the graph branches
    off the final stage map passes through unfused; with the patch
    encoder off the feature vector is just the global average pool.
    """

    num_classes: int = 4
    backbone: bb.BackboneConfig = field(
        default_factory=lambda: bb.BackboneConfig(stages=3, channels=(8, 16, 32))
    )
    cag_stage: int = -1
    attn_channels: int | None = None  # None -> ceil(C/2)
    cag_embedded: bool = True
    cag_residual: bool = True
    mag: MultiStageGraphConfig = field(default_factory=MultiStageGraphConfig)
    patches: PatchConfig = field(default_factory=PatchConfig)
    codebook_k: int = 16
    encode_dim: int = 8
    enable_cag: bool = True
    enable_mag: bool = True
    enable_pe: bool = True

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        self.backbone.validate()
        n = self.backbone.stages
        for idx in (self.cag_stage, *self.mag.stage_pair):
            if not -n <= idx < n:
                raise ConfigError(f"stage index {idx} out of range for {n} stages")
        if self.enable_mag:
            self.mag.validate()
        if self.codebook_k < 1 or self.encode_dim < 1:
            raise ConfigError(
                f"codebook_k={self.codebook_k} and encode_dim={self.encode_dim} must be >= 1"
            )

    def stage_channels(self, idx: int) -> int:
        return self.backbone.channels[idx % self.backbone.stages]

    def cag_attn_channels(self) -> int:
        c = self.stage_channels(self.cag_stage)
        return self.attn_channels if self.attn_channels else math.ceil(c / 2)

    def feature_length(self) -> int:
        c_last = self.backbone.channels[-1]
        if self.enable_pe:
            return c_last + self.codebook_k * self.encode_dim
        return c_last

    def with_ablation(self, name: str) -> "ModelConfig":
        """Preset module toggles: fe, cag, mag (=cag+mag), full."""
        presets = {
            "fe": (False, False, False),
            "cag": (True, False, False),
            "mag": (True, True, False),
            "full": (True, True, True),
        }
        if name not in presets:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(presets)}")
        cag, mag, pe = presets[name]
        return replace(self, enable_cag=cag, enable_mag=mag, enable_pe=pe)


def init_model_params(cfg: ModelConfig, seed: int) -> dict[str, Parameter]:
    """Deterministic parameter dict; draw order is fixed and documented
    by the construction order below."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    bb.init_params_into(cfg.backbone, rng, params)

    c_last = cfg.backbone.channels[-1]
    if cfg.enable_cag:
        c = cfg.stage_channels(cfg.cag_stage)
        ca = cfg.cag_attn_channels()
        for nm in ("theta", "phi", "value"):
            params[f"cag.{nm}"] = Parameter(f"cag.{nm}", bb.uniform_fan_in(rng, (c, ca), c))
        params["cag.out"] = Parameter("cag.out", bb.uniform_fan_in(rng, (ca, c), ca))
    if cfg.enable_mag:
        c0 = cfg.stage_channels(cfg.mag.stage_pair[0])
        c1 = cfg.stage_channels(cfg.mag.stage_pair[1])
        params["mag.proj"] = Parameter("mag.proj", bb.uniform_fan_in(rng, (c1, c0), c1))
    if cfg.enable_cag or cfg.enable_mag:
        cin = 0
        if cfg.enable_cag:
            cin += cfg.stage_channels(cfg.cag_stage)
        if cfg.enable_mag:
            cin += cfg.stage_channels(cfg.mag.stage_pair[0])
        params["fuse.w"] = Parameter("fuse.w", bb.uniform_fan_in(rng, (cin, c_last), cin))
        params["fuse.b"] = Parameter("fuse.b", np.zeros(c_last))
    if cfg.enable_pe:
        params["pe.proj"] = Parameter(
            "pe.proj", bb.uniform_fan_in(rng, (c_last, cfg.encode_dim), c_last)
        )
        cbook = Codebook.init(cfg.codebook_k, cfg.encode_dim, rng, prefix="pe")
        params["pe.centers"] = cbook.centers
        params["pe.smoothing"] = cbook.smoothing
    feat = cfg.feature_length()
    params["head.w"] = Parameter("head.w", bb.uniform_fan_in(rng, (feat, cfg.num_classes), feat))
    params["head.b"] = Parameter("head.b", np.zeros(cfg.num_classes))
    return params


def model_forward(
    image: Tensor,
    cfg: ModelConfig,
    params: dict[str, Parameter],
    capture: dict | None = None,
) -> Tensor:
    """Class logits for one H x W x 3 image."""
    maps = bb.backbone_forward(image, cfg.backbone, params)
    f_last = maps[-1]

    ghat = None
    if cfg.enable_cag:
        cag_params = ContextGraphParams(
            theta=params["cag.theta"],
            phi=params["cag.phi"],
            value=params["cag.value"],
            out=params["cag.out"],
            use_embedding=cfg.cag_embedded,
            residual=cfg.cag_residual,
        )
        ghat = context_aware_graph(maps[cfg.cag_stage], cag_params, capture=capture)
    ghat_prime = None
    if cfg.enable_mag:
        f0 = maps[cfg.mag.stage_pair[0]]
        f1 = maps[cfg.mag.stage_pair[1]]
        ghat_prime = multi_stage_graph(f0, f1, cfg.mag, params["mag.proj"], capture=capture)

    if ghat is not None or ghat_prime is not None:
        q = fuse(
            ghat,
            ghat_prime,
            f_last,
            FusionParams(params["fuse.w"], params["fuse.b"]),
            capture=capture,
        )
    else:
        q = f_last

    if cfg.enable_pe:
        cbook = Codebook(params["pe.centers"], params["pe.smoothing"])
        u = aggregate_multiscale(q, cfg.patches, cbook, params["pe.proj"], capture=capture)
        z = fuse_global(q, u)
    else:
        z = global_avg_pool(q)
    if capture is not None:
        capture["features"] = z.data.copy()

    logits = add(
        reshape(matmul(reshape(z, (1, z.size)), params["head.w"]), (cfg.num_classes,)),
        params["head.b"],
    )
    return logits


@dataclass
class Model:
    """Config plus parameters, the unit the trainer and CLI pass around."""

    cfg: ModelConfig
    params: dict[str, Parameter]

    @staticmethod
    def build(cfg: ModelConfig, seed: int) -> "Model":
        return Model(cfg, init_model_params(cfg, seed))

    def forward(self, image: Tensor, capture: dict | None = None) -> Tensor:
        return model_forward(image, self.cfg, self.params, capture=capture)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()
