"""Value-free self-attention over the three modality rows, pooled and projected to one LM token."""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import torch
import torch.nn as nn

from src.config import (
    DTYPE,
    DEFAULT_MEDIA_DIM,
    EMBED_DIM,
    FUSION_DIM,
    FUSION_LAYERS,
    FUSION_INIT_STD,
    LM_DIM,
)
from src.errors import ConfigurationError, NumericError, ShapeError
from src.features import MODALITIES, ModalityFeatures
from src.logger import get_logger

logger = get_logger(__name__)


@dataclass
class FusionConfig:
    """Widths and depth of the fusion stack."""
    media_dim: int = DEFAULT_MEDIA_DIM
    relational_dim: int = EMBED_DIM
    hidden_dim: int = FUSION_DIM
    n_layers: int = FUSION_LAYERS
    projector_dim: Optional[int] = None
    lm_dim: int = LM_DIM
    init_std: float = FUSION_INIT_STD
    seed: int = 0

    def validate(self):
        for name in ("media_dim", "relational_dim", "hidden_dim", "lm_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ConfigurationError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.projector_dim is not None and self.projector_dim < 1:
            raise ConfigurationError(f"projector_dim must be >= 1, got {self.projector_dim}")


class FusionParams(nn.Module):
    """
    Trainable fusion parameters, registered in a fixed order so checksums
    and optimizer state are stable.

    Row-vector convention throughout: a projection is `z @ W`.
    """

    def __init__(self, config: FusionConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.hidden_dim
        d_h = config.projector_dim or d
        generator = torch.Generator().manual_seed(config.seed)

        def gaussian(*shape, std=config.init_std):
            return nn.Parameter(torch.randn(*shape, generator=generator, dtype=DTYPE) * std)

        self.w_media = gaussian(config.media_dim, d)
        self.w_user = gaussian(config.relational_dim, d)
        self.w_bundle = gaussian(config.relational_dim, d)
        self.w_query = nn.ParameterList([gaussian(d, d) for _ in range(config.n_layers)])
        self.w_key = nn.ParameterList([gaussian(d, d) for _ in range(config.n_layers)])
        self.proj_hidden_weight = gaussian(d, d_h, std=1.0 / math.sqrt(d))
        self.proj_hidden_bias = nn.Parameter(torch.zeros(d_h, dtype=DTYPE))
        self.proj_out_weight = gaussian(d_h, config.lm_dim, std=1.0 / math.sqrt(d_h))
        self.proj_out_bias = nn.Parameter(torch.zeros(config.lm_dim, dtype=DTYPE))
        self.missing_media = gaussian(config.media_dim)
        self.missing_user = gaussian(config.relational_dim)
        self.missing_bundle = gaussian(config.relational_dim)

    @property
    def n_layers(self) -> int:
        return len(self.w_query)

    def modality_weights(self, modality: str):
        """(input projection, missing vector) for a modality name."""
        return {
            "media": (self.w_media, self.missing_media),
            "ui": (self.w_user, self.missing_user),
            "bi": (self.w_bundle, self.missing_bundle),
        }[modality]


@dataclass
class FusedToken:
    """One fused non-textual embedding of LM width."""
    vec: torch.Tensor
    item_id: int


def _substitute_missing(z: torch.Tensor, missing: torch.Tensor) -> torch.Tensor:
    # Exact-zero rows stand for an absent modality
    is_missing = (z == 0).all(dim=-1, keepdim=True)
    return torch.where(is_missing, missing.expand_as(z), z)


def _check_input(z: torch.Tensor, expected: int, label: str):
    if z.shape[-1] != expected:
        raise ShapeError(f"{label} input has width {z.shape[-1]}, expected {expected}")


def project_inputs(z_m: torch.Tensor, z_x: torch.Tensor, z_y: torch.Tensor, params: FusionParams) -> torch.Tensor:
    """
    Stack the three projected modality rows in (media, user-level, bundle-level) order.

    Inputs may carry leading batch dimensions; the result has shape (..., 3, d).
    """
    _check_input(z_m, params.w_media.shape[0], "media")
    _check_input(z_x, params.w_user.shape[0], "user-level")
    _check_input(z_y, params.w_bundle.shape[0], "bundle-level")
    if not (z_m.shape[:-1] == z_x.shape[:-1] == z_y.shape[:-1]):
        raise ShapeError(f"Leading dimensions differ: {tuple(z_m.shape)}, {tuple(z_x.shape)}, {tuple(z_y.shape)}")
    rows = [
        _substitute_missing(z_m, params.missing_media) @ params.w_media,
        _substitute_missing(z_x, params.missing_user) @ params.w_user,
        _substitute_missing(z_y, params.missing_bundle) @ params.w_bundle,
    ]
    return torch.stack(rows, dim=-2)


def attention_layer(R: torch.Tensor, w_query: torch.Tensor, w_key: torch.Tensor) -> torch.Tensor:
    """
    softmax((R Wq)(R Wk)^T / sqrt(d)) R, with no value projection or residual.

    Raises:
        ShapeError: R is not (..., 3, d) or the weights are not d x d
        NumericError: Non-finite attention logits
    """
    if R.dim() < 2 or R.shape[-2] != 3:
        raise ShapeError(f"Attention input must have 3 modality rows, got shape {tuple(R.shape)}")
    d = R.shape[-1]
    if tuple(w_query.shape) != (d, d) or tuple(w_key.shape) != (d, d):
        raise ShapeError(f"Attention weights must be {d}x{d}, got {tuple(w_query.shape)} and {tuple(w_key.shape)}")
    logits = (R @ w_query) @ (R @ w_key).transpose(-1, -2) / math.sqrt(d)
    if not torch.isfinite(logits).all():
        raise NumericError("Non-finite attention logits; fusion parameters are corrupted")
    return torch.softmax(logits, dim=-1) @ R


def projector(pooled: torch.Tensor, params: FusionParams) -> torch.Tensor:
    """p(x) = tanh(x W1 + b1) W2 + b2."""
    hidden = torch.tanh(pooled @ params.proj_hidden_weight + params.proj_hidden_bias)
    return hidden @ params.proj_out_weight + params.proj_out_bias


def fuse(z_m: torch.Tensor, z_x: torch.Tensor, z_y: torch.Tensor, params: FusionParams) -> torch.Tensor:
    """K' attention layers, mean over the modality rows, then the projector; output width d_LM."""
    R = project_inputs(z_m, z_x, z_y, params)
    for w_query, w_key in zip(params.w_query, params.w_key):
        R = attention_layer(R, w_query, w_key)
    return projector(R.mean(dim=-2), params)


def project_feature(z: torch.Tensor, modality: str, params: FusionParams) -> torch.Tensor:
    """Single-modality embedding p(z W_r) used by prompt-style tokenization."""
    weight, missing = params.modality_weights(modality)
    _check_input(z, weight.shape[0], modality)
    return projector(_substitute_missing(z, missing) @ weight, params)


def fuse_backward(
    z_m: torch.Tensor,
    z_x: torch.Tensor,
    z_y: torch.Tensor,
    params: FusionParams,
    upstream_grad: torch.Tensor,
) -> "OrderedDict[str, torch.Tensor]":
    """
    Reverse-mode gradients of `fuse` for every parameter and the three inputs.

    Returns:
        Ordered mapping parameter name -> gradient, followed by z_m, z_x, z_y
    """
    inputs = [z.detach().clone().requires_grad_(True) for z in (z_m, z_x, z_y)]
    named = list(params.named_parameters())
    previous = [p.requires_grad for _, p in named]
    try:
        for _, p in named:
            p.requires_grad_(True)
        with torch.enable_grad():
            out = fuse(*inputs, params)
            if tuple(upstream_grad.shape) != tuple(out.shape):
                raise ShapeError(f"Upstream gradient shape {tuple(upstream_grad.shape)} != output shape {tuple(out.shape)}")
            grads = torch.autograd.grad(
                out,
                [p for _, p in named] + inputs,
                grad_outputs=upstream_grad.to(out.dtype),
                allow_unused=True,
            )
    finally:
        for (_, p), flag in zip(named, previous):
            p.requires_grad_(flag)
    result = OrderedDict()
    for (name, tensor), grad in zip(named + list(zip(("z_m", "z_x", "z_y"), inputs)), grads):
        result[name] = torch.zeros_like(tensor) if grad is None else grad.detach()
    return result


def _modality_inputs(
    item_ids: Sequence[int], features: ModalityFeatures, modalities: Iterable[str]
) -> Dict[str, torch.Tensor]:
    active = set(modalities)
    unknown = active - set(MODALITIES)
    if unknown:
        raise ConfigurationError(f"Unknown modalities {sorted(unknown)}")
    inputs = {}
    for modality in MODALITIES:
        rows = features.table(modality).rows(item_ids)
        # Masked-out modalities go down the missing-vector path
        inputs[modality] = rows if modality in active else torch.zeros_like(rows)
    return inputs


def fuse_items(
    item_ids: Sequence[int], features: ModalityFeatures, params: FusionParams, modalities: Iterable[str]
) -> torch.Tensor:
    """Fused tokens for many items at once, shape (len(item_ids), d_LM)."""
    inputs = _modality_inputs(item_ids, features, modalities)
    return fuse(inputs["media"], inputs["ui"], inputs["bi"], params)


def fuse_item(item_id: int, features: ModalityFeatures, params: FusionParams, modalities: Iterable[str]) -> FusedToken:
    vec = fuse_items([item_id], features, params, modalities)[0]
    return FusedToken(vec=vec, item_id=int(item_id))
