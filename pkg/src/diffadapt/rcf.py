"""Residual fusion of the semantic and structure conditions.

Two strided conv encoders map the one-hot label and the sketch to a shared
feature width; the structure features pass through a tanh attention gate
(multiplier in (0, 2)), are added to the semantic features, mixed by a 1x1
conv, and re-attached to the semantic features through a skip connection:

    fused = sem + mix(str * (1 + gate(str)) + sem)

With the mix conv zero-initialized the module is an exact identity on the
semantic branch, so tuning starts from semantic-only behavior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .gradcheck import max_relative_grad_error


@dataclass
class RCFConfig:
    in_channels_semantic: int
    in_channels_structure: int = 1
    feature_channels: int = 32
    spatial_stride: int = 4
    zero_init_mix: bool = True

    def __post_init__(self):
        s = self.spatial_stride
        if s < 1 or (s & (s - 1)) != 0:
            raise ValueError(f"spatial_stride must be a power of two >= 1, got {s}")


def _encoder(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
    # stride 1 is the sanity configuration: pointwise convs only, so the
    # module is permutation-equivariant over spatial positions.
    if stride == 1:
        return nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1),
            nn.SiLU(),
            nn.Conv2d(out_channels, out_channels, 1),
        )
    layers: list[nn.Module] = []
    ch = in_channels
    for _ in range(int(math.log2(stride))):
        layers += [nn.Conv2d(ch, out_channels, 3, stride=2, padding=1), nn.SiLU()]
        ch = out_channels
    layers.append(nn.Conv2d(ch, out_channels, 3, padding=1))
    return nn.Sequential(*layers)


class ResidualConditionFusion(nn.Module):
    """Checkpoint key prefixes: semantic_encoder, structure_encoder, attention, mix."""

    def __init__(self, config: RCFConfig):
        super().__init__()
        self.config = config
        f = config.feature_channels
        k = 1 if config.spatial_stride == 1 else 3
        self.semantic_encoder = _encoder(config.in_channels_semantic, f, config.spatial_stride)
        self.structure_encoder = _encoder(config.in_channels_structure, f, config.spatial_stride)
        self.attention = nn.Sequential(
            nn.Conv2d(f, f, k, padding=k // 2),
            nn.SiLU(),
            nn.Conv2d(f, 1, k, padding=k // 2),
            nn.Tanh(),
        )
        self.mix = nn.Conv2d(f, f, 1)
        if config.zero_init_mix:
            nn.init.zeros_(self.mix.weight)
            nn.init.zeros_(self.mix.bias)

    def encode_semantic(self, one_hot: torch.Tensor) -> torch.Tensor:
        if one_hot.shape[1] != self.config.in_channels_semantic:
            raise ValueError(
                f"expected {self.config.in_channels_semantic} semantic channels, got {one_hot.shape[1]}"
            )
        return self.semantic_encoder(one_hot)

    def encode_structure(self, sketch: torch.Tensor) -> torch.Tensor:
        if sketch.shape[1] != self.config.in_channels_structure:
            raise ValueError(
                f"expected {self.config.in_channels_structure} structure channels, got {sketch.shape[1]}"
            )
        return self.structure_encoder(sketch)

    def fuse(self, c_seg: torch.Tensor, c_str: torch.Tensor) -> torch.Tensor:
        if c_seg.shape != c_str.shape:
            raise ValueError(f"shape mismatch: {tuple(c_seg.shape)} vs {tuple(c_str.shape)}")
        gate = self.attention(c_str)
        return c_seg + self.mix(c_str * (1.0 + gate) + c_seg)

    def forward(self, one_hot: torch.Tensor, sketch: torch.Tensor) -> torch.Tensor:
        return self.fuse(self.encode_semantic(one_hot), self.encode_structure(sketch))


def rcf_gradcheck(
    module: ResidualConditionFusion,
    semantic_input: torch.Tensor,
    structure_input: torch.Tensor,
    epsilon: float = 1e-4,
    max_coords_per_tensor: int | None = 16,
    seed: int = 0,
) -> float:
    """Max relative error of analytic vs central finite-difference gradients.

    A fixed random weighting turns the fused output into a scalar functional;
    gradients are checked with respect to both inputs and every parameter.
    Runs in 64-bit and leaves the module in double precision.
    """
    module = module.double()
    sem = semantic_input.detach().double().requires_grad_(True)
    strc = structure_input.detach().double().requires_grad_(True)
    if not (torch.isfinite(sem).all() and torch.isfinite(strc).all()):
        raise ValueError("non-finite inputs")
    probe_rng = torch.Generator().manual_seed(seed)

    def functional() -> torch.Tensor:
        out = module.fuse(module.encode_semantic(sem), module.encode_structure(strc))
        weights = torch.empty(out.shape, dtype=torch.float64)
        weights.normal_(generator=probe_rng.manual_seed(seed))
        return (out * weights).sum()

    tensors = [sem, strc] + [p for p in module.parameters()]
    return max_relative_grad_error(
        functional,
        tensors,
        epsilon=epsilon,
        max_coords_per_tensor=max_coords_per_tensor,
        rng=np.random.default_rng(seed),
    )
