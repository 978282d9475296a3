"""PatchGAN-style Wasserstein critics over masked images.

The spatial critic scores one masked frame; the temporal critic scores K
masked frames stacked along channels, oldest first. Neither has a final
nonlinearity or normalization layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


class CriticSizeError(ValueError):
    pass


@dataclass(frozen=True)
class CriticSpec:
    num_down: int = 6
    base_channels: int = 16
    input_channels: int = 3
    max_channels: int = 256

    def __post_init__(self):
        if self.num_down < 1:
            raise ValueError("num_down must be >= 1")
        if self.input_channels % 3:
            raise ValueError("input_channels must be a multiple of 3")

    @property
    def window(self) -> int:
        return self.input_channels // 3

    def to_dict(self) -> dict:
        return asdict(self)


def mask_image(frame: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Broadcast a (…, H, W) mask over the RGB channels of a (…, 3, H, W) frame."""
    if frame.shape[-2:] != mask.shape[-2:] or frame.shape[:-3] != mask.shape[:-2]:
        raise CriticSizeError(f"frame {tuple(frame.shape)} and mask {tuple(mask.shape)} do not match")
    return frame * mask.unsqueeze(-3)


class PatchCritic(nn.Module):
    def __init__(self, spec: CriticSpec = CriticSpec()):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.input_channels
        for i in range(spec.num_down):
            cout = min(spec.base_channels * 2 ** i, spec.max_channels)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.input_channels:
            raise CriticSizeError(
                f"critic expects {self.spec.input_channels} channels, got {x.shape[1]}"
            )
        step = 2 ** self.spec.num_down
        if x.shape[-2] % step or x.shape[-1] % step:
            raise CriticSizeError(f"input {tuple(x.shape[-2:])} not divisible by 2^{self.spec.num_down}")
        return self.net(x)[:, 0]


def spatial_score(critic: PatchCritic, masked: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) masked images -> (B, H/2^d, W/2^d) patch scores."""
    return critic(masked)


def stack_window(masked_stack: torch.Tensor) -> torch.Tensor:
    """(B, K, 3, H, W) -> (B, 3K, H, W), preserving frame order."""
    b, k, c, h, w = masked_stack.shape
    return masked_stack.reshape(b, k * c, h, w)


def temporal_score(critic: PatchCritic, masked_stack: torch.Tensor) -> torch.Tensor:
    """(B, K, 3, H, W) masked windows, oldest first -> (B, H/2^d, W/2^d) patch scores."""
    if masked_stack.dim() != 5:
        raise CriticSizeError("temporal critic input must be (B, K, 3, H, W)")
    if masked_stack.shape[1] != critic.spec.window:
        raise CriticSizeError(
            f"temporal critic built for K={critic.spec.window}, got K={masked_stack.shape[1]}"
        )
    return critic(stack_window(masked_stack))
