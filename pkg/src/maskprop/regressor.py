"""Mask-propagation regressor.

A Siamese encoder embeds the current frame with the previous mask and the
reference frame with its mask; a global-convolution block matches the two
embeddings and a decoder upsamples back to a full-resolution mask. The last
decoder layer additionally sees a channel-reduced copy of its own features
from the previous frame (the temporal skip state).

All tensors are channels-first: frames (B, 3, H, W), masks (B, 1, H, W).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

SkipState = Optional[torch.Tensor]  # None marks the empty state at the start of a clip


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class RegressorSpec:
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 64)
    decoder_last_channels: int = 16
    global_conv_kernel: int = 7
    skip_reduction: int = 8
    base_image_size: int = 64

    def __post_init__(self):
        if len(self.encoder_channels) < 2:
            raise ValueError("need at least two encoder stages")
        if self.decoder_last_channels % self.skip_reduction:
            raise ValueError("skip_reduction must divide decoder_last_channels")
        if self.global_conv_kernel % 2 == 0:
            raise ValueError("global_conv_kernel must be odd")

    @property
    def num_stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def skip_channels(self) -> int:
        return self.decoder_last_channels // self.skip_reduction

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorSpec":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


def check_size(h: int, w: int, num_stages: int) -> None:
    step = 2 ** num_stages
    if h % step or w % step:
        raise SizeError(f"input {h}x{w} is not divisible by 2^{num_stages}={step}")


def conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=False),
    )


class Encoder(nn.Module):
    """Maps a 4-channel image+mask pair to one feature map per downsampling stage."""

    def __init__(self, channels: Tuple[int, ...]):
        super().__init__()
        stages = []
        cin = 4
        for c in channels:
            stages.append(nn.Sequential(conv_block(cin, c, stride=2), conv_block(c, c)))
            cin = c
        self.stages = nn.ModuleList(stages)

    def forward(self, image, mask) -> List[torch.Tensor]:
        x = torch.cat([image, mask], dim=1)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class GlobalMatch(nn.Module):
    """Large-kernel separable convolution over concatenated reference/current features."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        cin = 2 * channels
        self.left = nn.Sequential(
            nn.Conv2d(cin, channels, (kernel, 1), padding=(pad, 0)),
            nn.Conv2d(channels, channels, (1, kernel), padding=(0, pad)),
        )
        self.right = nn.Sequential(
            nn.Conv2d(cin, channels, (1, kernel), padding=(0, pad)),
            nn.Conv2d(channels, channels, (kernel, 1), padding=(pad, 0)),
        )

    def forward(self, feat_ref, feat_cur):
        if feat_ref.shape != feat_cur.shape:
            raise SizeError(f"feature shapes differ: {tuple(feat_ref.shape)} vs {tuple(feat_cur.shape)}")
        x = torch.cat([feat_ref, feat_cur], dim=1)
        return self.left(x) + self.right(x)


class Decoder(nn.Module):
    def __init__(self, spec: RegressorSpec):
        super().__init__()
        enc = spec.encoder_channels
        blocks = []
        cin = enc[-1]
        # levels num_stages-1 .. 1 fuse same-frame encoder features at that resolution
        for level in range(spec.num_stages - 1, 0, -1):
            cout = enc[level - 1]
            blocks.append(conv_block(cin + enc[level - 1], cout))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        # full-resolution layer sees the raw 4-channel input as its same-frame skip
        self.last = conv_block(cin + 4, spec.decoder_last_channels)
        self.head = nn.Conv2d(spec.decoder_last_channels + spec.skip_channels, 1, 3, padding=1)
        self.reduce = nn.Conv2d(spec.decoder_last_channels, spec.skip_channels, 3, padding=1)
        self.skip_channels = spec.skip_channels

    def forward(self, matched, enc_feats, raw_input, skip: SkipState):
        x = matched
        for block, feat in zip(self.blocks, reversed(enc_feats[:-1])):
            x = F.interpolate(x, size=feat.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, feat], dim=1))
        x = F.interpolate(x, size=raw_input.shape[-2:], mode="bilinear", align_corners=False)
        last = self.last(torch.cat([x, raw_input], dim=1))
        b, _, h, w = last.shape
        if skip is None:
            skip = last.new_zeros(b, self.skip_channels, h, w)
        elif skip.shape != (b, self.skip_channels, h, w):
            raise SizeError(f"skip state {tuple(skip.shape)} != {(b, self.skip_channels, h, w)}")
        logits = self.head(torch.cat([last, skip], dim=1))
        return logits, self.reduce(last)


class Regressor(nn.Module):
    def __init__(self, spec: RegressorSpec = RegressorSpec(), siamese: bool = True):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec.encoder_channels)
        # a non-shared reference encoder exists only for parameter-count comparisons
        self.ref_encoder = None if siamese else Encoder(spec.encoder_channels)
        self.match = GlobalMatch(spec.encoder_channels[-1], spec.global_conv_kernel)
        self.decoder = Decoder(spec)

    def _check(self, *tensors):
        for t in tensors:
            check_size(t.shape[-2], t.shape[-1], self.spec.num_stages)
        shapes = {tuple(t.shape[-2:]) for t in tensors}
        if len(shapes) != 1:
            raise SizeError(f"spatial sizes differ: {sorted(shapes)}")

    def encode(self, image, mask) -> torch.Tensor:
        self._check(image, mask)
        return self.encoder(image, mask)[-1]

    def encode_reference(self, ref_frame, ref_mask) -> torch.Tensor:
        self._check(ref_frame, ref_mask)
        enc = self.encoder if self.ref_encoder is None else self.ref_encoder
        return enc(ref_frame, ref_mask)[-1]

    def global_match(self, feat_ref, feat_cur):
        return self.match(feat_ref, feat_cur)

    def decode(self, matched, enc_feats, raw_input, skip: SkipState = None):
        return self.decoder(matched, enc_feats, raw_input, skip)

    def forward(self, frame, ref_frame, ref_mask, prev_mask, skip: SkipState = None, ref_feat=None):
        """One propagation step; returns (soft mask in [0, 1], new skip state).

        ``ref_feat`` may carry a cached reference embedding across a rollout.
        """
        if ref_feat is None:
            self._check(frame, prev_mask, ref_frame, ref_mask)
            ref_feat = self.encode_reference(ref_frame, ref_mask)
        else:
            self._check(frame, prev_mask)
        feats = self.encoder(frame, prev_mask)
        matched = self.match(ref_feat, feats[-1])
        logits, new_skip = self.decoder(matched, feats, torch.cat([frame, prev_mask], 1), skip)
        return torch.sigmoid(logits), new_skip


def rollout(model: Regressor, frames, ref_frame, ref_mask, prior_mask, skip: SkipState = None):
    """Propagate through a window one frame at a time.

    ``frames`` is (B, K, 3, H, W); returns masks (B, K, H, W) and the final
    skip state. Each prediction seeds the next step, so the chain stays
    differentiable end to end.
    """
    if frames.dim() != 5:
        raise SizeError("frames must be (B, K, 3, H, W)")
    ref_feat = model.encode_reference(ref_frame, ref_mask)
    prev = prior_mask
    masks = []
    for i in range(frames.shape[1]):
        prev, skip = model(frames[:, i], ref_frame, ref_mask, prev, skip, ref_feat=ref_feat)
        masks.append(prev[:, 0])
    return torch.stack(masks, dim=1), skip


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
