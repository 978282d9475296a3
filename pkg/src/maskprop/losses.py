"""Training objectives: balanced BCE, WGAN-GP spatial/temporal terms and their assembly."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, NamedTuple, Optional, Union

import torch

from .core import TrainConfig
from .critics import PatchCritic, mask_image, spatial_score, temporal_score

EPS_CLAMP = 1e-7

Scalar = Union[float, torch.Tensor]


class NonDifferentiableCriticError(RuntimeError):
    pass


def compute_beta(gt_mask: torch.Tensor) -> torch.Tensor:
    """Fraction of background pixels over the last two (H, W) dims."""
    return 1.0 - gt_mask.float().mean(dim=(-2, -1))


def balanced_bce(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS_CLAMP) -> torch.Tensor:
    """Class-balanced BCE summed over pixels and averaged over the K frames.

    ``pred`` and ``gt`` are (K, H, W) or (B, K, H, W); batches are averaged.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")
    if pred.dim() == 3:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    gt = gt.to(pred.dtype)
    p = pred.clamp(eps, 1.0 - eps)
    beta = compute_beta(gt)[..., None, None]
    per_pixel = beta * gt * torch.log(p) + (1.0 - beta) * (1.0 - gt) * torch.log(1.0 - p)
    per_frame = -per_pixel.sum(dim=(-2, -1))
    return per_frame.mean(dim=-1).mean()


def _per_sample(scores: torch.Tensor) -> torch.Tensor:
    return scores.reshape(scores.shape[0], -1).mean(dim=1) if scores.dim() > 1 else scores


def gradient_penalty(
    critic_fn: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    eps: Optional[torch.Tensor] = None,
    create_graph: bool = True,
) -> torch.Tensor:
    """Mean of (||grad critic(x_tilde)|| - 1)^2 over random real/fake interpolates.

    One interpolation weight is drawn per sample unless ``eps`` is given.
    Score maps are averaged per sample before differentiation.
    """
    if real.shape != fake.shape:
        raise ValueError("real and fake samples must share a shape")
    b = real.shape[0]
    if eps is None:
        eps = torch.rand(b, generator=generator, dtype=real.dtype, device=real.device)
    eps = eps.reshape(b, *([1] * (real.dim() - 1))).to(real.dtype)
    x_tilde = (eps * real.detach() + (1.0 - eps) * fake.detach()).requires_grad_(True)
    out = _per_sample(critic_fn(x_tilde))
    if not out.requires_grad:
        raise NonDifferentiableCriticError("critic output is not differentiable")
    (grad,) = torch.autograd.grad(out.sum(), x_tilde, create_graph=create_graph, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_tilde)
    norms = grad.reshape(b, -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


class AdversarialTerms(NamedTuple):
    gap: torch.Tensor         # mean critic(real) - mean critic(fake)
    gp: torch.Tensor
    fake_score: torch.Tensor  # mean critic(fake), the only term depending on the regressor


def _terms(score_fn, real, fake, generator, with_gp) -> AdversarialTerms:
    real_score = score_fn(real).mean()
    fake_score = score_fn(fake).mean()
    if with_gp:
        gp = gradient_penalty(score_fn, real, fake, generator=generator)
    else:
        gp = torch.zeros((), dtype=real.dtype)
    return AdversarialTerms(real_score - fake_score, gp, fake_score)


def spatial_loss_terms(
    critic: Callable, frames, gt_masks, pred_masks, generator=None, with_gp: bool = True
) -> AdversarialTerms:
    """Spatial critic terms over K aligned frames.

    ``frames`` is (B, K, 3, H, W), masks (B, K, H, W). Every frame is scored
    separately by the same critic; averaging over B*K samples equals the
    per-frame average of batch expectations.
    """
    if gt_masks.shape != pred_masks.shape or frames.shape[:2] != gt_masks.shape[:2]:
        raise ValueError("frames, gt and predicted masks are misaligned")
    b, k = gt_masks.shape[:2]
    real = mask_image(frames, gt_masks).flatten(0, 1)
    fake = mask_image(frames, pred_masks).flatten(0, 1)
    score_fn = (lambda x: spatial_score(critic, x)) if isinstance(critic, PatchCritic) else critic
    return _terms(score_fn, real, fake, generator, with_gp)


def temporal_loss_terms(
    critic: Callable, frames, gt_masks, pred_masks, generator=None, with_gp: bool = True
) -> AdversarialTerms:
    """Temporal critic terms over whole (B, K, 3, H, W) windows."""
    if gt_masks.shape != pred_masks.shape or frames.shape[:2] != gt_masks.shape[:2]:
        raise ValueError("frames, gt and predicted masks are misaligned")
    if isinstance(critic, PatchCritic) and critic.spec.window != gt_masks.shape[1]:
        raise ValueError(f"temporal critic expects K={critic.spec.window}, got {gt_masks.shape[1]}")
    real = mask_image(frames, gt_masks)
    fake = mask_image(frames, pred_masks)
    score_fn = (lambda x: temporal_score(critic, x)) if isinstance(critic, PatchCritic) else critic
    return _terms(score_fn, real, fake, generator, with_gp)


def adversarial_objective(terms: AdversarialTerms, lambda_gp: float):
    """Value of the critic-side objective: gap minus the weighted penalty."""
    return terms.gap - lambda_gp * terms.gp


@dataclass
class LossBreakdown:
    ce: Scalar = 0.0
    spatial: Scalar = 0.0
    temporal: Scalar = 0.0
    gp_spatial: Scalar = 0.0
    gp_temporal: Scalar = 0.0
    total_regressor: Scalar = 0.0
    total_critic_s: Scalar = 0.0
    total_critic_t: Scalar = 0.0

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        return out

    @staticmethod
    def columns():
        return [f.name for f in fields(LossBreakdown)]


_ZERO = AdversarialTerms(torch.tensor(0.0), torch.tensor(0.0), torch.tensor(0.0))


def assemble_losses(
    ce: Scalar,
    spatial: Optional[AdversarialTerms],
    temporal: Optional[AdversarialTerms],
    config: TrainConfig,
) -> LossBreakdown:
    """Combine component terms into per-network minimization objectives.

    The regressor minimizes weighted BCE minus the weighted critic scores of
    its own predictions; each critic minimizes the negated gap plus its
    weighted gradient penalty. Missing terms count as zero.
    """
    spatial = spatial or _ZERO
    temporal = temporal or _ZERO
    total_regressor = (
        config.lambda_ce * ce
        - config.lambda_s * spatial.fake_score
        - config.lambda_t * temporal.fake_score
    )
    return LossBreakdown(
        ce=ce,
        spatial=adversarial_objective(spatial, config.lambda_gp),
        temporal=adversarial_objective(temporal, config.lambda_gp),
        gp_spatial=spatial.gp,
        gp_temporal=temporal.gp,
        total_regressor=total_regressor,
        total_critic_s=-spatial.gap + config.lambda_gp * spatial.gp,
        total_critic_t=-temporal.gap + config.lambda_gp * temporal.gp,
    )
