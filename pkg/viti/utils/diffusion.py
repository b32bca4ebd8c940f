"""Noise schedule, forward diffusion, training losses and the ancestral sampler.

All latent tensors are channel-last, [..., T, h, w, C]; masks are
[..., T, h, w, 1]. A leading batch axis is optional everywhere.
"""
from dataclasses import dataclass, replace
import logging

import torch

from viti.utils.codec import LatentVideo, _data, binarize_mask, fuse_inputs
from viti.utils.conditioning import drop_condition
from viti.utils.errors import ConfigError, ContractError, EmptyMaskError

log = logging.getLogger(__name__)

LOSS_FORMS = ['mean_masked', 'paper_literal']


class NoiseSchedule:
    """Forward-diffusion coefficients.

    Attributes:
        betas (torch.Tensor): per-step variances, float64, shape [T_diff].
        alphas_cumprod (torch.Tensor): cumulative products of (1 - beta).
        alphas_cumprod_prev (torch.Tensor): alphas_cumprod shifted right with a leading 1.
    """

    def __init__(self, betas, strict=True):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ConfigError('Noise schedule needs at least one step')
        lower_ok = (betas > 0).all() if strict else (betas >= 0).all()
        if not lower_ok or not (betas < 1).all():
            raise ConfigError('Betas must lie in (0, 1)')
        if strict and (betas[1:] < betas[:-1]).any():
            raise ConfigError('Betas must be nondecreasing')
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)
        self.alphas_cumprod_prev = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod[:-1]])

    @classmethod
    def linear(cls, num_timesteps=1000, beta_start=1e-4, beta_end=2e-2):
        return cls(torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop('kind', 'linear')
        if kind == 'linear':
            return cls.linear(**d)
        if kind == 'explicit':
            return cls(d['betas'])
        raise ConfigError('Schedule kind not recognized: ' + repr(kind))

    @property
    def num_timesteps(self):
        return self.betas.shape[0]

    def check_timestep(self, t):
        tt = torch.as_tensor(t)
        if ((tt < 0) | (tt >= self.num_timesteps)).any():
            raise ContractError('Timestep ' + str(t) + ' outside [0, ' + str(self.num_timesteps) + ')')

    def respace(self, steps):
        """Trailing-spaced subset of timesteps and the schedule that walks it.

        Returns:
            list: original timesteps, ascending, one per sampling step.
            NoiseSchedule: betas recomputed so that its alphas_cumprod equals
                the original alphas_cumprod at those timesteps.
        """
        n = self.num_timesteps
        if not (1 <= steps <= n):
            raise ContractError('Sampling steps must be in [1, ' + str(n) + '], got ' + str(steps))
        timesteps = sorted({int(round(n - k * n / steps)) - 1 for k in range(steps)})
        abar = self.alphas_cumprod[timesteps]
        prev = torch.cat([torch.ones(1, dtype=torch.float64), abar[:-1]])
        return timesteps, NoiseSchedule(1.0 - abar / prev, strict=False)


def _coef(values, t, like):
    """Gather schedule values at t and shape them to broadcast against like."""
    tt = torch.as_tensor(t)
    v = values[tt].to(like.dtype)
    if tt.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(z_0, t, eps, schedule):
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps.

    Args:
        z_0 (LatentVideo or tensor)
        t (int or LongTensor [B]): timestep(s) in [0, T_diff).
        eps (tensor): noise with the shape of z_0.
        schedule (NoiseSchedule)
    """
    schedule.check_timestep(t)
    z, e = _data(z_0), _data(eps)
    abar = _coef(schedule.alphas_cumprod, t, z)
    out = abar.sqrt() * z + (1 - abar).sqrt() * e
    if isinstance(z_0, LatentVideo):
        return LatentVideo(out, f_s=z_0.f_s, f_t=z_0.f_t, num_frames=z_0.num_frames)
    return out


###############################################################################
# Losses

def _per_sample(x, unbatched_ndim=4):
    return x if x.ndim > unbatched_ndim else x.unsqueeze(0)


def masked_diffusion_loss(eps, eps_hat, m_z, loss_form='mean_masked'):
    """Masked noise-prediction loss.

    'mean_masked': sum((m_z * (eps - eps_hat))**2) / count
    'paper_literal': sum((m_z * (eps - eps_hat) / count)**2), the normalizer
        taken inside the squared norm once over the whole latent clip. The
        noise objective has no sum over frames, unlike the pixel-space
        reconstruction metric.
    count is the number of active entries, the mask being broadcast over
    channels. Batched inputs are reduced per sample and averaged.

    Raises:
        EmptyMaskError: a sample has no active entry.
    """
    if loss_form not in LOSS_FORMS:
        raise ConfigError('loss_form must be one of ' + str(LOSS_FORMS) + ', got ' + repr(loss_form))
    e, eh, m = _per_sample(_data(eps)), _per_sample(_data(eps_hat)), _per_sample(_data(m_z))
    m = m.expand_as(e)
    count = binarize_mask(m).flatten(1).sum(dim=1)
    if (count == 0).any():
        raise EmptyMaskError('Masked loss needs a nonempty active set')
    sq = ((m * (e - eh)) ** 2).flatten(1).sum(dim=1)
    if loss_form == 'mean_masked':
        per = sq / count
    else:
        per = sq / count ** 2
    return per.mean()


def temporal_consistency_loss(eps_hat):
    """Sum over i of ||eps_hat^i - eps_hat^{i+1}||^2 along the latent frame axis.

    Zero for a single latent frame. Batched inputs are averaged over the batch.
    """
    eh = _per_sample(_data(eps_hat))
    if eh.shape[1] < 2:
        return eh.new_zeros(())
    diff = eh[:, 1:] - eh[:, :-1]
    return (diff ** 2).flatten(1).sum(dim=1).mean()


@dataclass
class LossReport:
    """Loss components; l_temporal is None when the temporal term is off."""
    l_masked: torch.Tensor
    l_temporal: torch.Tensor
    l_total: torch.Tensor
    alpha: float

    def as_dict(self):
        return {'l_masked': float(self.l_masked),
                'l_temporal': None if self.l_temporal is None else float(self.l_temporal),
                'l_total': float(self.l_total),
                'alpha': self.alpha}


def combine_losses(l_masked, l_temporal, alpha):
    """l_total = l_masked + alpha * l_temporal."""
    if l_temporal is None:
        return LossReport(l_masked, None, l_masked, alpha)
    return LossReport(l_masked, l_temporal, l_masked + alpha * l_temporal, alpha)


def total_loss(eps, eps_hat, m_z, alpha=0.1, loss_form='mean_masked', temporal=True):
    """Masked loss plus alpha times the temporal consistency loss."""
    l_masked = masked_diffusion_loss(eps, eps_hat, m_z, loss_form=loss_form)
    l_temporal = temporal_consistency_loss(eps_hat) if temporal else None
    return combine_losses(l_masked, l_temporal, alpha)


###############################################################################
# Sampling

def posterior_step(schedule, i, z_t, eps_hat, noise=None):
    """One ancestral DDPM step from index i to i - 1 of schedule.

    mean = (z_t - beta_i / sqrt(1 - abar_i) * eps_hat) / sqrt(alpha_i); for i > 0
    noise scaled by the posterior standard deviation is added.
    """
    dtype = z_t.dtype
    beta = schedule.betas[i].to(dtype)
    alpha = schedule.alphas[i].to(dtype)
    abar = schedule.alphas_cumprod[i].to(dtype)
    mean = (z_t - beta / (1 - abar).sqrt() * eps_hat) / alpha.sqrt()
    if i == 0 or noise is None:
        return mean
    abar_prev = schedule.alphas_cumprod_prev[i].to(dtype)
    var = beta * (1 - abar_prev) / (1 - abar)
    return mean + var.sqrt() * noise


def predict_noise(model, z_in, c, guidance_scale=1.0):
    """Model prediction, with classifier-free guidance when guidance_scale != 1."""
    eps_c = model(z_in, c)
    if guidance_scale == 1.0:
        return eps_c
    eps_u = model(z_in, drop_condition(c))
    return eps_u + guidance_scale * (eps_c - eps_u)


@torch.no_grad()
def sample(model, schedule, mask, masked_latent, c, steps, seed, guidance_scale=1.0):
    """Ancestral DDPM sampling from pure noise.

    At every step the model sees fuse_inputs(z, mask, masked_latent). The
    generator seeded with seed draws the initial noise first, then one noise
    tensor per step except the last.

    Args:
        model (callable): model(z_in, c) -> predicted noise, same shape as z_in.
        schedule (NoiseSchedule)
        mask (LatentMask or tensor)
        masked_latent (LatentVideo or tensor): encoded agnostic video.
        c (ConditionBundle): its timestep is replaced at every step.
        steps (int): number of denoising steps, at most T_diff.
        seed (int)

    Returns:
        LatentVideo (or tensor when masked_latent is a tensor): the z_0 estimate.
    """
    timesteps, walk = schedule.respace(steps)
    m, zm = _data(mask), _data(masked_latent)
    g = torch.Generator().manual_seed(int(seed))
    z = torch.randn(zm.shape, generator=g, dtype=zm.dtype)
    for i in reversed(range(len(timesteps))):
        ci = replace(c, timestep=timesteps[i])
        eps_hat = predict_noise(model, fuse_inputs(z, m, zm), ci, guidance_scale)
        noise = torch.randn(zm.shape, generator=g, dtype=zm.dtype) if i > 0 else None
        z = posterior_step(walk, i, z, eps_hat, noise)
    if isinstance(masked_latent, LatentVideo):
        return LatentVideo(z, f_s=masked_latent.f_s, f_t=masked_latent.f_t, num_frames=masked_latent.num_frames)
    return z
