"""Condition builders: text embedding, garment encoder, pose encoder.

Pretrained encoders are plugins; the stubs registered here are deterministic
seeded maps so the whole pipeline trains without external weights.
"""
from dataclasses import dataclass, replace
import hashlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from viti.utils.codec import _data, temporal_groups
from viti.utils.errors import AlignmentError, ConfigError, ContractError, EmptyMaskError, ExtractorError
from viti.utils.plugins import TEXT_EMBEDDERS, VISUAL_EXTRACTORS, Capability


###############################################################################
# Types

@dataclass
class GarmentImage:
    """Reference garment image, data [H_g, W_g, 3] in [-1, 1]."""
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[-1] != 3:
            raise ContractError('Garment image must be [H, W, 3], got ' + str(tuple(self.data.shape)))
        if not torch.isfinite(self.data).all():
            raise ContractError('Garment image contains non-finite entries')


@dataclass
class PoseVideo:
    """Dense-pose channel map, data [N, H, W, P]."""
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ContractError('Pose video must be [N, H, W, P], got ' + str(tuple(self.data.shape)))


@dataclass
class ConditionBundle:
    """Everything the denoiser is conditioned on besides z_t.

    Tensors may carry a leading batch axis. Padded token positions are marked
    False in text_mask / garment_mask; None means all positions are valid.

    Attributes:
        text_tokens (torch.Tensor): [(B,) M, text_dim]; M may be 0.
        garment_tokens (torch.Tensor): [(B,) K, garment_dim]; K = 0 when no garment.
        pose_latent (torch.Tensor or None): latent-shaped pose prior.
        timestep (int or torch.LongTensor): diffusion step(s).
    """
    text_tokens: torch.Tensor
    garment_tokens: torch.Tensor
    pose_latent: torch.Tensor = None
    timestep: object = 0
    text_mask: torch.Tensor = None
    garment_mask: torch.Tensor = None

    @property
    def num_text_tokens(self):
        return self.text_tokens.shape[-2]

    @property
    def num_garment_tokens(self):
        return 0 if self.garment_tokens is None else self.garment_tokens.shape[-2]


###############################################################################
# Plugin interfaces and stubs

class TextEmbedder:
    """prompt -> [M, dim]. Deterministic for a fixed prompt."""
    dim = 0
    max_tokens = 0

    def embed(self, prompt):
        raise NotImplementedError


@TEXT_EMBEDDERS.register('hash_stub', Capability('hash_stub', 'text', 32))
class HashTextEmbedder(TextEmbedder):
    """One seeded Gaussian vector per lower-cased word, plus a position offset.

    The empty prompt embeds to M = 0 tokens.
    """

    def __init__(self, dim=32, max_tokens=16):
        self.dim = dim
        self.max_tokens = max_tokens

    def _word_vector(self, word, position):
        digest = hashlib.sha256(word.encode('utf-8')).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], 'little'))
        v = rng.standard_normal(self.dim) / np.sqrt(self.dim)
        freqs = np.arange(self.dim) / self.dim
        return v + 0.1 * np.sin(position * np.pi * (1 + freqs))

    def embed(self, prompt):
        words = prompt.lower().split()[:self.max_tokens]
        if not words:
            return torch.zeros(0, self.dim)
        arr = np.stack([self._word_vector(w, i) for i, w in enumerate(words)])
        return torch.from_numpy(arr.astype(np.float32))


class VisualFeatureExtractor:
    """GarmentImage -> [K_b, dim] tokens. K_b depends only on the image size."""
    name = 'visual'
    dim = 0

    def extract(self, img):
        raise NotImplementedError

    def num_tokens(self, height, width):
        raise NotImplementedError


class PatchProjectionExtractor(VisualFeatureExtractor):
    """Fixed seeded linear map over non-overlapping patch x patch cells."""

    def __init__(self, name='patch', patch=8, dim=16, seed=0):
        self.name = name
        self.patch = patch
        self.dim = dim
        g = torch.Generator().manual_seed(seed)
        fan_in = patch * patch * 3
        self.weight = torch.randn(fan_in, dim, generator=g) / np.sqrt(fan_in)

    def num_tokens(self, height, width):
        return (height // self.patch) * (width // self.patch)

    def extract(self, img):
        x = _data(img)
        if x.shape[-3] % self.patch or x.shape[-2] % self.patch:
            raise ConfigError(self.name + ': image size ' + str(tuple(x.shape[-3:-1]))
                              + ' not divisible by patch ' + str(self.patch))
        cells = rearrange(x, '... (h a) (w b) c -> ... (h w) (a b c)', a=self.patch, b=self.patch)
        return cells @ self.weight.to(cells.dtype)


@VISUAL_EXTRACTORS.register('latent_stub', Capability('latent_stub', 'visual', 16, {'patch': 8}))
def latent_stub(**kwargs):
    kwargs.setdefault('patch', 8)
    kwargs.setdefault('dim', 16)
    kwargs.setdefault('seed', 1)
    return PatchProjectionExtractor(name='latent_stub', **kwargs)


@VISUAL_EXTRACTORS.register('semantic_stub', Capability('semantic_stub', 'visual', 32, {'patch': 16}))
def semantic_stub(**kwargs):
    kwargs.setdefault('patch', 16)
    kwargs.setdefault('dim', 32)
    kwargs.setdefault('seed', 2)
    return PatchProjectionExtractor(name='semantic_stub', **kwargs)


###############################################################################
# Trainable encoders

class GarmentEncoder(nn.Module):
    """Two linear branches, token-axis concatenation, shared MLP."""

    def __init__(self, dim_a, dim_b, garment_dim, hidden=None):
        super().__init__()
        hidden = hidden or garment_dim
        self.linear_a = nn.Linear(dim_a, hidden)
        self.linear_b = nn.Linear(dim_b, hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, garment_dim))
        self.out_dim = garment_dim

    def forward(self, tokens_a, tokens_b):
        x = torch.cat([self.linear_a(tokens_a), self.linear_b(tokens_b)], dim=-2)
        return self.mlp(x)


class PoseEncoder(nn.Module):
    """Per-position MLP from P pose channels to C latent channels."""

    def __init__(self, pose_channels, latent_channels, hidden=32):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(pose_channels, hidden), nn.GELU(), nn.Linear(hidden, latent_channels))
        self.out_dim = latent_channels

    def forward(self, pooled):
        return self.mlp(pooled)


def pool_to_latent(x, f_s, f_t):
    """Average-pool [N, H, W, P] over causal temporal groups and f_s x f_s cells."""
    frames = torch.stack([x[g].mean(dim=0) for g in temporal_groups(x.shape[0], f_t)])
    if f_s == 1:
        return frames
    return rearrange(frames, 't (h a) (w b) p -> t h w (a b) p', a=f_s, b=f_s).mean(dim=-2)


def encode_garment(img, branch_a, branch_b, encoder):
    """Garment tokens [K_a + K_b, garment_dim].

    Raises:
        ExtractorError: carrying the failing branch name.
    """
    tokens = []
    for branch in (branch_a, branch_b):
        try:
            tokens.append(branch.extract(img))
        except ConfigError:
            raise
        except Exception as e:
            raise ExtractorError(getattr(branch, 'name', repr(branch)), e) from e
    p = next(encoder.parameters())
    return encoder(tokens[0].to(p.dtype), tokens[1].to(p.dtype))


def encode_pose(pose, target_shape, f_s, f_t, encoder):
    """Pose latent with exactly the latent-noise shape target_shape (T, h, w, C).

    Raises:
        AlignmentError: pooled geometry or channel count differs from target_shape.
    """
    x = _data(pose)
    p = next(encoder.parameters())
    if x.shape[1] % f_s or x.shape[2] % f_s:
        raise AlignmentError('Pose map ' + str(tuple(x.shape)) + ' not divisible by f_s=' + str(f_s))
    pooled = pool_to_latent(x.to(p.dtype), f_s, f_t)
    if tuple(pooled.shape[:3]) != tuple(target_shape[:3]) or encoder.out_dim != target_shape[3]:
        raise AlignmentError('Pose latent ' + str(tuple(pooled.shape[:3]) + (encoder.out_dim,))
                             + ' does not match latent shape ' + str(tuple(target_shape)))
    return encoder(pooled)


###############################################################################
# Bundles

def build_condition(prompt, garment, pose, t, embedder, garment_fn=None, pose_fn=None,
                    garment_dim=0, num_timesteps=None):
    """Assemble a ConditionBundle.

    Args:
        prompt (str): may be empty.
        garment (GarmentImage, optional): absent -> K = 0 garment tokens.
        pose (PoseVideo, optional): absent -> no pose latent.
        t (int): diffusion timestep.
        embedder (TextEmbedder)
        garment_fn (callable, optional): GarmentImage -> tokens.
        pose_fn (callable, optional): PoseVideo -> pose latent.
        garment_dim (int): token width of the empty garment tensor.
        num_timesteps (int, optional): when given, t is range-checked.
    """
    if num_timesteps is not None and not (0 <= int(t) < num_timesteps):
        raise ContractError('Timestep ' + str(t) + ' outside [0, ' + str(num_timesteps) + ')')
    text = embedder.embed(prompt)
    if garment is None:
        garment_tokens = text.new_zeros(0, garment_dim)
    else:
        if garment_fn is None:
            raise ConfigError('Garment given but the model has no garment encoder')
        garment_tokens = garment_fn(garment)
    pose_latent = None
    if pose is not None:
        if pose_fn is None:
            raise ConfigError('Pose given but the model has no pose encoder')
        pose_latent = pose_fn(pose)
    return ConditionBundle(text, garment_tokens, pose_latent, int(t))


def drop_condition(c):
    """Unconditional counterpart: no text and no garment tokens. Pose is kept."""
    text = c.text_tokens[..., :0, :]
    garment = None if c.garment_tokens is None else c.garment_tokens[..., :0, :]
    return replace(c, text_tokens=text, garment_tokens=garment, text_mask=None, garment_mask=None)


def _pad_tokens(seqs):
    width = max(s.shape[0] for s in seqs)
    dim = seqs[0].shape[-1]
    out = seqs[0].new_zeros(len(seqs), width, dim)
    valid = torch.zeros(len(seqs), width, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
        valid[i, :s.shape[0]] = True
    return out, valid


def stack_conditions(bundles):
    """Batch unbatched bundles, padding token axes and recording valid positions."""
    text, text_mask = _pad_tokens([b.text_tokens for b in bundles])
    garment, garment_mask = _pad_tokens([b.garment_tokens for b in bundles])
    pose = None
    if any(b.pose_latent is not None for b in bundles):
        ref = next(b.pose_latent for b in bundles if b.pose_latent is not None)
        pose = torch.stack([b.pose_latent if b.pose_latent is not None else torch.zeros_like(ref)
                            for b in bundles])
    t = torch.tensor([int(b.timestep) for b in bundles], dtype=torch.long)
    return ConditionBundle(text, garment, pose, t, text_mask, garment_mask)


def crop_garment(video, mask, frame=0, size=(32, 32)):
    """Garment image cut from one frame of a clip through its garment mask.

    The mask's bounding box is cropped, pixels outside the mask are set to
    white (1.0) and the crop is resized to size.

    Raises:
        EmptyMaskError: the mask is empty in that frame.
    """
    x, m = _data(video)[frame], _data(mask)[frame, ..., 0]
    rows = torch.nonzero(m.any(dim=1)).flatten()
    cols = torch.nonzero(m.any(dim=0)).flatten()
    if rows.numel() == 0:
        raise EmptyMaskError('Garment mask empty in frame ' + str(frame))
    r0, r1, c0, c1 = int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1
    crop = torch.where(m[r0:r1, c0:c1, None] > 0, x[r0:r1, c0:c1], torch.ones_like(x[r0:r1, c0:c1]))
    crop = rearrange(crop, 'h w c -> 1 c h w')
    crop = F.interpolate(crop, size=tuple(size), mode='bilinear', align_corners=False)
    return GarmentImage(rearrange(crop, '1 c h w -> h w c').clamp(-1, 1))
