"""Pixel <-> latent boundary.

Video types, the video codec interface with two deterministic stubs, the mask
reshaper, agnostic-video construction and the latent fusion that forms the
denoiser input.

Classes:
    Video, MaskVideo, LatentVideo, LatentMask
    VideoCodec, IdentityCodec, OrthogonalCodec
"""
import math
from dataclasses import dataclass
from fractions import Fraction

import torch
import torch.nn.functional as F
from einops import rearrange

from viti.utils.errors import AlignmentError, ConfigError, ContractError
from viti.utils.plugins import CODECS, Capability


###############################################################################
# Domain types

@dataclass
class Video:
    """Pixel-space clip.

    Attributes:
        data (torch.Tensor): [N, H, W, 3], values in [-1, 1].
        fps (Fraction): frame rate, metadata only.
    """
    data: torch.Tensor
    fps: Fraction = Fraction(8)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 3 or self.data.shape[0] < 1:
            raise ContractError('Video data must be [N>=1, H, W, 3], got ' + str(tuple(self.data.shape)))
        if not torch.isfinite(self.data).all():
            raise ContractError('Video data contains non-finite entries')

    @property
    def num_frames(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass
class MaskVideo:
    """Binary inpainting mask, 1 marks pixels to modify. data is [N, H, W, 1]."""
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 1:
            raise ContractError('Mask data must be [N, H, W, 1], got ' + str(tuple(self.data.shape)))
        if not ((self.data == 0) | (self.data == 1)).all():
            raise ContractError('Mask data must be binary')

    @property
    def num_frames(self):
        return self.data.shape[0]

    def is_empty(self):
        return not bool((self.data != 0).any())


@dataclass
class LatentVideo:
    """Codec latent [T, h, w, C].

    Attributes:
        data (torch.Tensor): latent tensor.
        f_s (int): spatial compression factor.
        f_t (int): temporal compression factor.
        num_frames (int): pixel frame count N the latent decodes to.
    """
    data: torch.Tensor
    f_s: int = 1
    f_t: int = 1
    num_frames: int = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ContractError('Latent data must be [T, h, w, C], got ' + str(tuple(self.data.shape)))
        if self.num_frames is None:
            self.num_frames = 1 + (self.data.shape[0] - 1) * self.f_t

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class LatentMask:
    """Reshaped mask [T, h, w, 1] with entries in [0, 1]; nonzero entries are active."""
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 1:
            raise ContractError('Latent mask must be [T, h, w, 1], got ' + str(tuple(self.data.shape)))

    def active_count(self):
        return int((self.data != 0).sum())


###############################################################################
# Geometry helpers

def temporal_groups(n_frames, f_t):
    """Causal frame grouping: frame 0 alone, then consecutive groups of f_t.

    Pixel frame i (1-indexed) maps to latent frame 1 + ceil((i-1)/f_t). The last
    group is shorter when (n_frames - 1) is not divisible by f_t.

    Returns:
        list of lists of 0-based pixel frame indices, one list per latent frame.
    """
    groups = [[0]]
    for start in range(1, n_frames, f_t):
        groups.append(list(range(start, min(start + f_t, n_frames))))
    return groups


def latent_shape(n_frames, height, width, f_s, f_t, channels):
    """Shape (T, h, w, C) a codec with factors (f_s, f_t) produces."""
    if height % f_s or width % f_s:
        raise ConfigError('Frame size ' + str((height, width)) + ' not divisible by spatial factor ' + str(f_s))
    n_latent = 1 + math.ceil((n_frames - 1) / f_t)
    return (n_latent, height // f_s, width // f_s, channels)


def _data(x):
    return x.data if hasattr(x, 'data') and not isinstance(x, torch.Tensor) else x


def _check_aligned(a, b, what, dims=None):
    sa, sb = tuple(a.shape), tuple(b.shape)
    if dims is not None:
        sa, sb = sa[:dims], sb[:dims]
    if sa != sb:
        raise AlignmentError(what + ': shapes ' + str(tuple(a.shape)) + ' and ' + str(tuple(b.shape)) + ' are not aligned')


###############################################################################
# Operations

def make_agnostic(video, mask):
    """x_0 * (1 - m_0). Masked pixels become exactly 0.

    Args:
        video (Video or tensor [..., N, H, W, 3])
        mask (MaskVideo or tensor [..., N, H, W, 1])

    Returns:
        Video (or tensor when given tensors)
    """
    x, m = _data(video), _data(mask)
    _check_aligned(x, m, 'make_agnostic', dims=x.ndim - 1)
    out = x * (1 - m)
    if isinstance(video, Video):
        return Video(out, fps=video.fps)
    return out


def reshape_mask(mask, target_shape, f_s, f_t):
    """The reshaper R: pixel mask -> latent mask.

    Each causal temporal group is max-pooled, so any masked pixel frame activates
    its latent frame; the pooled frames are then bilinearly resized to (h, w)
    and clamped to [0, 1].

    Args:
        mask (MaskVideo or tensor [N, H, W, 1])
        target_shape (tuple): (T, h, w[, C]) of the paired latent.
        f_s (int): spatial factor.
        f_t (int): temporal factor.

    Returns:
        LatentMask (or tensor when given a tensor)

    Raises:
        ConfigError: target dims inconsistent with the codec factors.
    """
    m = _data(mask).float() if not _data(mask).is_floating_point() else _data(mask)
    n_frames, height, width = m.shape[0], m.shape[1], m.shape[2]
    expected = latent_shape(n_frames, height, width, f_s, f_t, 1)[:3]
    if tuple(target_shape[:3]) != expected:
        raise ConfigError('Latent target ' + str(tuple(target_shape[:3])) + ' inconsistent with mask '
                          + str((n_frames, height, width)) + ' and factors f_s=' + str(f_s) + ', f_t=' + str(f_t)
                          + '; expected ' + str(expected))

    pooled = torch.stack([m[g].amax(dim=0) for g in temporal_groups(n_frames, f_t)])
    if f_s == 1:
        out = pooled
    else:
        x = rearrange(pooled, 't h w c -> t c h w')
        x = F.interpolate(x, size=expected[1:], mode='bilinear', align_corners=False)
        out = rearrange(x, 't c h w -> t h w c')
    out = out.clamp(0, 1)
    if isinstance(mask, MaskVideo):
        return LatentMask(out)
    return out


def binarize_mask(m_z):
    """Indicator [m_z != 0] used by the losses."""
    return (_data(m_z) != 0).to(_data(m_z).dtype)


def fuse_inputs(z_t, m_z, masked_latent):
    """Denoiser input: z_t + E(x_0 * (1 - m_0)) + m_z.

    The single-channel mask is replicated across the C latent channels.

    Args:
        z_t (LatentVideo or tensor [..., T, h, w, C])
        m_z (LatentMask or tensor [..., T, h, w, 1])
        masked_latent (LatentVideo or tensor, same shape as z_t)
    """
    z, m, zm = _data(z_t), _data(m_z), _data(masked_latent)
    _check_aligned(z, zm, 'fuse_inputs (noisy vs masked latent)')
    _check_aligned(z, m, 'fuse_inputs (latent vs mask)', dims=z.ndim - 1)
    out = z + zm + m.expand_as(z)
    if isinstance(z_t, LatentVideo):
        return LatentVideo(out, f_s=z_t.f_s, f_t=z_t.f_t, num_frames=z_t.num_frames)
    return out


def composite_output(generated, original, mask):
    """generated * m_0 + original * (1 - m_0)."""
    g, x, m = _data(generated), _data(original), _data(mask)
    _check_aligned(g, x, 'composite_output (generated vs original)')
    _check_aligned(g, m, 'composite_output (video vs mask)', dims=g.ndim - 1)
    out = g * m + x * (1 - m)
    if isinstance(original, Video):
        return Video(out, fps=original.fps)
    return out


###############################################################################
# Codecs

class VideoCodec:
    """Interface for a (causal) video VAE.

    Subclasses set f_s, f_t, channels and implement encode/decode on Video /
    LatentVideo. shareable declares whether one instance may serve concurrent
    workers.
    """
    f_s = 1
    f_t = 1
    channels = 3
    shareable = True

    def encode(self, video):
        raise NotImplementedError

    def decode(self, latent):
        raise NotImplementedError

    def latent_shape(self, n_frames, height, width):
        return latent_shape(n_frames, height, width, self.f_s, self.f_t, self.channels)


@CODECS.register('identity', Capability('identity', 'codec', 3, {'f_s': 1, 'f_t': 1}))
class IdentityCodec(VideoCodec):
    """f_s = f_t = 1; decode(encode(v)) is exact."""

    def encode(self, video):
        x = _data(video)
        return LatentVideo(x.clone(), f_s=1, f_t=1, num_frames=x.shape[0])

    def decode(self, latent):
        return Video(_data(latent).clone())


@CODECS.register('orthogonal', Capability('orthogonal', 'codec', 24, {'f_s': 2, 'f_t': 2}))
class OrthogonalCodec(VideoCodec):
    """Fixed orthogonal linear codec with f_s = f_t = 2.

    Every latent frame packs an f_t x f_s x f_s x 3 pixel block into
    C = 24 channels through a seeded orthogonal matrix. The first frame is
    replicated to fill its group (causal first frame) and a short trailing
    group repeats the last frame; both paddings are dropped on decode.
    """

    def __init__(self, f_s=2, f_t=2, seed=0):
        self.f_s, self.f_t = f_s, f_t
        self.channels = f_t * f_s * f_s * 3
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(self.channels, self.channels, generator=g, dtype=torch.float64)
        q, _ = torch.linalg.qr(a)
        self.basis = q

    def encode(self, video):
        x = _data(video)
        n_frames, height, width = x.shape[0], x.shape[1], x.shape[2]
        latent_shape(n_frames, height, width, self.f_s, self.f_t, self.channels)
        blocks = []
        for group in temporal_groups(n_frames, self.f_t):
            idx = group + [group[-1]] * (self.f_t - len(group))
            blocks.append(x[idx])
        v = torch.stack(blocks)
        v = rearrange(v, 't k (h a) (w b) c -> t h w (k a b c)', a=self.f_s, b=self.f_s)
        z = v @ self.basis.to(v.dtype)
        return LatentVideo(z, f_s=self.f_s, f_t=self.f_t, num_frames=n_frames)

    def decode(self, latent):
        z = _data(latent)
        n_frames = getattr(latent, 'num_frames', None)
        v = z @ self.basis.to(z.dtype).T
        v = rearrange(v, 't h w (k a b c) -> t k (h a) (w b) c', k=self.f_t, a=self.f_s, b=self.f_s)
        frames = torch.cat([v[0, :1], rearrange(v[1:], 't k h w c -> (t k) h w c')])
        if n_frames is None:
            n_frames = 1 + (z.shape[0] - 1) * self.f_t
        return Video(frames[:n_frames])
