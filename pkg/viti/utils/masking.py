"""Masking strategies used to train the inpainter.

Four generators (time-invariant box, time-variant box, instance and garment
segmentation) plus per-clip stochastic inversion. Generators are pure given an
explicit numpy Generator.
"""
from dataclasses import dataclass

import numpy as np
import torch

from viti.utils.codec import MaskVideo
from viti.utils.errors import ConfigError, EmptyMaskError

STRATEGIES = ['time_invariant_box', 'time_variant_box', 'instance', 'garment']


@dataclass
class MaskSpec:
    """Mask generation settings.

    Attributes:
        strategy (str): one of STRATEGIES.
        size_range (tuple): (lo, hi) box size as a fraction of H and of W,
            drawn independently for each axis. Defaults to (0.25, 0.5).
        inversion_prob (float): probability q of returning 1 - mask. Defaults to 0.
        seed (int): seed for the default rng stream.
        target_label (int or list): segmentation label(s) for 'instance'/'garment'. Defaults to 2
            (the garment label of the synthetic data).
    """
    strategy: str = 'time_invariant_box'
    size_range: tuple = (0.25, 0.5)
    inversion_prob: float = 0.0
    seed: int = 0
    target_label: int = 2

    def __post_init__(self):
        self.size_range = tuple(float(s) for s in self.size_range)
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError('Mask strategy not recognized: ' + repr(self.strategy)
                              + '. Allowable strategies are: ' + ', '.join(STRATEGIES))
        lo, hi = self.size_range
        if not (0 < lo <= hi <= 1):
            raise ConfigError('Box size fractions must satisfy 0 < lo <= hi <= 1, got ' + str(self.size_range))
        if not (0 <= self.inversion_prob <= 1):
            raise ConfigError('Inversion probability must be in [0, 1], got ' + str(self.inversion_prob))

    def rng(self):
        return np.random.default_rng(self.seed)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _as_mask(arr):
    return MaskVideo(torch.from_numpy(arr.astype(np.float32))[..., None])


def _draw_box(spec, height, width, rng):
    lo, hi = spec.size_range
    bh = min(height, max(1, int(round(rng.uniform(lo, hi) * height))))
    bw = min(width, max(1, int(round(rng.uniform(lo, hi) * width))))
    top = rng.integers(0, height - bh + 1)
    left = rng.integers(0, width - bw + 1)
    box = np.zeros((height, width), dtype=np.float32)
    box[top:top + bh, left:left + bw] = 1
    return box


def gen_time_invariant_box(spec, n_frames, height, width, rng=None):
    """One random box shared by all frames."""
    if rng is None:
        rng = spec.rng()
    box = _draw_box(spec, height, width, rng)
    return _as_mask(np.repeat(box[None], n_frames, axis=0))


def gen_time_variant_box(spec, n_frames, height, width, rng=None):
    """An independent random box per frame."""
    if rng is None:
        rng = spec.rng()
    frames = [_draw_box(spec, height, width, rng) for _ in range(n_frames)]
    return _as_mask(np.stack(frames))


def from_segmentation(seg, target_label):
    """Binary mask of the target label(s) per frame.

    Args:
        seg (array-like): [N, H, W] integer label maps.
        target_label (int or list): label(s) of the content of interest.

    Raises:
        EmptyMaskError: the label is absent from every frame.
    """
    seg = np.asarray(seg)
    mask = np.isin(seg, np.atleast_1d(target_label))
    if not mask.any():
        raise EmptyMaskError('Label ' + str(target_label) + ' absent in all ' + str(seg.shape[0]) + ' frames')
    return _as_mask(mask)


def maybe_invert(mask, q, rng):
    """With probability q return the complement. One decision per clip."""
    if not (0 <= q <= 1):
        raise ConfigError('Inversion probability must be in [0, 1], got ' + str(q))
    if rng.random() < q:
        return MaskVideo(1 - mask.data)
    return mask


def generate_mask(spec, n_frames, height, width, rng=None, seg=None):
    """Dispatch on spec.strategy, then apply maybe_invert with spec.inversion_prob.

    Args:
        seg (array-like, optional): label maps, required by 'instance' and 'garment'.
    """
    if rng is None:
        rng = spec.rng()
    if spec.strategy == 'time_invariant_box':
        mask = gen_time_invariant_box(spec, n_frames, height, width, rng)
    elif spec.strategy == 'time_variant_box':
        mask = gen_time_variant_box(spec, n_frames, height, width, rng)
    else:
        if seg is None:
            raise ConfigError('Strategy ' + spec.strategy + ' needs segmentation maps')
        mask = from_segmentation(seg, spec.target_label)
    return maybe_invert(mask, spec.inversion_prob, rng)
