"""Video quality metrics: SSIM, perceptual distance, VFID, masked
reconstruction error and a flicker proxy.

Videos are [N, H, W, 3] in [-1, 1] (Video objects, tensors or arrays);
metrics map them to [0, 1] first.
"""
from dataclasses import dataclass, fields
import logging

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.signal

from viti.utils.errors import AlignmentError, ConfigError, ContractError, EmptyMaskError, NumericError
from viti.utils.plugins import PERCEPTUAL_BACKBONES, VIDEO_FEATURES, Capability

log = logging.getLogger(__name__)


def to_numpy(v):
    """float64 numpy copy of a Video, MaskVideo, tensor or array."""
    if hasattr(v, 'data') and not isinstance(v, np.ndarray):
        v = v.data
    if hasattr(v, 'detach'):
        v = v.detach().cpu().numpy()
    return np.asarray(v, dtype=np.float64)


def to_unit(v):
    """[-1, 1] -> [0, 1]."""
    return (to_numpy(v) + 1.0) / 2.0


def _check_aligned(a, b, what):
    if a.shape != b.shape:
        raise AlignmentError(what + ': shapes ' + str(a.shape) + ' and ' + str(b.shape) + ' differ')


###############################################################################
# SSIM

def gaussian_window(size=11, sigma=1.5):
    """Normalized 2D Gaussian window."""
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range=1.0, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed SSIM of two frames [H, W, C] already mapped to [0, 1].

    Uses valid-mode Gaussian windows and averages over windows and channels.
    The window shrinks (keeping odd size) for frames smaller than it.
    """
    a, b = to_numpy(a), to_numpy(b)
    _check_aligned(a, b, 'ssim')
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(window_size, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    w = gaussian_window(size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    values = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        filt = lambda img: scipy.signal.convolve2d(img, w, mode='valid')
        mu_x, mu_y = filt(x), filt(y)
        sxx = filt(x * x) - mu_x ** 2
        syy = filt(y * y) - mu_y ** 2
        sxy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def ssim_video(a, b):
    """Mean frame SSIM of two videos in [-1, 1]."""
    a, b = to_unit(a), to_unit(b)
    _check_aligned(a, b, 'ssim_video')
    return float(np.mean([ssim(a[i], b[i]) for i in range(a.shape[0])]))


###############################################################################
# Perceptual distance

class PerceptualBackbone:
    """Frame distance plugin; exact LPIPS needs pretrained weights."""

    def distance(self, a, b):
        raise NotImplementedError


@PERCEPTUAL_BACKBONES.register('gradient_stub', Capability('gradient_stub', 'perceptual', 1))
class GradientMagnitudeBackbone(PerceptualBackbone):
    """Mean absolute difference of gradient magnitudes over several scales."""

    def __init__(self, scales=(1, 2, 4)):
        self.scales = scales

    @staticmethod
    def _pool(x, k):
        if k == 1:
            return x
        h, w = (x.shape[0] // k) * k, (x.shape[1] // k) * k
        x = x[:h, :w]
        return x.reshape(h // k, k, w // k, k, -1).mean(axis=(1, 3))

    @staticmethod
    def _grad_mag(x):
        gy = np.diff(x, axis=0, append=x[-1:])
        gx = np.diff(x, axis=1, append=x[:, -1:])
        return np.sqrt(gx ** 2 + gy ** 2)

    def distance(self, a, b):
        d = []
        for k in self.scales:
            pa, pb = self._pool(a, k), self._pool(b, k)
            if min(pa.shape[0], pa.shape[1]) < 2:
                continue
            d.append(np.mean(np.abs(self._grad_mag(pa) - self._grad_mag(pb))))
        return float(np.mean(d)) if d else 0.0


def lpips(a, b, backbone=None):
    """Mean per-frame perceptual distance of two videos in [-1, 1]."""
    if backbone is None:
        backbone = GradientMagnitudeBackbone()
    a, b = to_unit(a), to_unit(b)
    _check_aligned(a, b, 'lpips')
    return float(np.mean([backbone.distance(a[i], b[i]) for i in range(a.shape[0])]))


###############################################################################
# VFID

class FeatureExtractor3D:
    """Video -> [d] feature vector; I3D-style backbones plug in here."""
    dim = 0

    def extract(self, video):
        raise NotImplementedError


@VIDEO_FEATURES.register('handcrafted_stub', Capability('handcrafted_stub', 'video_features', 30))
class HandcraftedVideoFeatures(FeatureExtractor3D):
    """Pooled spatio-temporal statistics.

    Per channel and per cell of a grid x grid split: mean and standard
    deviation; per channel: mean absolute temporal difference and mean spatial
    gradient magnitude. d = grid^2 * 3 * 2 + 6.
    """

    def __init__(self, grid=2):
        self.grid = grid
        self.dim = grid * grid * 3 * 2 + 6

    def extract(self, video):
        v = to_unit(video)
        n, h, w, c = v.shape
        feats = []
        for i in range(self.grid):
            for j in range(self.grid):
                cell = v[:, i * h // self.grid:(i + 1) * h // self.grid, j * w // self.grid:(j + 1) * w // self.grid]
                feats.extend(cell.mean(axis=(0, 1, 2)))
                feats.extend(cell.std(axis=(0, 1, 2)))
        if n > 1:
            feats.extend(np.abs(np.diff(v, axis=0)).mean(axis=(0, 1, 2)))
        else:
            feats.extend(np.zeros(c))
        feats.extend(GradientMagnitudeBackbone._grad_mag(v.mean(axis=0)).mean(axis=(0, 1)))
        return np.asarray(feats, dtype=np.float64)


def _psd_sqrt(s):
    vals, vecs = scipy.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps=1e-6):
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    eps * I is added to both covariances. The trace of the cross term is
    computed as Tr((S1^(1/2) S2 S1^(1/2))^(1/2)) with eigenvalues clamped at 0.

    Raises:
        NumericError: a regularized covariance has a clearly negative eigenvalue.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise AlignmentError('Feature dimensions differ: ' + str(mu1.shape) + ' vs ' + str(mu2.shape))
    eye = np.eye(s1.shape[0])
    s1, s2 = s1 + eps * eye, s2 + eps * eye
    for name, s in [('real', s1), ('generated', s2)]:
        low = scipy.linalg.eigvalsh(s).min()
        if low < -1e-8 * max(1.0, np.abs(s).max()):
            raise NumericError('Covariance of ' + name + ' features is not PSD after regularization '
                               '(min eigenvalue ' + str(low) + ')')
    root1 = _psd_sqrt(s1)
    cross = root1 @ s2 @ root1
    tr_covmean = np.sqrt(np.clip(scipy.linalg.eigvalsh((cross + cross.T) / 2), 0, None)).sum()
    diff = mu1 - mu2
    d = diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_covmean
    return float(max(d, 0.0))


def vfid_from_features(real_feats, gen_feats, eps=1e-6):
    """Fréchet distance between Gaussian fits of two feature sets [n, d]."""
    fr, fg = np.atleast_2d(real_feats), np.atleast_2d(gen_feats)
    if fr.shape[0] < 2 or fg.shape[0] < 2:
        raise ContractError('VFID needs at least two clips per set')
    if fr.shape[0] < fr.shape[1] + 1 or fg.shape[0] < fg.shape[1] + 1:
        log.info('VFID sets smaller than d+1=%d; relying on %g*I regularization', fr.shape[1] + 1, eps)
    return frechet_distance(fr.mean(axis=0), np.cov(fr, rowvar=False),
                            fg.mean(axis=0), np.cov(fg, rowvar=False), eps=eps)


def vfid(real_set, gen_set, fx=None):
    """VFID of two clip sets through a FeatureExtractor3D."""
    if fx is None:
        fx = HandcraftedVideoFeatures()
    fr = np.stack([fx.extract(v) for v in real_set])
    fg = np.stack([fx.extract(v) for v in gen_set])
    return vfid_from_features(fr, fg)


###############################################################################
# Masked reconstruction and flicker

def inpaint_reconstruction(x0, xp, m0, loss_form='mean_masked'):
    """Pixel-space masked reconstruction error of videos in [-1, 1].

    'mean_masked': sum((m * (x0 - xp))**2) / count over the whole clip.
    'paper_literal': sum over frames of sum((m_i * (x0_i - xp_i) / count_i)**2),
        the normalizer taken inside the squared norm of each frame. Frames
        with an empty mask are skipped. This differs from the training loss
        of the same name, which normalizes once over the whole clip.
    The mask is broadcast over the 3 channels and counted per channel.

    Raises:
        EmptyMaskError: the mask is empty.
    """
    x0, xp, m = to_numpy(x0), to_numpy(xp), to_numpy(m0)
    _check_aligned(x0, xp, 'inpaint_reconstruction')
    if m.shape[:-1] != x0.shape[:-1]:
        raise AlignmentError('inpaint_reconstruction: mask ' + str(m.shape) + ' vs video ' + str(x0.shape))
    m = np.broadcast_to(m, x0.shape)
    active = (m != 0)
    if not active.any():
        raise EmptyMaskError('Reconstruction error needs a nonempty mask')
    sq = (m * (x0 - xp)) ** 2
    if loss_form == 'mean_masked':
        return float(sq.sum() / active.sum())
    if loss_form == 'paper_literal':
        total = 0.0
        for i in range(x0.shape[0]):
            count = active[i].sum()
            if count:
                total += sq[i].sum() / count ** 2
        return float(total)
    raise ConfigError('loss_form not recognized: ' + repr(loss_form))


def flicker_proxy(v):
    """Mean absolute difference of consecutive frames in [0, 1] units.

    A cheap stand-in for temporal-flicker scores, not the VBench metric.
    """
    u = to_unit(v)
    if u.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(u, axis=0)).mean())


###############################################################################
# Reports

@dataclass
class MetricReport:
    """Metrics of one clip (or of a clip set for vfid). Absent inputs leave None."""
    ssim: float = None
    lpips: float = None
    vfid: float = None
    inpaint_rec: float = None
    flicker: float = None

    COLUMNS = {'ssim': 'SSIM', 'lpips': 'LPIPS', 'vfid': 'VFID', 'inpaint_rec': 'InpaintRec', 'flicker': 'Flicker'}

    def to_record(self):
        return {self.COLUMNS[f.name]: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}


def evaluate_clip(real, gen, mask=None, backbone=None, loss_form='mean_masked'):
    """Per-clip MetricReport (SSIM, LPIPS, flicker of gen, masked error when mask is given)."""
    report = MetricReport(ssim=ssim_video(real, gen), lpips=lpips(real, gen, backbone), flicker=flicker_proxy(gen))
    if mask is not None:
        report.inpaint_rec = inpaint_reconstruction(real, gen, mask, loss_form=loss_form)
    return report


def summarize(reports, vfid_value=None, names=None):
    """Per-clip rows plus an aggregate 'mean' row, as a DataFrame."""
    rows = [r.to_record() for r in reports]
    df = pd.DataFrame(rows, index=names)
    if vfid_value is not None and 'VFID' not in df.columns:
        df['VFID'] = np.nan
    agg = df.mean(numeric_only=True)
    if vfid_value is not None:
        agg['VFID'] = vfid_value
    df.loc['mean'] = agg
    df.index.name = 'clip'
    return df


def compare_stages(videos_by_stage):
    """Flicker proxy of each stage's outputs, one row per stage.

    Args:
        videos_by_stage (dict): stage name -> list of generated videos.
    """
    rows = {stage: {'Flicker': float(np.mean([flicker_proxy(v) for v in vids]))}
            for stage, vids in videos_by_stage.items()}
    return pd.DataFrame.from_dict(rows, orient='index')
