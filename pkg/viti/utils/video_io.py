"""Reading and writing clips, masks, label maps and raw tensor containers.

On disk a clip is either a directory of zero-padded frame images
(frame_0000.png, ...) or a single safetensors file whose metadata header
records dims, dtype, range tag and fps. Masks are single-channel images with
values {0, 255}; label maps are single-channel indexed images.
"""
from fractions import Fraction
import os

import numpy as np
import torch
from PIL import Image
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

from viti.utils.codec import MaskVideo, Video
from viti.utils.conditioning import GarmentImage, PoseVideo
from viti.utils.dir_manager import make_directory
from viti.utils.errors import ContractError

FRAME_PREFIX = 'frame_'
RAW_SUFFIX = '.safetensors'


def frame_paths(folder):
    """Sorted image paths in folder."""
    if not os.path.isdir(folder):
        raise ContractError('Frame directory not found: ' + str(folder))
    names = sorted(f for f in os.listdir(folder) if f.lower().endswith(('.png', '.jpg', '.jpeg', '.bmp')))
    if not names:
        raise ContractError('No frame images in ' + str(folder))
    return [os.path.join(folder, f) for f in names]


def _read_stack(folder, mode):
    return np.stack([np.asarray(Image.open(p).convert(mode)) for p in frame_paths(folder)])


def _write_stack(arr, folder):
    make_directory(folder)
    paths = []
    for i, frame in enumerate(arr):
        p = os.path.join(folder, FRAME_PREFIX + str(i).zfill(4) + '.png')
        Image.fromarray(frame).save(p)
        paths.append(p)
    return paths


def to_uint8(x):
    """[-1, 1] floats -> uint8."""
    x = x.detach().cpu().numpy() if hasattr(x, 'detach') else np.asarray(x)
    return np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr):
    """uint8 -> [-1, 1] float32 tensor."""
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)


###############################################################################
# Videos

def read_video(path, fps=Fraction(8)):
    """Video from a frame directory or a raw safetensors container."""
    if str(path).endswith(RAW_SUFFIX):
        return load_raw(path)
    return Video(from_uint8(_read_stack(path, 'RGB')), fps=fps)


def write_video(video, path, raw=False):
    """Write frames as PNG files (or one raw container when raw is True)."""
    if raw:
        return save_raw(video, path if str(path).endswith(RAW_SUFFIX) else str(path) + RAW_SUFFIX)
    return _write_stack(to_uint8(video.data), path)


def save_raw(video, path, range_tag='[-1,1]'):
    """Raw tensor container with a small metadata header."""
    data = video.data.detach().cpu().numpy()
    meta = {'dims': 'x'.join(str(s) for s in data.shape), 'dtype': str(data.dtype),
            'range': range_tag, 'fps': str(getattr(video, 'fps', ''))}
    parent = os.path.dirname(str(path))
    if parent:
        make_directory(parent)
    save_file({'video': np.ascontiguousarray(data)}, str(path), metadata=meta)
    return str(path)


def load_raw(path):
    with safe_open(str(path), framework='numpy') as f:
        meta = f.metadata() or {}
    data = load_file(str(path))['video']
    if meta.get('range', '[-1,1]') != '[-1,1]':
        raise ContractError('Unsupported range tag ' + meta['range'] + ' in ' + str(path))
    fps = Fraction(meta['fps']) if meta.get('fps') else Fraction(8)
    return Video(torch.from_numpy(data.copy()), fps=fps)


###############################################################################
# Masks, label maps, images, pose

def read_mask(path):
    """{0, 255} single-channel frames -> MaskVideo."""
    arr = _read_stack(path, 'L')
    return MaskVideo(torch.from_numpy((arr > 127).astype(np.float32))[..., None])


def write_mask(mask, path):
    arr = (mask.data[..., 0].detach().cpu().numpy() > 0).astype(np.uint8) * 255
    return _write_stack(arr, path)


def read_labels(path):
    """[N, H, W] integer label maps."""
    return _read_stack(path, 'L').astype(np.int64)


def write_labels(labels, path):
    return _write_stack(np.asarray(labels).astype(np.uint8), path)


def read_garment(path):
    return GarmentImage(from_uint8(np.asarray(Image.open(path).convert('RGB'))))


def write_garment(img, path):
    parent = os.path.dirname(str(path))
    if parent:
        make_directory(parent)
    Image.fromarray(to_uint8(img.data)).save(path)
    return str(path)


def read_pose(path):
    """Pose maps stored as RGB frames, read back in [0, 1]."""
    return PoseVideo(torch.from_numpy(_read_stack(path, 'RGB').astype(np.float32) / 255.0))


def write_pose(pose, path):
    arr = np.clip(np.round(pose.data.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    return _write_stack(arr, path)
