"""Synthetic moving-figure clips with known segmentation.

Each clip shows a figure (label 1) wearing a striped garment (label 2) that
drifts across a gradient background. Dense-pose stand-ins are smooth
coordinate maps over the figure. Used for desk-scale training and tests.
"""
import logging
import os

import numpy as np
import pandas as pd
import torch

from viti.utils import video_io
from viti.utils.codec import MaskVideo, Video
from viti.utils.conditioning import PoseVideo, crop_garment
from viti.utils.dir_manager import make_directory

log = logging.getLogger(__name__)

BACKGROUND, PERSON, GARMENT = 0, 1, 2

COLORS = {
    'red': (0.85, 0.15, 0.15),
    'blue': (0.15, 0.25, 0.85),
    'green': (0.15, 0.7, 0.25),
    'yellow': (0.9, 0.85, 0.2),
    'purple': (0.55, 0.2, 0.7),
    'orange': (0.95, 0.55, 0.1),
}
PATTERNS = ['plain', 'striped']
MANIFEST_COLUMNS = ['id', 'video', 'seg', 'pose', 'garment', 'prompt']


def generate_clip(rng, n_frames=8, height=32, width=24):
    """One synthetic clip.

    Returns:
        dict with keys video (Video), seg ([N, H, W] int array), pose
        (PoseVideo), prompt (str).
    """
    bg_top, bg_bottom = rng.uniform(0.2, 0.8, 3), rng.uniform(0.2, 0.8, 3)
    ramp = np.linspace(0, 1, height)[:, None, None]
    background = bg_top * (1 - ramp) + bg_bottom * ramp
    background = np.broadcast_to(background, (height, width, 3))

    color_name = list(COLORS)[rng.integers(len(COLORS))]
    pattern = PATTERNS[rng.integers(len(PATTERNS))]
    garment_color = np.array(COLORS[color_name])
    skin = np.array([0.9, 0.75, 0.6])

    body_h, body_w = height * 3 // 4, max(4, width // 3)
    top = (height - body_h) // 2
    x0 = rng.uniform(0, width - body_w)
    vx = rng.uniform(-1.0, 1.0)
    direction = 'right' if vx >= 0 else 'left'

    frames = np.zeros((n_frames, height, width, 3))
    seg = np.zeros((n_frames, height, width), dtype=np.int64)
    pose = np.zeros((n_frames, height, width, 3))
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    for i in range(n_frames):
        left = int(round(np.clip(x0 + vx * i, 0, width - body_w)))
        body = (rows >= top) & (rows < top + body_h) & (cols >= left) & (cols < left + body_w)
        torso = body & (rows >= top + body_h // 4) & (rows < top + 3 * body_h // 4)

        img = background.copy()
        img[body] = skin
        shade = garment_color
        if pattern == 'striped':
            stripes = ((rows // 2) % 2 == 0) & torso
            img[torso] = shade
            img[stripes] = shade * 0.6
        else:
            img[torso] = shade
        frames[i] = img
        seg[i][body] = PERSON
        seg[i][torso] = GARMENT

        u = np.clip((cols - left) / max(1, body_w - 1), 0, 1) * np.ones_like(rows)
        v = np.clip((rows - top) / max(1, body_h - 1), 0, 1) * np.ones_like(cols)
        part = np.where(torso, 0.5, 1.0)
        pose[i] = np.where(body[..., None], np.stack([u, v, part], axis=-1), 0.0)

    prompt = 'a person wearing a ' + color_name + ' ' + pattern + ' shirt moving ' + direction
    video = Video(torch.from_numpy((frames * 2 - 1).astype(np.float32)))
    return {'video': video, 'seg': seg, 'pose': PoseVideo(torch.from_numpy(pose.astype(np.float32))),
            'prompt': prompt}


def garment_from_clip(clip, size=(32, 32), frame=0):
    """Garment image cropped from one frame through the garment label."""
    mask = MaskVideo(torch.from_numpy((clip['seg'] == GARMENT).astype(np.float32))[..., None])
    return crop_garment(clip['video'], mask, frame=frame, size=size)


def write_dataset(folder, n_clips=16, seed=0, n_frames=8, height=32, width=24, garment_size=(32, 32)):
    """Write n_clips synthetic clips and a manifest.csv; returns the manifest path.

    Layout per clip: <id>/frames/, <id>/seg/, <id>/pose/, <id>/garment.png.
    Manifest paths are relative to folder.
    """
    make_directory(folder)
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_clips):
        clip_id = 'clip_' + str(k).zfill(4)
        clip = generate_clip(rng, n_frames=n_frames, height=height, width=width)
        base = os.path.join(folder, clip_id)
        video_io.write_video(clip['video'], os.path.join(base, 'frames'))
        video_io.write_labels(clip['seg'], os.path.join(base, 'seg'))
        video_io.write_pose(clip['pose'], os.path.join(base, 'pose'))
        video_io.write_garment(garment_from_clip(clip, size=garment_size), os.path.join(base, 'garment.png'))
        rows.append({'id': clip_id,
                     'video': clip_id + '/frames',
                     'seg': clip_id + '/seg',
                     'pose': clip_id + '/pose',
                     'garment': clip_id + '/garment.png',
                     'prompt': clip['prompt']})
    manifest = os.path.join(folder, 'manifest.csv')
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False)
    log.info('wrote %d synthetic clips to %s', n_clips, folder)
    return manifest
