from viti.dit import DiT, DiTConfig
from viti.utils import checkpoint, video_io
from viti.utils.codec import MaskVideo, Video
from viti.utils.conditioning import ConditionBundle, GarmentImage, PoseVideo
from viti.utils.errors import ConfigError, ContractError
from fractions import Fraction
import json
import os
import numpy as np
import pytest
from PIL import Image
import torch


def small_config(**kwargs):
    opts = dict(depth=1, model_dim=16, heads=2, patch_size=1, latent_channels=4, text_dim=8, garment_dim=8,
                garment_branch_dims=(4, 4), zero_init_head=False, max_frames=4, max_rows=4, max_cols=4,
                freq_dim=16)
    opts.update(kwargs)
    return DiTConfig(**opts)


@pytest.fixture
def inputs():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(2, 4, 4, 4, generator=g)
    c = ConditionBundle(torch.randn(3, 8, generator=g), torch.zeros(0, 8), None, 17)
    return z, c


@pytest.fixture
def clip():
    g = torch.Generator().manual_seed(1)
    return Video(torch.rand(3, 8, 6, 3, generator=g) * 2 - 1)


###############################################################################
# Checkpoints

def test_save_load_forward_identical(tmp_path, inputs):
    z, c = inputs
    torch.manual_seed(0)
    model = DiT(small_config())
    folder = checkpoint.save_checkpoint(model, str(tmp_path / 'ckpt'), stage='1', extra={'steps': 3})
    torch.manual_seed(99)
    other = DiT(small_config())
    loaded, missing, unexpected = checkpoint.load_into(other, folder, strict=True)
    assert missing == [] and unexpected == []
    assert set(loaded) == set(model.state_dict())
    with torch.no_grad():
        assert torch.equal(model(z, c), other(z, c))


def test_manifest_contents(tmp_path):
    model = DiT(small_config())
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    folder = checkpoint.save_checkpoint(model, str(tmp_path / 'ckpt'), stage=2, extra={'steps': 0}, optimizer=opt)
    with open(os.path.join(folder, checkpoint.MANIFEST)) as f:
        manifest = json.load(f)
    assert manifest['format'] == checkpoint.FORMAT_VERSION
    assert manifest['stage'] == '2'
    assert DiTConfig.from_dict(manifest['model']) == model.cfg
    assert manifest['tensors']['head.weight'] == {'shape': [4, 16], 'dtype': 'float32'}
    assert manifest['extra'] == {'steps': 0}
    assert os.path.exists(os.path.join(folder, checkpoint.OPTIMIZER))


def test_inpainting_checkpoint_into_conditioned_model(tmp_path):
    base = DiT(small_config())
    folder = checkpoint.save_checkpoint(base, str(tmp_path / 'stage3'), stage='3')
    full = DiT(small_config(garment_adapter=True, pose_encoder=True))
    loaded, missing, unexpected = checkpoint.load_into(full, folder)
    assert unexpected == []
    assert set(loaded) == set(base.state_dict())
    assert missing and all('garment' in k or k.startswith('pose_encoder.') for k in missing)
    assert torch.equal(full.state_dict()['head.weight'], base.state_dict()['head.weight'])
    with pytest.raises(ConfigError):
        checkpoint.load_into(DiT(small_config(garment_adapter=True)), folder, strict=True)


def test_shape_mismatch(tmp_path):
    folder = checkpoint.save_checkpoint(DiT(small_config()), str(tmp_path / 'ckpt'), stage='1')
    with pytest.raises(ConfigError):
        checkpoint.load_into(DiT(small_config(model_dim=32)), folder)


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(ConfigError):
        checkpoint.read_manifest(str(tmp_path))


###############################################################################
# Video IO

def test_png_roundtrip_within_quantization(tmp_path, clip):
    paths = video_io.write_video(clip, str(tmp_path / 'frames'))
    assert [os.path.basename(p) for p in paths] == ['frame_0000.png', 'frame_0001.png', 'frame_0002.png']
    back = video_io.read_video(str(tmp_path / 'frames'))
    assert back.data.shape == clip.data.shape
    assert (back.data - clip.data).abs().max() <= 1 / 127.5 + 1e-6


def test_raw_container_is_exact(tmp_path, clip):
    path = video_io.write_video(Video(clip.data, fps=Fraction(24000, 1001)), str(tmp_path / 'out'), raw=True)
    assert path.endswith('.safetensors')
    back = video_io.read_video(path)
    assert torch.equal(back.data, clip.data)
    assert back.fps == Fraction(24000, 1001)


def test_raw_rejects_unknown_range(tmp_path, clip):
    path = video_io.save_raw(clip, str(tmp_path / 'clip.safetensors'), range_tag='[0,1]')
    with pytest.raises(ContractError):
        video_io.load_raw(path)


def test_mask_written_as_0_255(tmp_path):
    data = torch.zeros(2, 5, 5, 1)
    data[:, 1:3, 2:4] = 1
    paths = video_io.write_mask(MaskVideo(data), str(tmp_path / 'mask'))
    values = set(np.unique(np.asarray(Image.open(paths[0]))).tolist())
    assert values == {0, 255}
    assert torch.equal(video_io.read_mask(str(tmp_path / 'mask')).data, data)


def test_labels_pose_garment(tmp_path):
    labels = np.random.default_rng(0).integers(0, 3, (2, 4, 4))
    video_io.write_labels(labels, str(tmp_path / 'seg'))
    assert (video_io.read_labels(str(tmp_path / 'seg')) == labels).all()

    pose = PoseVideo(torch.tensor([0.0, 0.5, 1.0]).expand(2, 3, 3, 3).clone())
    video_io.write_pose(pose, str(tmp_path / 'pose'))
    assert (video_io.read_pose(str(tmp_path / 'pose')).data - pose.data).abs().max() <= 0.5 / 255 + 1e-6

    g = GarmentImage(torch.full((6, 6, 3), -1.0))
    video_io.write_garment(g, str(tmp_path / 'garment.png'))
    assert torch.equal(video_io.read_garment(str(tmp_path / 'garment.png')).data, g.data)


def test_missing_frames(tmp_path):
    with pytest.raises(ContractError):
        video_io.read_video(str(tmp_path / 'nothing'))
    os.makedirs(tmp_path / 'empty')
    with pytest.raises(ContractError):
        video_io.read_video(str(tmp_path / 'empty'))
