from viti import experiment
from viti.experiment import (Experiment, SampleRecord, StageConfig, adapter_freeze_policy, build_batch,
                             check_stage_order, load_manifest, run_stage, stage_inpainter)
from viti.inpainter import Inpainter, RunConfig
from viti.utils import checkpoint, metrics, synth, video_io
from viti.utils.codec import MaskVideo
from viti.utils.errors import ConfigError, NumericError
from viti.utils.masking import MaskSpec
import json
import os
import numpy as np
import pandas as pd
import pytest
import torch

SMALL_MODEL = {'depth': 1, 'model_dim': 16, 'heads': 2, 'patch_size': 2, 'latent_channels': 3, 'text_dim': 32,
               'garment_dim': 16, 'zero_init_head': False, 'max_frames': 8, 'max_rows': 8, 'max_cols': 8}


@pytest.fixture
def run():
    return RunConfig(model=dict(SMALL_MODEL), num_frames=4, height=8, width=8, garment_size=(16, 16),
                     sample_steps=3)


@pytest.fixture
def dataset(tmp_path):
    return synth.write_dataset(str(tmp_path / 'synthetic'), n_clips=4, seed=0, n_frames=4, height=8, width=8,
                               garment_size=(16, 16))


@pytest.fixture
def records(dataset):
    return load_manifest(dataset)


def stage3_checkpoint(run, folder):
    return run_stage(StageConfig(stage='3', steps=0), run, save_folder=folder, records=[])


###############################################################################
# Stage configuration

def test_stage_defaults():
    s1 = StageConfig(stage=1)
    assert s1.stage == '1' and s1.name == 'stage_1'
    assert not (s1.temporal_loss or s1.use_garment or s1.use_pose)
    assert s1.mask_spec.strategy == 'time_variant_box' and s1.mask_spec.inversion_prob == 0.5
    assert StageConfig(stage=2).mask_spec.target_label == [1, 2]
    viti = StageConfig(stage='viti')
    assert viti.temporal_loss and viti.use_garment and viti.use_pose
    assert viti.alpha == 0.1
    assert viti.mask_spec.strategy == 'garment'


def test_stage_from_dict():
    cfg = StageConfig.from_dict({'stage': 3, 'mask_spec': {'strategy': 'time_invariant_box'}, 'steps': 5})
    assert isinstance(cfg.mask_spec, MaskSpec) and cfg.steps == 5
    with pytest.raises(ConfigError):
        StageConfig.from_dict({'stage': 3, 'stpes': 5})
    with pytest.raises(ConfigError):
        StageConfig(stage='4')


def test_viti_needs_checkpoint():
    with pytest.raises(ConfigError):
        StageConfig(stage='viti').validate()
    assert StageConfig(stage='viti').validate(chained=True)


def test_viti_rejects_stage1_checkpoint(tmp_path, run):
    ckpt = run_stage(StageConfig(stage='1', steps=0), run, save_folder=str(tmp_path), records=[])
    with pytest.raises(ConfigError):
        StageConfig(stage='viti', init_checkpoint=ckpt).validate()
    ckpt3 = stage3_checkpoint(run, str(tmp_path))
    assert StageConfig(stage='viti', init_checkpoint=ckpt3).validate()


@pytest.mark.parametrize('kwargs', [
    {'stage': '1', 'garment_scale': 0.5},
    {'stage': '2', 'use_garment': True},
    {'stage': '2', 'use_pose': True},
    {'stage': '3', 'temporal_loss': True},
    {'stage': '3', 'freeze_policy': 'adapter_only'},
    {'stage': '1', 'lr': 0.0},
    {'stage': '1', 'steps': -1},
    {'stage': '1', 'p_uncond': 1.5},
    {'stage': '1', 'freeze_policy': 'none'},
    {'stage': '1', 'loss_form': 'sum'},
])
def test_stage_gating(kwargs):
    with pytest.raises(ConfigError):
        StageConfig(**kwargs).validate()


def test_stage_order():
    check_stage_order([StageConfig(stage='3'), StageConfig(stage='viti')])
    with pytest.raises(ConfigError):
        check_stage_order([StageConfig(stage='viti'), StageConfig(stage='3')])
    with pytest.raises(ConfigError):
        check_stage_order([StageConfig(stage='1'), StageConfig(stage='viti')])


###############################################################################
# Data

def test_load_manifest_resolves_paths(dataset, records):
    assert [r.id for r in records] == ['clip_0000', 'clip_0001', 'clip_0002', 'clip_0003']
    for r in records:
        assert os.path.isabs(r.video) and os.path.isdir(r.video)
        assert os.path.exists(r.garment)
        assert r.mask is None
        assert r.prompt.startswith('a person wearing')


def test_load_manifest_data_dir(monkeypatch, dataset):
    root, name = os.path.split(os.path.dirname(dataset))
    monkeypatch.setenv('VITI_DATA_DIR', root)
    assert len(load_manifest(os.path.join(name, 'manifest.csv'))) == 4


def test_load_manifest_errors(tmp_path, dataset):
    with pytest.raises(ConfigError):
        load_manifest(str(tmp_path / 'missing.csv'))
    empty = tmp_path / 'empty.csv'
    pd.DataFrame(columns=synth.MANIFEST_COLUMNS).to_csv(empty, index=False)
    with pytest.raises(ConfigError):
        load_manifest(str(empty))
    df = pd.read_csv(dataset, keep_default_na=False, dtype=str)
    df.loc[0, 'prompt'] = ''
    no_prompt = os.path.join(os.path.dirname(dataset), 'no_prompt.csv')
    df.to_csv(no_prompt, index=False)
    assert len(load_manifest(no_prompt, stage='1')) == 4
    with pytest.raises(ConfigError):
        load_manifest(no_prompt, stage='2')
    df.loc[1, 'video'] = 'nowhere/frames'
    df.to_csv(no_prompt, index=False)
    with pytest.raises(ConfigError):
        load_manifest(no_prompt)


def test_clip_dataset_items(records):
    item = experiment.ClipDataset(records)[1]
    assert item['id'] == 'clip_0001'
    assert item['video'].data.shape == (4, 8, 8, 3)
    assert item['seg'].shape == (4, 8, 8)
    assert item['garment'].data.shape == (16, 16, 3)
    assert item['pose'].data.shape == (4, 8, 8, 3)
    assert item['mask'] is None


def _batch(records, run, cfg, seed=0):
    inp = stage_inpainter(run, cfg)
    items = [experiment.ClipDataset(records)[i] for i in range(len(records))]
    return build_batch(items, inp, cfg, np.random.default_rng(seed), torch.Generator().manual_seed(seed))


def test_build_batch_shapes(records, run):
    batch = _batch(records, run, StageConfig(stage='1'))
    assert batch.z_in.shape == (4, 4, 8, 8, 3)
    assert batch.eps.shape == (4, 4, 8, 8, 3)
    assert batch.m_z.shape == (4, 4, 8, 8, 1)
    assert batch.ids == [r.id for r in records]
    assert batch.condition.timestep.shape == (4,)
    assert batch.condition.num_garment_tokens == 0
    assert batch.condition.pose_latent is None


def test_build_batch_conditions_viti(records, run):
    batch = _batch(records, run, StageConfig(stage='viti'))
    assert batch.condition.num_garment_tokens == 5
    assert batch.condition.pose_latent.shape == (4, 4, 8, 8, 3)


def test_build_batch_deterministic(records, run):
    a = _batch(records, run, StageConfig(stage='1'), seed=3)
    b = _batch(records, run, StageConfig(stage='1'), seed=3)
    c = _batch(records, run, StageConfig(stage='1'), seed=4)
    assert torch.equal(a.z_in, b.z_in) and torch.equal(a.eps, b.eps)
    assert not torch.equal(a.eps, c.eps)


def test_build_batch_rejects_empty_mask(records, run, tmp_path):
    empty = str(tmp_path / 'empty_mask')
    video_io.write_mask(MaskVideo(torch.zeros(4, 8, 8, 1)), empty)
    bad = SampleRecord(id='blank', video=records[0].video, prompt='x', mask=empty)
    batch = _batch([bad, records[1]], run, StageConfig(stage='1'))
    assert batch.ids == ['clip_0001']
    assert batch.rejected == ['blank']
    assert _batch([bad], run, StageConfig(stage='1')) is None


def test_freeze_policy(run):
    inp = stage_inpainter(run, StageConfig(stage='viti'))
    names = {n for n, _ in inp.denoiser.named_parameters()}
    assert adapter_freeze_policy(inp.denoiser, 'all') == names
    adapter = adapter_freeze_policy(inp.denoiser, 'adapter_only')
    assert adapter and adapter < names
    base = {n for n, _ in stage_inpainter(run, StageConfig(stage='3')).denoiser.named_parameters()}
    assert adapter.isdisjoint(base)
    with pytest.raises(ConfigError):
        adapter_freeze_policy(inp.denoiser, 'none')


###############################################################################
# Training

def test_zero_steps_keeps_init_weights(tmp_path, run):
    ckpt = run_stage(StageConfig(stage='1', steps=0), run, save_folder=str(tmp_path), records=[])
    state, manifest = checkpoint.load_checkpoint(ckpt)
    fresh = stage_inpainter(run, StageConfig(stage='1')).denoiser.state_dict()
    assert set(state) == set(fresh)
    for k, v in fresh.items():
        assert torch.equal(state[k], v)
    assert manifest['stage'] == '1'
    assert manifest['extra']['steps'] == 0
    assert not os.path.exists(os.path.join(tmp_path, 'stage_1', 'loss.png'))


def test_zero_steps_from_checkpoint(tmp_path, run):
    ckpt3 = stage3_checkpoint(run, str(tmp_path / 'a'))
    ckpt = run_stage(StageConfig(stage='viti', steps=0, init_checkpoint=ckpt3), run,
                     save_folder=str(tmp_path / 'b'), records=[])
    base, _ = checkpoint.load_checkpoint(ckpt3)
    full, manifest = checkpoint.load_checkpoint(ckpt)
    assert manifest['stage'] == 'viti'
    assert set(base) < set(full)
    for k, v in base.items():
        assert torch.equal(full[k], v)


def test_short_run_logs_metrics(tmp_path, run, records):
    cfg = StageConfig(stage='1', steps=3, lr=1e-3, batch_size=2)
    ckpt = run_stage(cfg, run, save_folder=str(tmp_path), records=records)
    folder = os.path.join(str(tmp_path), 'stage_1')
    with open(os.path.join(folder, experiment.METRICS_LOG)) as f:
        rows = [json.loads(line) for line in f]
    assert [r['step'] for r in rows] == [1, 2, 3]
    assert all(r['l_temporal'] is None for r in rows)
    assert all(r['lr'] == 1e-3 for r in rows)
    assert os.path.exists(os.path.join(folder, 'loss.png'))
    state, _ = checkpoint.load_checkpoint(ckpt)
    fresh = stage_inpainter(run, cfg).denoiser.state_dict()
    assert any(not torch.equal(state[k], v) for k, v in fresh.items())
    assert os.path.exists(os.path.join(ckpt, checkpoint.OPTIMIZER))


def test_viti_stage_adapter_only(tmp_path, run, records):
    ckpt3 = stage3_checkpoint(run, str(tmp_path / 'a'))
    cfg = StageConfig(stage='viti', steps=2, lr=1e-3, batch_size=2, init_checkpoint=ckpt3,
                      freeze_policy='adapter_only')
    ckpt = run_stage(cfg, run, save_folder=str(tmp_path / 'b'), records=records)
    base, _ = checkpoint.load_checkpoint(ckpt3)
    full, _ = checkpoint.load_checkpoint(ckpt)
    for k, v in base.items():
        assert torch.equal(full[k], v)
    with open(os.path.join(str(tmp_path / 'b'), 'stage_viti', experiment.METRICS_LOG)) as f:
        rows = [json.loads(line) for line in f]
    assert all(r['l_temporal'] is not None for r in rows)


def test_non_finite_loss_writes_diagnostic(tmp_path, run, records, monkeypatch):
    def failing_step(*args, **kwargs):
        raise NumericError('Non-finite loss nan')

    monkeypatch.setattr(experiment, 'train_step', failing_step)
    with pytest.raises(NumericError):
        run_stage(StageConfig(stage='1', steps=2), run, save_folder=str(tmp_path), records=records)
    diag = os.path.join(str(tmp_path), 'stage_1', 'diagnostic')
    manifest = checkpoint.read_manifest(diag)
    assert manifest['extra']['failed_step'] == 0
    assert not os.path.exists(os.path.join(str(tmp_path), 'stage_1', 'checkpoint'))


def test_experiment_chains_stages(tmp_path, run, dataset):
    stages = [{'stage': 3, 'dataset': dataset, 'steps': 1, 'lr': 1e-3},
              {'stage': 'viti', 'dataset': dataset, 'steps': 1, 'lr': 1e-3}]
    exp = Experiment(run, stages, results_folder=str(tmp_path / 'results'))
    folder = exp.run_experiment()
    assert os.path.basename(folder).startswith('run_')
    assert os.path.exists(os.path.join(folder, 'run_config.yaml'))
    assert list(exp.checkpoints) == ['stage_3', 'stage_viti']
    assert checkpoint.read_manifest(exp.checkpoints['stage_viti'])['stage'] == 'viti'


def test_experiment_validates_before_writing(tmp_path, run, dataset):
    results = tmp_path / 'results'
    with pytest.raises(ConfigError):
        Experiment(run, [{'stage': 'viti', 'dataset': dataset}], results_folder=str(results))
    with pytest.raises(ConfigError):
        Experiment(run, [{'stage': 1, 'dataset': str(tmp_path / 'missing.csv')}], results_folder=str(results))
    assert not results.exists()


def test_training_stage_without_dataset_writes_nothing(tmp_path, run):
    results = tmp_path / 'results'
    with pytest.raises(ConfigError):
        Experiment(run, [{'stage': 1, 'steps': 5}], results_folder=str(results))
    assert not results.exists()
    with pytest.raises(ConfigError):
        run_stage(StageConfig(stage='1', steps=2), run, save_folder=str(tmp_path / 'out'), records=[])
    assert not (tmp_path / 'out' / 'stage_1').exists()


def test_zero_step_stage_without_dataset(tmp_path, run):
    exp = Experiment(run, [{'stage': 1, 'steps': 0}], results_folder=str(tmp_path / 'results'))
    exp.run_experiment()
    state, _ = checkpoint.load_checkpoint(exp.checkpoints['stage_1'])
    fresh = stage_inpainter(run, StageConfig(stage='1')).denoiser.state_dict()
    for k, v in fresh.items():
        assert torch.equal(state[k], v)
    ckpt = run_stage(StageConfig(stage='2', steps=0), run, save_folder=str(tmp_path / 'solo'))
    assert checkpoint.read_manifest(ckpt)['stage'] == '2'


def test_data_folder_resolves_manifest(tmp_path, run, dataset):
    root, name = os.path.split(os.path.dirname(dataset))
    run.paths['data'] = root
    exp = Experiment(run, [{'stage': 1, 'dataset': os.path.join(name, 'manifest.csv'), 'steps': 1}],
                     results_folder=str(tmp_path / 'results'))
    assert len(exp.records[0]) == 4
    assert len(load_manifest(os.path.join(name, 'manifest.csv'), data_folder=root)) == 4


def test_stage_garment_scale_is_saved(tmp_path, run):
    ckpt3 = stage3_checkpoint(run, str(tmp_path / 'a'))
    ckpt = run_stage(StageConfig(stage='viti', steps=0, init_checkpoint=ckpt3, garment_scale=0.5), run,
                     save_folder=str(tmp_path / 'b'), records=[])
    assert checkpoint.read_manifest(ckpt)['model']['garment_scale'] == 0.5
    assert Inpainter.from_checkpoint(ckpt).denoiser.cfg.garment_scale == 0.5


###############################################################################
# Long-running harnesses

def _masked_losses(path):
    with open(path) as f:
        return np.array([json.loads(line)['l_masked'] for line in f])


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(5))
def test_stage1_loss_decreases(tmp_path, seed):
    dataset = synth.write_dataset(str(tmp_path / 'synthetic'), n_clips=8, seed=seed)
    run = RunConfig(seed=seed)
    run_stage(StageConfig(stage='1', steps=200, lr=1e-3, batch_size=2), run, save_folder=str(tmp_path),
              records=load_manifest(dataset))
    losses = _masked_losses(os.path.join(str(tmp_path), 'stage_1', experiment.METRICS_LOG))
    assert losses[-20:].mean() < losses[:20].mean()


@pytest.mark.slow
def test_overfit_single_clip(tmp_path):
    clip = synth.generate_clip(np.random.default_rng(0))
    base = tmp_path / 'clip'
    video_io.write_video(clip['video'], str(base / 'frames'))
    mask = MaskVideo(torch.from_numpy((clip['seg'] == synth.GARMENT).astype(np.float32))[..., None])
    video_io.write_mask(mask, str(base / 'mask'))
    garment = synth.garment_from_clip(clip)
    video_io.write_garment(garment, str(base / 'garment.png'))
    video_io.write_pose(clip['pose'], str(base / 'pose'))
    record = SampleRecord(id='clip', video=str(base / 'frames'), prompt=clip['prompt'], mask=str(base / 'mask'),
                          garment=str(base / 'garment.png'), pose=str(base / 'pose'))

    run = RunConfig()
    ckpt3 = stage3_checkpoint(run, str(tmp_path / 'a'))
    ckpt = run_stage(StageConfig(stage='viti', steps=2000, lr=1e-3, init_checkpoint=ckpt3), run,
                     save_folder=str(tmp_path / 'b'), records=[record])
    inp = Inpainter.from_checkpoint(ckpt)
    out = inp.infer(clip['video'], mask, clip['prompt'], garment=garment, pose=clip['pose'])
    assert metrics.inpaint_reconstruction(clip['video'], out, mask) < 0.01
