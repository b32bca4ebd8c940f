from viti.cli import main
from viti.experiment import load_manifest
from viti.inpainter import Inpainter
from viti.utils import checkpoint, video_io
from viti.utils.codec import MaskVideo, Video
import json
import os
import pandas as pd
import pytest
import torch
import yaml

SMALL_MODEL = {'depth': 1, 'model_dim': 16, 'heads': 2, 'patch_size': 2, 'latent_channels': 3, 'text_dim': 32,
               'garment_dim': 16, 'zero_init_head': False, 'max_frames': 8, 'max_rows': 8, 'max_cols': 8}
GEOMETRY = {'num_frames': 4, 'height': 8, 'width': 8, 'garment_size': [16, 16]}


@pytest.fixture(autouse=True)
def results_dir(tmp_path, monkeypatch):
    folder = tmp_path / 'results'
    monkeypatch.setenv('VITI_RESULTS_DIR', str(folder))
    return folder


@pytest.fixture
def clip_files(tmp_path):
    g = torch.Generator().manual_seed(0)
    video = Video(torch.rand(4, 8, 8, 3, generator=g) * 2 - 1)
    m = torch.zeros(4, 8, 8, 1)
    m[:, 1:5, 2:7] = 1
    video_io.write_video(video, str(tmp_path / 'clip'))
    video_io.write_mask(MaskVideo(m), str(tmp_path / 'mask'))
    video_io.write_mask(MaskVideo(torch.zeros(4, 8, 8, 1)), str(tmp_path / 'empty_mask'))
    return str(tmp_path / 'clip'), str(tmp_path / 'mask'), str(tmp_path / 'empty_mask')


@pytest.fixture
def ckpt(tmp_path):
    inp = Inpainter(model=dict(SMALL_MODEL), sample_steps=2, **GEOMETRY)
    return inp.save(str(tmp_path / 'ckpt'), stage='3')


def error_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_missing_config_exit_code(tmp_path, capsys):
    code = main(['train', '--config', str(tmp_path / 'nope.yaml')])
    assert code == 2
    record = error_record(capsys)
    assert record['error'] == 'ConfigError'
    assert record['exit_code'] == 2


def test_data_synth(tmp_path, capsys):
    out = str(tmp_path / 'synthetic')
    assert main(['data-synth', '--out', out, '--clips', '16', '--frames', '4', '--height', '8', '--width', '8',
                 '--garment-size', '16', '16']) == 0
    manifest = capsys.readouterr().out.strip()
    assert manifest == os.path.join(out, 'manifest.csv')
    records = load_manifest(manifest)
    assert len(records) == 16
    assert len({r.id for r in records}) == 16


def test_maskgen_time_invariant(tmp_path):
    out = str(tmp_path / 'mask')
    assert main(['maskgen', '--strategy', 'time_invariant_box', '--frames', '4', '--height', '16',
                 '--width', '12', '--seed', '3', '--out', out, '--preview']) == 0
    m = video_io.read_mask(out).data
    assert m.shape == (4, 16, 12, 1)
    assert m.sum() > 0
    for i in range(1, 4):
        assert torch.equal(m[i], m[0])
    assert os.path.exists(out + '_preview.png')


def test_maskgen_from_labels(tmp_path):
    labels = torch.zeros(3, 6, 6, dtype=torch.int64).numpy()
    labels[:, 1:3, 1:4] = 2
    labels[:, 4:, :] = 1
    video_io.write_labels(labels, str(tmp_path / 'seg'))
    out = str(tmp_path / 'mask')
    assert main(['maskgen', '--strategy', 'instance', '--seg', str(tmp_path / 'seg'), '--label', '1', '2',
                 '--out', out]) == 0
    m = video_io.read_mask(out).data[..., 0].numpy()
    assert (m == (labels > 0)).all()


def test_maskgen_absent_label(tmp_path, capsys):
    video_io.write_labels(torch.zeros(2, 4, 4, dtype=torch.int64).numpy(), str(tmp_path / 'seg'))
    code = main(['maskgen', '--strategy', 'garment', '--seg', str(tmp_path / 'seg'), '--out',
                 str(tmp_path / 'mask')])
    assert code != 0
    assert error_record(capsys)['error'] == 'EmptyMaskError'


def test_train_zero_steps(tmp_path, results_dir, capsys):
    dataset = str(tmp_path / 'synthetic')
    main(['data-synth', '--out', dataset, '--clips', '2', '--frames', '4', '--height', '8', '--width', '8',
          '--garment-size', '16', '16'])
    capsys.readouterr()
    config = dict(GEOMETRY, model=SMALL_MODEL, sample_steps=2,
                  stages=[{'stage': 1, 'dataset': os.path.join(dataset, 'manifest.csv'), 'steps': 5}])
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump(config))
    assert main(['train', '--config', str(path), '--steps', '0', '--seed', '4']) == 0
    folder = capsys.readouterr().out.strip()
    assert folder.startswith(str(results_dir))
    ckpt = os.path.join(folder, 'stage_1', 'checkpoint')
    manifest = checkpoint.read_manifest(ckpt)
    assert manifest['stage'] == '1'
    assert manifest['extra']['steps'] == 0
    with open(os.path.join(folder, 'run_config.yaml')) as f:
        assert yaml.safe_load(f)['seed'] == 4


def test_infer_same_seed_identical(tmp_path, ckpt, clip_files):
    video, mask, _ = clip_files
    outs = []
    for name in ('a', 'b'):
        out = str(tmp_path / name)
        assert main(['infer', '--checkpoint', ckpt, '--video', video, '--mask', mask, '--prompt', 'a red shirt',
                     '--steps', '2', '--seed', '1', '--out', out]) == 0
        outs.append(out)
    for fa, fb in zip(video_io.frame_paths(outs[0]), video_io.frame_paths(outs[1])):
        with open(fa, 'rb') as a, open(fb, 'rb') as b:
            assert a.read() == b.read()


def test_infer_empty_mask_returns_input(tmp_path, ckpt, clip_files):
    video, _, empty = clip_files
    out = str(tmp_path / 'out')
    assert main(['infer', '--checkpoint', ckpt, '--video', video, '--mask', empty, '--out', out]) == 0
    assert torch.equal(video_io.read_video(out).data, video_io.read_video(video).data)


def test_infer_raw_output(tmp_path, ckpt, clip_files, capsys):
    video, mask, _ = clip_files
    out = str(tmp_path / 'raw')
    assert main(['infer', '--checkpoint', ckpt, '--video', video, '--mask', mask, '--steps', '1',
                 '--out', out, '--raw']) == 0
    written = capsys.readouterr().out.strip()
    assert written == out + '.safetensors'
    assert video_io.read_video(written).data.shape == (4, 8, 8, 3)


def test_infer_bad_checkpoint(tmp_path, clip_files, capsys):
    video, mask, _ = clip_files
    assert main(['infer', '--checkpoint', str(tmp_path), '--video', video, '--mask', mask,
                 '--out', str(tmp_path / 'out')]) == 2
    assert error_record(capsys)['error'] == 'ConfigError'


def _clip_set(folder, seeds):
    for s in seeds:
        g = torch.Generator().manual_seed(s)
        video_io.write_video(Video(torch.rand(4, 16, 16, 3, generator=g) * 2 - 1),
                             os.path.join(folder, 'clip_' + str(s)))


def test_eval_identical_sets(tmp_path, capsys):
    real = str(tmp_path / 'real')
    _clip_set(real, [0, 1, 2])
    out = str(tmp_path / 'report.csv')
    assert main(['eval', '--real', real, '--gen', real, '--out', out]) == 0
    df = pd.read_csv(out, index_col='clip')
    assert list(df.index) == ['clip_0', 'clip_1', 'clip_2', 'mean']
    assert df.loc['mean', 'SSIM'] == pytest.approx(1.0)
    assert df.loc['mean', 'LPIPS'] == 0.0
    assert df.loc['mean', 'VFID'] < 1e-6


def test_eval_with_masks(tmp_path):
    real = str(tmp_path / 'real')
    _clip_set(real, [0, 1])
    for s in [0, 1]:
        m = torch.zeros(4, 16, 16, 1)
        m[:, :8] = 1
        video_io.write_mask(MaskVideo(m), str(tmp_path / 'masks' / ('clip_' + str(s))))
    assert main(['eval', '--real', real, '--gen', real, '--mask', str(tmp_path / 'masks')]) == 0
    df = pd.read_csv(os.path.join(real, 'report.csv'), index_col='clip')
    assert df.loc['mean', 'InpaintRec'] == 0.0


def test_eval_mismatched_counts(tmp_path, capsys):
    real, gen = str(tmp_path / 'real'), str(tmp_path / 'gen')
    _clip_set(real, [0, 1, 2])
    _clip_set(gen, [0, 1])
    assert main(['eval', '--real', real, '--gen', gen]) != 0
    assert error_record(capsys)['exit_code'] == 2


def test_train_without_dataset_leaves_no_folder(tmp_path, capsys):
    results = tmp_path / 'fresh_results'
    config = dict(GEOMETRY, model=SMALL_MODEL, stages=[{'stage': 1, 'steps': 5}])
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump(config))
    assert main(['train', '--config', str(path), '--results', str(results)]) == 2
    assert error_record(capsys)['error'] == 'ConfigError'
    assert not results.exists()


def test_train_zero_steps_without_dataset(tmp_path, capsys):
    results = tmp_path / 'fresh_results'
    config = dict(GEOMETRY, model=SMALL_MODEL, stages=[{'stage': 1, 'steps': 0}])
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump(config))
    assert main(['train', '--config', str(path), '--results', str(results)]) == 0
    folder = capsys.readouterr().out.strip()
    assert checkpoint.read_manifest(os.path.join(folder, 'stage_1', 'checkpoint'))['extra']['steps'] == 0


def test_eval_noisy_copies_score_worse(tmp_path):
    real = str(tmp_path / 'real')
    _clip_set(real, [0, 1, 2, 3])
    g = torch.Generator().manual_seed(9)
    noisy = str(tmp_path / 'noisy')
    for name in sorted(os.listdir(real)):
        clip = video_io.read_video(os.path.join(real, name)).data
        video_io.write_video(Video((clip + 0.3 * torch.randn(clip.shape, generator=g)).clamp(-1, 1)),
                             os.path.join(noisy, name))
    same, worse = str(tmp_path / 'same.csv'), str(tmp_path / 'worse.csv')
    assert main(['eval', '--real', real, '--gen', real, '--out', same]) == 0
    assert main(['eval', '--real', real, '--gen', noisy, '--out', worse]) == 0
    a = pd.read_csv(same, index_col='clip').loc['mean']
    b = pd.read_csv(worse, index_col='clip').loc['mean']
    for col in ('LPIPS', 'VFID'):
        assert b[col] > a[col]
    assert b['SSIM'] < a['SSIM']


def test_eval_compare_stages(tmp_path, capsys):
    real = str(tmp_path / 'real')
    _clip_set(real, [0, 1])
    still = str(tmp_path / 'still')
    for s in [0, 1]:
        video_io.write_video(Video(torch.zeros(4, 16, 16, 3)), os.path.join(still, 'clip_' + str(s)))
    out = str(tmp_path / 'report.csv')
    assert main(['eval', '--real', real, '--gen', real, '--out', out, '--compare', 'stage_3=' + still]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert printed == [out, str(tmp_path / 'report_stages.csv')]
    table = pd.read_csv(printed[1], index_col='stage')
    assert list(table.index) == ['gen', 'stage_3']
    assert table.loc['stage_3', 'Flicker'] == 0.0
    assert table.loc['gen', 'Flicker'] > 0.0


def test_eval_bad_compare_writes_nothing(tmp_path, capsys):
    real = str(tmp_path / 'real')
    _clip_set(real, [0, 1])
    out = tmp_path / 'report.csv'
    assert main(['eval', '--real', real, '--gen', real, '--out', str(out), '--compare', 'stage_3']) == 2
    assert error_record(capsys)['error'] == 'ConfigError'
    assert not out.exists()


@pytest.mark.slow
def test_train_toy_run(tmp_path, capsys):
    dataset = str(tmp_path / 'synthetic')
    main(['data-synth', '--out', dataset, '--clips', '4', '--frames', '4', '--height', '8', '--width', '8',
          '--garment-size', '16', '16'])
    capsys.readouterr()
    config = dict(GEOMETRY, model=SMALL_MODEL,
                  stages=[{'stage': 1, 'dataset': os.path.join(dataset, 'manifest.csv'), 'steps': 200,
                           'batch_size': 2, 'lr': 1e-3}])
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump(config))
    assert main(['train', '--config', str(path)]) == 0
    folder = capsys.readouterr().out.strip()
    log_path = os.path.join(folder, 'stage_1', 'metrics.ndjson')
    with open(log_path) as f:
        rows = [json.loads(line) for line in f]
    assert len(rows) == 200
    assert os.path.exists(os.path.join(folder, 'stage_1', 'loss.png'))


def test_eval_literal_loss_form(tmp_path):
    real = str(tmp_path / 'real')
    _clip_set(real, [0, 1])
    for s in [0, 1]:
        m = torch.zeros(4, 16, 16, 1)
        m[:, 4:12] = 1
        video_io.write_mask(MaskVideo(m), str(tmp_path / 'masks' / ('clip_' + str(s))))
    out = str(tmp_path / 'literal.csv')
    assert main(['eval', '--real', real, '--gen', real, '--mask', str(tmp_path / 'masks'),
                 '--loss-form', 'paper_literal', '--out', out]) == 0
    assert pd.read_csv(out, index_col='clip').loc['mean', 'InpaintRec'] == 0.0
