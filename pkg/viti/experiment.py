"""Multi-stage training

Stages 1 to 3 train the inpainting model without garment or pose inputs and
without the temporal term; the viti stage starts from a stage-3 checkpoint,
adds the garment adapter and pose encoder and switches the temporal loss on.

Classes:
    StageConfig
    SampleRecord
    ClipDataset
    TrainingBatch
    Experiment
"""
from dataclasses import asdict, dataclass, field, replace
import json
import logging
import os
import time

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch
import yaml
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from viti.inpainter import Inpainter, RunConfig, stream_seed
from viti.utils import checkpoint, codec, conditioning, diffusion, plotter, video_io
from viti.utils.dir_manager import make_directory, new_run_folder, resolve_data_path
from viti.utils.errors import ConfigError, ContractError, EmptyMaskError, NumericError, RecordError
from viti.utils.masking import MaskSpec, generate_mask

log = logging.getLogger(__name__)

ALLOWED_STAGES = ['1', '2', '3', 'viti']
FREEZE_POLICIES = ['all', 'adapter_only']
ADAPTER_PREFIXES = ('garment_encoder.', 'pose_encoder.')
METRICS_LOG = 'metrics.ndjson'

# default masks per stage: random boxes with inversion, then instances, then garments
DEFAULT_MASKS = {
    '1': {'strategy': 'time_variant_box', 'inversion_prob': 0.5},
    '2': {'strategy': 'instance', 'target_label': [1, 2]},
    '3': {'strategy': 'garment', 'target_label': 2},
    'viti': {'strategy': 'garment', 'target_label': 2},
}


@dataclass
class StageConfig:
    """One training stage.

    Attributes:
        stage (str): '1', '2', '3' or 'viti'.
        dataset (str): path to a manifest.csv.
        mask_spec (MaskSpec or dict): mask generation. Defaults per stage.
        temporal_loss (bool): add alpha * l_temporal. Defaults to True only for viti.
        alpha (float): temporal loss weight. Defaults to 0.1.
        use_garment (bool): garment adapter and garment inputs. Defaults to True only for viti.
        use_pose (bool): pose encoder and pose inputs. Defaults to True only for viti.
        steps (int): optimizer iterations. Defaults to 100.
        lr (float): learning rate. Defaults to 1e-5.
        weight_decay (float): AdamW weight decay. Defaults to 0.01.
        batch_size (int): clips per step. Defaults to 1.
        init_checkpoint (str): checkpoint directory to start from.
        garment_scale (float): s. Must be absent or 0 before the viti stage.
        freeze_policy (str): 'all' or 'adapter_only'.
        loss_form (str): overrides the run's loss_form when set.
        p_uncond (float): probability of dropping text and garment for a
            sample. Defaults to 0.
        seed (int): overrides the run's root seed when set.
        name (str): folder name; defaults to 'stage_<stage>'.
    """
    stage: str = '1'
    dataset: str = None
    mask_spec: MaskSpec = None
    temporal_loss: bool = None
    alpha: float = 0.1
    use_garment: bool = None
    use_pose: bool = None
    steps: int = 100
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 1
    init_checkpoint: str = None
    garment_scale: float = None
    freeze_policy: str = 'all'
    loss_form: str = None
    p_uncond: float = 0.0
    seed: int = None
    name: str = None

    def __post_init__(self):
        self.stage = str(self.stage)
        if self.stage not in ALLOWED_STAGES:
            raise ConfigError('Stage not recognized: ' + repr(self.stage)
                              + '. Allowable stages are: ' + ', '.join(ALLOWED_STAGES))
        is_viti = self.stage == 'viti'
        if self.mask_spec is None:
            self.mask_spec = MaskSpec(**DEFAULT_MASKS[self.stage])
        elif isinstance(self.mask_spec, dict):
            self.mask_spec = MaskSpec.from_dict(self.mask_spec)
        for flag in ('temporal_loss', 'use_garment', 'use_pose'):
            if getattr(self, flag) is None:
                setattr(self, flag, is_viti)
        if self.name is None:
            self.name = 'stage_' + self.stage

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError('Unknown stage options: ' + ', '.join(sorted(unknown)))
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d['mask_spec']['size_range'] = list(self.mask_spec.size_range)
        return d

    def validate(self, chained=False):
        """Raise ConfigError unless the stage can run.

        Args:
            chained (bool): a preceding stage in the same run will supply
                init_checkpoint.
        """
        self.mask_spec.validate()
        if self.steps < 0:
            raise ConfigError('steps must be nonnegative')
        if self.lr <= 0 or self.weight_decay < 0 or self.alpha < 0:
            raise ConfigError('lr must be positive; weight_decay and alpha nonnegative')
        if self.batch_size < 1:
            raise ConfigError('batch_size must be at least 1')
        if not (0 <= self.p_uncond <= 1):
            raise ConfigError('p_uncond must be in [0, 1]')
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError('Freeze policy not recognized: ' + repr(self.freeze_policy)
                              + '. Allowable policies are: ' + ', '.join(FREEZE_POLICIES))
        if self.loss_form is not None and self.loss_form not in diffusion.LOSS_FORMS:
            raise ConfigError('Loss form not recognized: ' + repr(self.loss_form))

        if self.stage != 'viti':
            if self.garment_scale not in (None, 0, 0.0):
                raise ConfigError('Stage ' + self.stage + ' runs without the garment branch; garment_scale must be absent or 0')
            if self.use_garment or self.use_pose:
                raise ConfigError('Stage ' + self.stage + ' takes no garment or pose inputs')
            if self.temporal_loss:
                raise ConfigError('The temporal loss is only used in the viti stage')
            if self.freeze_policy == 'adapter_only':
                raise ConfigError('adapter_only freezing needs the viti stage')
        else:
            if self.init_checkpoint is None and not chained:
                raise ConfigError('The viti stage needs a stage-3 (or viti) init checkpoint')
            if self.garment_scale is not None and self.garment_scale < 0:
                raise ConfigError('garment_scale must be nonnegative')
        if self.init_checkpoint is not None:
            manifest = checkpoint.read_manifest(self.init_checkpoint)
            if self.stage == 'viti' and manifest.get('stage') not in ('3', 'viti'):
                raise ConfigError('The viti stage needs a stage-3 (or viti) checkpoint; '
                                  + str(self.init_checkpoint) + ' is from stage ' + str(manifest.get('stage')))
        return True


def check_stage_order(stages):
    """Validate a stage sequence; a viti stage may be fed by an earlier stage 3."""
    seen = set()
    for cfg in stages:
        chained = cfg.stage == 'viti' and bool(seen & {'3', 'viti'})
        cfg.validate(chained=chained)
        seen.add(cfg.stage)


###############################################################################
# Data

@dataclass
class SampleRecord:
    """One manifest row. Paths are absolute after load_manifest."""
    id: str
    video: str
    prompt: str = ''
    seg: str = None
    mask: str = None
    garment: str = None
    pose: str = None

    def validate(self, stage=None):
        for ref in ('video', 'seg', 'mask', 'garment', 'pose'):
            path = getattr(self, ref)
            if path is not None and not os.path.exists(path):
                raise ConfigError('Record ' + self.id + ': ' + ref + ' not found at ' + path)
        if stage in ('2', '3') and not self.prompt.strip():
            raise ConfigError('Record ' + self.id + ': stage ' + stage + ' needs a nonempty prompt')


def load_manifest(path, stage=None, data_folder=None):
    """SampleRecords of a manifest.csv, with paths resolved against its folder.

    A relative manifest path is resolved against data_folder, else
    $VITI_DATA_DIR.

    Raises:
        ConfigError: missing manifest, no rows, or an unresolvable record.
    """
    path = resolve_data_path(path, data_folder)
    if not os.path.exists(path):
        raise ConfigError('Dataset manifest not found: ' + path)
    df = pd.read_csv(path, keep_default_na=False, dtype=str)
    if df.empty:
        raise ConfigError('Dataset manifest has no records: ' + path)
    if 'id' not in df.columns or 'video' not in df.columns:
        raise ConfigError('Dataset manifest needs id and video columns: ' + path)
    root = os.path.dirname(os.path.abspath(path))
    fields = set(SampleRecord.__dataclass_fields__)
    records = []
    for row in df.to_dict(orient='records'):
        kw = {k: (v if v != '' else None) for k, v in row.items() if k in fields}
        kw['prompt'] = row.get('prompt', '') or ''
        for ref in ('video', 'seg', 'mask', 'garment', 'pose'):
            if kw.get(ref) is not None and not os.path.isabs(kw[ref]):
                kw[ref] = os.path.join(root, kw[ref])
        record = SampleRecord(**kw)
        record.validate(stage)
        records.append(record)
    return records


class ClipDataset(Dataset):
    """Loads the files of each SampleRecord. Safe to run in worker processes."""

    def __init__(self, records):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        r = self.records[idx]
        return {
            'id': r.id,
            'prompt': r.prompt,
            'video': video_io.read_video(r.video),
            'seg': None if r.seg is None else video_io.read_labels(r.seg),
            'mask': None if r.mask is None else video_io.read_mask(r.mask),
            'garment': None if r.garment is None else video_io.read_garment(r.garment),
            'pose': None if r.pose is None else video_io.read_pose(r.pose),
        }


def _collate(items):
    return items


def make_loader(records, batch_size, seed, workers=0):
    """DataLoader with a seeded shuffle. Batches arrive in a fixed order only with workers=0."""
    g = torch.Generator().manual_seed(int(seed))
    options = {}
    if workers > 0:
        options['prefetch_factor'] = 2
    return DataLoader(ClipDataset(records), batch_size=batch_size, shuffle=True, generator=g,
                      num_workers=workers, collate_fn=_collate, **options)


@dataclass
class TrainingBatch:
    """Assembled training inputs, batch axis first."""
    z_in: torch.Tensor
    eps: torch.Tensor
    m_z: torch.Tensor
    condition: conditioning.ConditionBundle
    ids: list
    rejected: list = field(default_factory=list)


def build_batch(items, inpainter, cfg, rng, generator):
    """Encode, mask, noise and condition each item.

    Items whose mask is empty are logged and left out.

    Args:
        items (list): ClipDataset items.
        inpainter (Inpainter)
        cfg (StageConfig)
        rng (numpy Generator): masks and condition dropout.
        generator (torch.Generator): timesteps and noise.

    Returns:
        TrainingBatch, or None when every item was rejected.

    Raises:
        RecordError: any other failure, carrying the record id.
    """
    z_in, eps, m_zs, bundles, ids, rejected = [], [], [], [], [], []
    schedule = inpainter.noise_schedule
    for item in items:
        rid = item['id']
        try:
            video = item['video']
            mask = item['mask']
            if mask is None:
                mask = generate_mask(cfg.mask_spec, video.num_frames, video.height, video.width,
                                     rng=rng, seg=item['seg'])
            if mask.is_empty():
                raise EmptyMaskError('mask has no active pixel')
            z_0 = inpainter.encode(video)
            z_ag = inpainter.encode(codec.make_agnostic(video, mask))
            m_z = inpainter.latent_mask(mask, z_0.shape)
            t = int(torch.randint(0, schedule.num_timesteps, (1,), generator=generator))
            e = torch.randn(z_0.shape, generator=generator, dtype=z_0.data.dtype)
            z_t = diffusion.q_sample(z_0.data, t, e, schedule)
            garment = item['garment'] if cfg.use_garment else None
            pose = item['pose'] if cfg.use_pose else None
            c = inpainter.build_condition(item['prompt'], garment, pose, t, target_shape=z_0.shape)
            if cfg.p_uncond > 0 and rng.random() < cfg.p_uncond:
                c = conditioning.drop_condition(c)
        except EmptyMaskError as err:
            log.warning('rejected record %s: %s', rid, err)
            rejected.append(rid)
            continue
        except ConfigError:
            raise
        except Exception as err:
            raise RecordError(rid, err) from err
        z_in.append(codec.fuse_inputs(z_t, m_z.data, z_ag.data))
        eps.append(e)
        m_zs.append(m_z.data)
        bundles.append(c)
        ids.append(rid)
    if not ids:
        return None
    return TrainingBatch(torch.stack(z_in), torch.stack(eps), torch.stack(m_zs),
                         conditioning.stack_conditions(bundles), ids, rejected)


###############################################################################
# Optimization

def adapter_freeze_policy(model, policy='all'):
    """Names of the parameters to optimize.

    'all' trains every parameter; 'adapter_only' trains the garment encoder,
    the pose encoder and the garment-branch projections.
    """
    names = [n for n, _ in model.named_parameters()]
    if policy == 'all':
        return set(names)
    if policy == 'adapter_only':
        return {n for n in names if n.startswith(ADAPTER_PREFIXES) or '_garment' in n}
    raise ConfigError('Freeze policy not recognized: ' + repr(policy))


def train_step(inpainter, batch, cfg, optimizer, loss_form):
    """One optimizer iteration; returns the LossReport.

    Raises:
        NumericError: non-finite loss (no parameter update is made).
    """
    eps_hat = inpainter.predict(batch.z_in, batch.condition, garment_scale=cfg.garment_scale)
    report = diffusion.total_loss(batch.eps, eps_hat, batch.m_z, alpha=cfg.alpha, loss_form=loss_form,
                                  temporal=cfg.temporal_loss)
    if not torch.isfinite(report.l_total):
        raise NumericError('Non-finite loss ' + str(float(report.l_total)))
    optimizer.zero_grad()
    report.l_total.backward()
    optimizer.step()
    return report


def stage_inpainter(run, cfg):
    """Inpainter for a stage: adapter, pose encoder and s follow the stage."""
    model = replace(run.model, garment_adapter=bool(cfg.use_garment), pose_encoder=bool(cfg.use_pose))
    if cfg.garment_scale is not None:
        model = replace(model, garment_scale=float(cfg.garment_scale))
    params = {k: v for k, v in run.__dict__.items() if k in RunConfig().__dict__}
    params['model'] = model
    if cfg.seed is not None:
        params['seed'] = cfg.seed
    return Inpainter(**params)


def stage_records(cfg, data_folder=None):
    """Records a stage trains on; a zero-step stage may have no dataset.

    Raises:
        ConfigError: a training stage without a dataset, or a bad manifest.
    """
    if cfg.dataset is None:
        if cfg.steps > 0:
            raise ConfigError('Stage ' + cfg.stage + ' has no dataset')
        return []
    return load_manifest(cfg.dataset, cfg.stage, data_folder)


def run_stage(cfg, run=None, save_folder=None, workers=0, records=None):
    """Train one stage and write its checkpoint, metrics log and loss plot.

    Args:
        cfg (StageConfig)
        run (RunConfig, optional): model, plugins, schedule and root seed.
        save_folder (str, optional): run folder; a new results folder is made
            when None.
        workers (int): data-loading worker processes.
        records (list, optional): SampleRecords; read from cfg.dataset when None.

    Returns:
        str: the stage checkpoint directory.

    Raises:
        NumericError: non-finite loss, after a diagnostic checkpoint is written.
    """
    run = RunConfig() if run is None else run
    cfg.validate()
    if records is None:
        records = stage_records(cfg, run.data_folder())
    if cfg.steps > 0 and not records:
        raise ConfigError('Stage ' + cfg.stage + ' has no records to train on')
    inpainter = stage_inpainter(run, cfg)
    loss_form = cfg.loss_form or inpainter.loss_form

    if save_folder is None:
        save_folder = new_run_folder(run.results_folder())
    stage_folder = os.path.join(save_folder, cfg.name)
    make_directory(stage_folder)

    if cfg.init_checkpoint is not None:
        loaded, missing, _ = inpainter.load(cfg.init_checkpoint)
        log.info('stage %s: loaded %d tensors from %s, %d fresh', cfg.stage, len(loaded),
                 cfg.init_checkpoint, len(missing))

    model = inpainter.denoiser
    trainable = adapter_freeze_policy(model, cfg.freeze_policy)
    for n, p in model.named_parameters():
        p.requires_grad_(n in trainable)
    optimizer = torch.optim.AdamW([p for n, p in model.named_parameters() if n in trainable],
                                  lr=cfg.lr, weight_decay=cfg.weight_decay)

    rng = np.random.default_rng(inpainter.stream_seed('data'))
    generator = torch.Generator().manual_seed(inpainter.stream_seed('noise'))
    loader = None
    if cfg.steps > 0:
        loader = make_loader(records, cfg.batch_size, stream_seed(inpainter.seed, 'data'), workers)

    metrics_path = os.path.join(stage_folder, METRICS_LOG)
    extra = {'stage_config': cfg.to_dict(), 'steps': cfg.steps}
    model.train()
    start = time.time()
    with open(metrics_path, 'w') as metrics_log:
        step = 0
        idle = 0
        batches = iter(loader) if loader is not None else None
        pbar = tqdm(total=cfg.steps, desc=cfg.name, disable=cfg.steps == 0)
        while step < cfg.steps:
            try:
                items = next(batches)
            except StopIteration:
                batches = iter(loader)
                continue
            batch = build_batch(items, inpainter, cfg, rng, generator)
            if batch is None:
                idle += 1
                if idle > len(loader):
                    raise ContractError('Every record of stage ' + cfg.stage + ' was rejected')
                continue
            idle = 0
            try:
                report = train_step(inpainter, batch, cfg, optimizer, loss_form)
            except NumericError:
                diag = os.path.join(stage_folder, 'diagnostic')
                inpainter.save(diag, cfg.stage, extra=dict(extra, failed_step=step, ids=batch.ids))
                log.error('non-finite loss at step %d (records %s); diagnostic checkpoint in %s',
                          step, ', '.join(batch.ids), diag)
                raise
            step += 1
            row = {'step': step, **{k: v for k, v in report.as_dict().items() if k != 'alpha'},
                   'lr': optimizer.param_groups[0]['lr'], 'wall_time': time.time() - start}
            metrics_log.write(json.dumps(row) + '\n')
            pbar.update(1)
            pbar.set_postfix(loss=row['l_total'])
        pbar.close()

    ckpt = inpainter.save(os.path.join(stage_folder, 'checkpoint'), cfg.stage, optimizer=optimizer, extra=extra)
    if cfg.steps > 0:
        fig, _ = plotter.plot_loss_curves(metrics_path, title='stage ' + cfg.stage,
                                          save_path=os.path.join(stage_folder, 'loss.png'))
        plt.close(fig)
    return ckpt


###############################################################################
# Stage sequence

class Experiment():
    """Runs a sequence of stages, each starting from the previous checkpoint.

    Args:
        run (RunConfig, optional): defaults to RunConfig().
        stages (list, optional): StageConfigs or dicts; defaults to run.stages.
        results_folder (str, optional): results root.
        workers (int): data-loading workers per stage.
    """

    def __init__(self, run=None, stages=None, results_folder=None, workers=0):
        self.run = RunConfig() if run is None else run
        stages = self.run.stages if stages is None else stages
        if not stages:
            raise ConfigError('No stages to run')
        self.stages = [s if isinstance(s, StageConfig) else StageConfig.from_dict(s) for s in stages]
        self.results_folder = results_folder if results_folder is not None else self.run.results_folder()
        self.workers = workers
        self.checkpoints = {}

        self.run.validate()
        check_stage_order(self.stages)
        self.records = [stage_records(cfg, self.run.data_folder()) for cfg in self.stages]

    def save_config(self, folder):
        doc = {'stages': [s.to_dict() for s in self.stages], 'seed': self.run.seed,
               'model': self.run.model.to_dict(), 'plugins': self.run.plugins,
               'schedule': self.run.schedule, 'loss_form': self.run.loss_form}
        with open(os.path.join(folder, 'run_config.yaml'), 'w') as f:
            yaml.safe_dump(doc, f, sort_keys=False)

    def run_experiment(self):
        """Train every stage; returns the run folder."""
        folder = new_run_folder(self.results_folder)
        self.save_config(folder)
        prev = None
        for cfg, records in zip(self.stages, self.records):
            if cfg.init_checkpoint is None and prev is not None:
                cfg = replace(cfg, init_checkpoint=prev)
            log.info('running %s (%d steps)', cfg.name, cfg.steps)
            prev = run_stage(cfg, self.run, folder, self.workers, records=records)
            self.checkpoints[cfg.name] = prev
        return folder
