"""Conditional video inpainter

Classes:
    RunConfig
    Inpainter
"""
import logging
import os

import numpy as np
import torch
import yaml

from viti.dit import DiT, DiTConfig
from viti.utils import checkpoint, codec, conditioning, diffusion, metrics
from viti.utils.errors import ConfigError
from viti.utils.plugins import (CODECS, PERCEPTUAL_BACKBONES, TEXT_EMBEDDERS, VIDEO_FEATURES,
                                VISUAL_EXTRACTORS)

log = logging.getLogger(__name__)

SEED_STREAMS = ['init', 'data', 'noise', 'sampler']


def stream_seed(root, name):
    """Independent integer seed for the named stream of a root seed."""
    if name not in SEED_STREAMS:
        raise ConfigError('Unknown seed stream ' + repr(name) + '. Streams are: ' + ', '.join(SEED_STREAMS))
    ss = np.random.SeedSequence([int(root), SEED_STREAMS.index(name)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class RunConfig:
    """Run parameters class

    Attributes:
        model (dict or DiTConfig): denoiser hyperparameters. Defaults to DiTConfig().
        schedule (dict): noise schedule. Defaults to linear betas 1e-4..2e-2 over
            1000 steps.
        stages (list): stage dicts, consumed by viti.experiment.Experiment.
        plugins (dict): registry names for codec, text, visual_a, visual_b,
            video_features and perceptual.
        codec_options (dict): keyword arguments for the codec factory.
        seed (int): root seed. Streams init, data, noise and sampler are
            derived from it. Defaults to 0.
        paths (dict): results and data folders. Relative dataset manifests
            resolve against paths['data']. None falls back to the
            VITI_RESULTS_DIR / VITI_DATA_DIR environment variables.
        loss_form (str): 'mean_masked' or 'paper_literal'. Defaults to
            'mean_masked'.
        guidance (dict): sampling options; scale is the classifier-free
            guidance weight (1.0 is off).
        sample_steps (int): denoising steps at inference. Defaults to 50.
        num_frames, height, width (int): clip geometry. Defaults to 8, 32, 24.
        garment_size (tuple): garment crop size. Defaults to (32, 32).
    """

    def __init__(self, **kwargs):
        self.model = DiTConfig()
        self.schedule = {'kind': 'linear', 'num_timesteps': 1000, 'beta_start': 1e-4, 'beta_end': 2e-2}
        self.stages = []
        self.plugins = self._default_plugins()
        self.codec_options = {}
        self.seed = 0
        self.paths = {'results': None, 'data': None}
        self.loss_form = 'mean_masked'
        self.guidance = {'scale': 1.0}
        self.sample_steps = 50

        self.num_frames = 8
        self.height = 32
        self.width = 24
        self.garment_size = (32, 32)

        for paramkey in self.__dict__.keys():
            for optkey in kwargs.keys():
                if paramkey == optkey:
                    td = {paramkey: kwargs.get(paramkey)}
                    self.__dict__.update(td)

        unknown = set(kwargs) - set(self.__dict__)
        if unknown:
            raise ConfigError('Unknown run options: ' + ', '.join(sorted(unknown)))

        if isinstance(self.model, dict):
            self.model = DiTConfig.from_dict(self.model)
        plugins = self._default_plugins()
        plugins.update(self.plugins or {})
        self.plugins = plugins
        paths = {'results': None, 'data': None}
        paths.update(self.paths or {})
        self.paths = paths
        self.garment_size = tuple(self.garment_size)

    @staticmethod
    def _default_plugins():
        return {'codec': 'identity', 'text': 'hash_stub', 'visual_a': 'latent_stub',
                'visual_b': 'semantic_stub', 'video_features': 'handcrafted_stub',
                'perceptual': 'gradient_stub'}

    @classmethod
    def from_yaml(cls, path, **overrides):
        """Build from a YAML document; keyword overrides win over file values."""
        if not os.path.exists(str(path)):
            raise ConfigError('Config file not found: ' + str(path))
        with open(path) as f:
            try:
                doc = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError('Config file is not valid YAML: ' + str(e)) from e
        if not isinstance(doc, dict):
            raise ConfigError('Config file must hold a mapping, got ' + type(doc).__name__)
        if isinstance(doc.get('paths'), dict) and 'paths' in overrides:
            overrides = dict(overrides, paths={**doc['paths'], **overrides['paths']})
        doc.update(overrides)
        return cls(**doc)

    def stream_seed(self, name):
        return stream_seed(self.seed, name)

    def results_folder(self):
        return self.paths['results']

    def data_folder(self):
        return self.paths['data']

    def validate(self):
        """Check the configuration against plugin capability records.

        Raises:
            ConfigError: on the first inconsistency.
        """
        if self.loss_form not in diffusion.LOSS_FORMS:
            raise ConfigError('Loss form not recognized: ' + repr(self.loss_form)
                              + '. Allowable forms are: ' + ', '.join(diffusion.LOSS_FORMS))
        self.model.validate()

        codec_cap = CODECS.capability(self.plugins['codec'])
        text_cap = TEXT_EMBEDDERS.capability(self.plugins['text'])
        branch_caps = [VISUAL_EXTRACTORS.capability(self.plugins[k]) for k in ('visual_a', 'visual_b')]
        VIDEO_FEATURES.capability(self.plugins['video_features'])
        PERCEPTUAL_BACKBONES.capability(self.plugins['perceptual'])

        if codec_cap is not None and not self.codec_options and codec_cap.output_dim != self.model.latent_channels:
            raise ConfigError('Codec ' + codec_cap.name + ' yields ' + str(codec_cap.output_dim)
                              + ' latent channels but model.latent_channels is ' + str(self.model.latent_channels))
        if text_cap is not None and text_cap.output_dim != self.model.text_dim:
            raise ConfigError('Text embedder ' + text_cap.name + ' yields ' + str(text_cap.output_dim)
                              + '-dim tokens but model.text_dim is ' + str(self.model.text_dim))
        dims = tuple(c.output_dim for c in branch_caps if c is not None)
        if len(dims) == 2 and dims != tuple(self.model.garment_branch_dims):
            raise ConfigError('Visual extractors yield ' + str(dims) + ' but model.garment_branch_dims is '
                              + str(tuple(self.model.garment_branch_dims)))

        n_steps = _schedule_length(self.schedule)
        if n_steps != self.model.num_timesteps:
            raise ConfigError('Schedule has ' + str(n_steps) + ' timesteps but model.num_timesteps is '
                              + str(self.model.num_timesteps))
        if not (1 <= self.sample_steps <= n_steps):
            raise ConfigError('sample_steps must be in [1, ' + str(n_steps) + ']')
        if self.guidance.get('scale', 1.0) < 0:
            raise ConfigError('Guidance scale must be nonnegative')
        if not isinstance(self.stages, list):
            raise ConfigError('stages must be a list')
        return True


def _schedule_length(schedule):
    if schedule.get('kind', 'linear') == 'explicit':
        return len(schedule['betas'])
    return int(schedule.get('num_timesteps', 1000))


class Inpainter(RunConfig):
    """Codec, denoiser and noise schedule assembled from a RunConfig.

    Inpainter inherits every attribute from RunConfig. The denoiser is built
    under the 'init' seed stream, so two Inpainters with the same config
    start from identical weights.
    """

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.validate()
        self.stage = None

        codec_name = self.plugins['codec']
        self.codec = CODECS.create(codec_name, **self.codec_options)
        if self.codec.channels != self.model.latent_channels:
            raise ConfigError('Codec ' + codec_name + ' yields ' + str(self.codec.channels)
                              + ' latent channels but model.latent_channels is ' + str(self.model.latent_channels))
        self.embedder = TEXT_EMBEDDERS.create(self.plugins['text'])
        self.branch_a = VISUAL_EXTRACTORS.create(self.plugins['visual_a'])
        self.branch_b = VISUAL_EXTRACTORS.create(self.plugins['visual_b'])
        self.noise_schedule = diffusion.NoiseSchedule.from_dict(self.schedule)

        self.latent_shape = self.codec.latent_shape(self.num_frames, self.height, self.width)
        _, h, w, _ = self.latent_shape
        p = self.model.patch_size
        if h % p or w % p:
            raise ConfigError('Latent size ' + str((h, w)) + ' not divisible by patch size ' + str(p))

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.stream_seed('init'))
            self.denoiser = DiT(self.model)

    ###########################################################################
    # Encoders

    def encode(self, video):
        return self.codec.encode(video)

    def decode(self, latent):
        return self.codec.decode(latent)

    def latent_mask(self, mask, target_shape):
        return codec.reshape_mask(mask, target_shape, self.codec.f_s, self.codec.f_t)

    def encode_garment(self, img):
        if not self.model.garment_adapter:
            raise ConfigError('Model has no garment adapter')
        return conditioning.encode_garment(img, self.branch_a, self.branch_b, self.denoiser.garment_encoder)

    def encode_pose(self, pose, target_shape=None):
        if not self.model.pose_encoder:
            raise ConfigError('Model has no pose encoder')
        target_shape = self.latent_shape if target_shape is None else target_shape
        return conditioning.encode_pose(pose, target_shape, self.codec.f_s, self.codec.f_t,
                                        self.denoiser.pose_encoder)

    def build_condition(self, prompt, garment=None, pose=None, t=0, target_shape=None):
        """ConditionBundle using this model's garment and pose encoders."""
        garment_fn = self.encode_garment if self.model.garment_adapter else None
        pose_fn = None
        if self.model.pose_encoder:
            pose_fn = lambda p: self.encode_pose(p, target_shape)
        return conditioning.build_condition(prompt, garment, pose, t, self.embedder,
                                            garment_fn=garment_fn, pose_fn=pose_fn,
                                            garment_dim=self.model.garment_dim,
                                            num_timesteps=self.noise_schedule.num_timesteps)

    ###########################################################################
    # Denoising

    def predict(self, z_in, c, garment_scale=None):
        return self.denoiser(z_in, c, garment_scale=garment_scale)

    def infer(self, video, mask, prompt='', garment=None, pose=None, steps=None, seed=None,
              garment_scale=None, guidance_scale=None):
        """Inpaint the masked region of video.

        agnostic video -> encode -> sample -> decode -> composite with the
        original outside the mask. An all-zero mask returns the input video
        unchanged.

        Args:
            video (Video)
            mask (MaskVideo): 1 marks pixels to regenerate.
            prompt (str)
            garment (GarmentImage, optional)
            pose (PoseVideo, optional)
            steps (int, optional): defaults to sample_steps.
            seed (int, optional): defaults to the 'sampler' stream of the root seed.
            garment_scale (float, optional): s, defaults to model.garment_scale.
            guidance_scale (float, optional): defaults to guidance['scale'].

        Returns:
            Video
        """
        if mask.is_empty():
            log.info('empty mask; returning the input video')
            return codec.Video(video.data.clone(), fps=video.fps)
        steps = self.sample_steps if steps is None else steps
        seed = self.stream_seed('sampler') if seed is None else seed
        guidance_scale = self.guidance.get('scale', 1.0) if guidance_scale is None else guidance_scale

        was_training = self.denoiser.training
        self.denoiser.eval()
        try:
            with torch.no_grad():
                agnostic = codec.make_agnostic(video, mask)
                z_ag = self.encode(agnostic)
                m_z = self.latent_mask(mask, z_ag.shape)
                c = self.build_condition(prompt, garment, pose, 0, target_shape=z_ag.shape)
                model = lambda z_in, ci: self.predict(z_in, ci, garment_scale)
                z_0 = diffusion.sample(model, self.noise_schedule, m_z, z_ag, c, steps, seed,
                                       guidance_scale=guidance_scale)
                generated = self.decode(z_0)
                generated = codec.Video(generated.data.clamp(-1.0, 1.0), fps=video.fps)
        finally:
            self.denoiser.train(was_training)
        return codec.composite_output(generated, video, mask)

    ###########################################################################
    # Evaluation plugins

    def perceptual_backbone(self):
        return PERCEPTUAL_BACKBONES.create(self.plugins['perceptual'])

    def video_features(self):
        return VIDEO_FEATURES.create(self.plugins['video_features'])

    def evaluate(self, real, gen, mask=None):
        return metrics.evaluate_clip(real, gen, mask, backbone=self.perceptual_backbone(),
                                     loss_form=self.loss_form)

    ###########################################################################
    # Checkpoints

    def save(self, folder, stage, optimizer=None, extra=None):
        record = {'plugins': self.plugins, 'codec_options': self.codec_options, 'schedule': self.schedule,
                  'loss_form': self.loss_form, 'num_frames': self.num_frames, 'height': self.height,
                  'width': self.width, 'garment_size': list(self.garment_size)}
        record.update(extra or {})
        return checkpoint.save_checkpoint(self.denoiser, folder, stage, extra=record, optimizer=optimizer)

    def load(self, folder, strict=False):
        return checkpoint.load_into(self.denoiser, folder, strict=strict)

    @classmethod
    def from_checkpoint(cls, folder, **kwargs):
        """Inpainter whose model, plugins and geometry come from a checkpoint manifest."""
        manifest = checkpoint.read_manifest(folder)
        extra = manifest.get('extra', {})
        params = {k: extra[k] for k in ('plugins', 'codec_options', 'schedule', 'loss_form',
                                        'num_frames', 'height', 'width', 'garment_size') if k in extra}
        params['model'] = manifest['model']
        params.update(kwargs)
        inp = cls(**params)
        inp.load(folder, strict=True)
        inp.stage = manifest.get('stage')
        return inp
