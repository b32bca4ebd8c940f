"""Command-line entrypoint: viti {train, infer, eval, maskgen, data-synth}.

Exit codes: 0 ok, 2 configuration error, 3 numeric error. Failures print one
JSON error record on stderr.
"""
import argparse
import json
import logging
import os
import sys

import matplotlib.pyplot as plt
import numpy as np

from viti.experiment import Experiment
from viti.inpainter import Inpainter, RunConfig
from viti.utils import metrics, plotter, synth, video_io
from viti.utils.dir_manager import default_config_path, make_directory, resolve_data_path
from viti.utils.errors import ConfigError, VitiError
from viti.utils.diffusion import LOSS_FORMS
from viti.utils.masking import STRATEGIES, MaskSpec, generate_mask
from viti.utils.plugins import PERCEPTUAL_BACKBONES, VIDEO_FEATURES

log = logging.getLogger(__name__)


def _run_overrides(args):
    overrides = {}
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
    if getattr(args, 'loss_form', None) is not None:
        overrides['loss_form'] = args.loss_form
    if getattr(args, 'results', None) is not None:
        overrides['paths'] = {'results': args.results}
    return overrides


def _load_run(args):
    path = args.config if args.config is not None else default_config_path()
    return RunConfig.from_yaml(path, **_run_overrides(args))


###############################################################################
# Subcommands

def cmd_train(args):
    run = _load_run(args)
    stages = [dict(s) for s in run.stages]
    if args.steps is not None:
        for s in stages:
            s['steps'] = args.steps
    exp = Experiment(run, stages=stages, workers=args.workers)
    folder = exp.run_experiment()
    print(folder)
    return 0


def cmd_infer(args):
    kwargs = {}
    if args.loss_form is not None:
        kwargs['loss_form'] = args.loss_form
    if args.seed is not None:
        kwargs['seed'] = args.seed
    inp = Inpainter.from_checkpoint(args.checkpoint, **kwargs)
    video = video_io.read_video(args.video)
    mask = video_io.read_mask(args.mask)
    garment = None if args.garment is None else video_io.read_garment(args.garment)
    pose = None if args.pose is None else video_io.read_pose(args.pose)
    out = inp.infer(video, mask, prompt=args.prompt, garment=garment, pose=pose, steps=args.steps,
                    seed=args.seed, garment_scale=args.garment_scale, guidance_scale=args.guidance_scale)
    written = video_io.write_video(out, args.out, raw=args.raw)
    print(written if args.raw else args.out)
    return 0


def _clip_names(folder):
    if not os.path.isdir(folder):
        raise ConfigError('Clip folder not found: ' + str(folder))
    return sorted(f for f in os.listdir(folder)
                  if os.path.isdir(os.path.join(folder, f)) or f.endswith(video_io.RAW_SUFFIX))


def _compare_folders(items):
    """NAME=FOLDER arguments as an ordered dict."""
    folders = {}
    for item in items or []:
        name, sep, folder = item.partition('=')
        if not sep or not name or not folder:
            raise ConfigError('--compare expects NAME=FOLDER, got ' + repr(item))
        if not _clip_names(folder):
            raise ConfigError('No clips to compare in ' + folder)
        folders[name] = folder
    return folders


def cmd_eval(args):
    run = _load_run(args) if args.config is not None else RunConfig(**_run_overrides(args))
    real_names, gen_names = _clip_names(args.real), _clip_names(args.gen)
    if len(real_names) != len(gen_names):
        raise ConfigError('Clip counts differ: ' + str(len(real_names)) + ' real vs '
                          + str(len(gen_names)) + ' generated')
    mask_names = _clip_names(args.mask) if args.mask is not None else None
    if mask_names is not None and len(mask_names) != len(real_names):
        raise ConfigError('Mask count differs from clip count')
    compare = _compare_folders(args.compare)

    backbone = PERCEPTUAL_BACKBONES.create(run.plugins['perceptual'])
    fx = VIDEO_FEATURES.create(run.plugins['video_features'])
    reals, gens, reports = [], [], []
    for k, (rn, gn) in enumerate(zip(real_names, gen_names)):
        real = video_io.read_video(os.path.join(args.real, rn))
        gen = video_io.read_video(os.path.join(args.gen, gn))
        mask = None if mask_names is None else video_io.read_mask(os.path.join(args.mask, mask_names[k]))
        reports.append(metrics.evaluate_clip(real, gen, mask, backbone=backbone, loss_form=run.loss_form))
        reals.append(real)
        gens.append(gen)

    vfid_value = None
    if len(reals) >= 2:
        vfid_value = metrics.vfid(reals, gens, fx)
    else:
        log.warning('VFID needs at least 2 clips per set; skipped')
    df = metrics.summarize(reports, vfid_value=vfid_value, names=real_names)
    out = args.out if args.out is not None else os.path.join(args.gen, 'report.csv')
    parent = os.path.dirname(out)
    if parent:
        make_directory(parent)
    df.to_csv(out)
    print(out)
    if compare:
        stages = {'gen': gens}
        for name, folder in compare.items():
            stages[name] = [video_io.read_video(os.path.join(folder, n)) for n in _clip_names(folder)]
        table = metrics.compare_stages(stages)
        table.index.name = 'stage'
        stages_out = os.path.splitext(out)[0] + '_stages.csv'
        table.to_csv(stages_out)
        print(stages_out)
    return 0


def cmd_maskgen(args):
    spec = MaskSpec(strategy=args.strategy, size_range=tuple(args.size_range),
                    inversion_prob=args.inversion_prob, seed=args.seed,
                    target_label=args.label if len(args.label) > 1 else args.label[0])
    seg = None
    if args.seg is not None:
        seg = video_io.read_labels(resolve_data_path(args.seg))
        n_frames, height, width = seg.shape
    else:
        n_frames, height, width = args.frames, args.height, args.width
    mask = generate_mask(spec, n_frames, height, width, rng=np.random.default_rng(args.seed), seg=seg)
    video_io.write_mask(mask, args.out)
    if args.preview:
        fig, _ = plotter.plot_mask_strip(mask, save_path=args.out.rstrip(os.sep) + '_preview.png')
        plt.close(fig)
    print(args.out)
    return 0


def cmd_data_synth(args):
    manifest = synth.write_dataset(args.out, n_clips=args.clips, seed=args.seed, n_frames=args.frames,
                                   height=args.height, width=args.width,
                                   garment_size=tuple(args.garment_size))
    print(manifest)
    return 0


###############################################################################
# Parser

def build_parser():
    parser = argparse.ArgumentParser(prog='viti', description='Conditional video inpainting')
    parser.add_argument('--log-level', default='INFO', help='logging level (default: INFO)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='run the configured training stages')
    p.add_argument('--config', default=None, help='YAML run config (default: packaged config)')
    p.add_argument('--seed', type=int, default=None, help='root seed')
    p.add_argument('--steps', type=int, default=None, help='override the steps of every stage')
    p.add_argument('--loss-form', choices=LOSS_FORMS, default=None)
    p.add_argument('--workers', type=int, default=0, help='data-loading workers')
    p.add_argument('--results', default=None, help='results root (default: $VITI_RESULTS_DIR or ./results)')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('infer', help='inpaint one clip')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--video', required=True, help='frame folder or raw container')
    p.add_argument('--mask', required=True, help='mask frame folder')
    p.add_argument('--prompt', default='')
    p.add_argument('--garment', default=None, help='garment image')
    p.add_argument('--pose', default=None, help='pose frame folder')
    p.add_argument('--steps', type=int, default=None, help='sampling steps')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--garment-scale', type=float, default=None, help='weight s of the garment branch')
    p.add_argument('--guidance-scale', type=float, default=None)
    p.add_argument('--loss-form', choices=LOSS_FORMS, default=None)
    p.add_argument('--out', required=True)
    p.add_argument('--raw', action='store_true', help='write a raw tensor container instead of frames')
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser('eval', help='metric report of generated clips against real clips')
    p.add_argument('--real', required=True)
    p.add_argument('--gen', required=True)
    p.add_argument('--mask', default=None)
    p.add_argument('--config', default=None, help='YAML run config naming the metric plugins')
    p.add_argument('--loss-form', choices=LOSS_FORMS, default=None)
    p.add_argument('--out', default=None, help='report csv (default: <gen>/report.csv)')
    p.add_argument('--compare', nargs='+', default=None, metavar='NAME=FOLDER',
                   help='generated sets of other stages; writes a flicker table next to the report')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('maskgen', help='write one generated mask clip')
    p.add_argument('--strategy', choices=STRATEGIES, default='time_invariant_box')
    p.add_argument('--frames', type=int, default=8)
    p.add_argument('--height', type=int, default=32)
    p.add_argument('--width', type=int, default=24)
    p.add_argument('--size-range', type=float, nargs=2, default=[0.25, 0.5])
    p.add_argument('--inversion-prob', type=float, default=0.0)
    p.add_argument('--seg', default=None, help='label-map folder for instance/garment masks')
    p.add_argument('--label', type=int, nargs='+', default=[2])
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--preview', action='store_true', help='also render <out>_preview.png')
    p.set_defaults(func=cmd_maskgen)

    p = sub.add_parser('data-synth', help='write a synthetic dataset with manifest.csv')
    p.add_argument('--out', required=True)
    p.add_argument('--clips', type=int, default=16)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--frames', type=int, default=8)
    p.add_argument('--height', type=int, default=32)
    p.add_argument('--width', type=int, default=24)
    p.add_argument('--garment-size', type=int, nargs=2, default=[32, 32])
    p.set_defaults(func=cmd_data_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='%(asctime)s | %(levelname)s | %(name)s: %(message)s')
    try:
        return args.func(args)
    except VitiError as e:
        record = {'error': type(e).__name__, 'message': str(e), 'exit_code': e.exit_code}
        sys.stderr.write(json.dumps(record) + '\n')
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
