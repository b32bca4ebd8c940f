"""Checkpoint directories.

Layout (stable):
    <ckpt>/model.safetensors   named tensors
    <ckpt>/manifest.json       {"format": 1, "stage": ..., "model": DiTConfig,
                                "tensors": {name: {"shape": [...], "dtype": "..."}},
                                "extra": {...}}
    <ckpt>/optimizer.pt        optional optimizer state
"""
import json
import logging
import os

import torch
from safetensors.torch import load_file, save_file

from viti.utils.dir_manager import make_directory
from viti.utils.errors import ConfigError

log = logging.getLogger(__name__)

WEIGHTS = 'model.safetensors'
MANIFEST = 'manifest.json'
OPTIMIZER = 'optimizer.pt'
FORMAT_VERSION = 1


def save_checkpoint(model, folder, stage, extra=None, optimizer=None):
    """Write weights, manifest and (optionally) optimizer state to folder."""
    make_directory(folder)
    state = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    save_file(state, os.path.join(folder, WEIGHTS))
    manifest = {
        'format': FORMAT_VERSION,
        'stage': str(stage),
        'model': model.cfg.to_dict(),
        'tensors': {k: {'shape': list(v.shape), 'dtype': str(v.dtype).replace('torch.', '')}
                    for k, v in state.items()},
        'extra': extra or {},
    }
    with open(os.path.join(folder, MANIFEST), 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    if optimizer is not None:
        torch.save(optimizer.state_dict(), os.path.join(folder, OPTIMIZER))
    log.info('saved checkpoint %s (stage %s, %d tensors)', folder, stage, len(state))
    return folder


def read_manifest(folder):
    path = os.path.join(str(folder), MANIFEST)
    if not os.path.exists(path):
        raise ConfigError('Not a checkpoint directory (no ' + MANIFEST + '): ' + str(folder))
    with open(path) as f:
        return json.load(f)


def load_checkpoint(folder):
    """(state_dict, manifest) of a checkpoint directory."""
    manifest = read_manifest(folder)
    return load_file(os.path.join(str(folder), WEIGHTS)), manifest


def load_into(model, folder, strict=False):
    """Copy every shared tensor name from folder into model.

    Tensors the model has but the checkpoint lacks keep their fresh
    initialization (new adapter/pose tensors when moving to the conditioning
    stage).

    Returns:
        tuple: (loaded names, missing names, unexpected names)

    Raises:
        ConfigError: a shared name has a different shape, or strict and the
            name sets differ.
    """
    state, manifest = load_checkpoint(folder)
    own = model.state_dict()
    for k, v in state.items():
        if k in own and tuple(own[k].shape) != tuple(v.shape):
            raise ConfigError('Tensor ' + k + ' has shape ' + str(tuple(v.shape)) + ' in checkpoint but '
                              + str(tuple(own[k].shape)) + ' in the model')
    result = model.load_state_dict(state, strict=False)
    missing, unexpected = list(result.missing_keys), list(result.unexpected_keys)
    if strict and (missing or unexpected):
        raise ConfigError('Checkpoint/model tensor mismatch: missing ' + str(missing) + ', unexpected ' + str(unexpected))
    loaded = sorted(set(state) & set(own))
    if missing:
        log.info('fresh tensors not in checkpoint: %s', ', '.join(missing))
    return loaded, missing, unexpected

