"""String-keyed plugin registries.

Pretrained components (video VAE, text encoder, visual encoders, 3D video
features, perceptual backbones) sit behind these registries. Each entry is a
factory plus a capability record that RunConfig.validate checks before any
compute happens.
"""
from dataclasses import dataclass, field

from viti.utils.errors import ConfigError


@dataclass(frozen=True)
class Capability:
    """Output dimensions a plugin promises.

    Attributes:
        name (str): registry key.
        kind (str): one of 'codec', 'text', 'visual', 'video_features', 'perceptual'.
        output_dim (int): feature/channel dimension of the plugin output.
        extra (dict): kind-specific facts (codec factors, token counts).
    """
    name: str
    kind: str
    output_dim: int
    extra: dict = field(default_factory=dict)


class Registry:

    def __init__(self, kind):
        self.kind = kind
        self._factories = {}
        self._capabilities = {}

    def register(self, name, capability=None):
        """Decorator registering a factory under name."""
        def wrap(factory):
            self._factories[name] = factory
            if capability is not None:
                self._capabilities[name] = capability
            return factory
        return wrap

    def names(self):
        return sorted(self._factories)

    def capability(self, name):
        self._check(name)
        return self._capabilities.get(name)

    def create(self, name, **kwargs):
        self._check(name)
        return self._factories[name](**kwargs)

    def _check(self, name):
        if name not in self._factories:
            raise ConfigError('Unknown ' + self.kind + ' plugin ' + repr(name)
                              + '. Registered: ' + ', '.join(self.names()))


CODECS = Registry('codec')
TEXT_EMBEDDERS = Registry('text')
VISUAL_EXTRACTORS = Registry('visual')
VIDEO_FEATURES = Registry('video_features')
PERCEPTUAL_BACKBONES = Registry('perceptual')
