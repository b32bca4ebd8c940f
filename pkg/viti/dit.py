"""Diffusion transformer with full 3D attention and a garment adapter.

Classes:
    DiTConfig
    TokenSequence
    Full3DAttention
    DualCrossAttention
    TimestepEmbedder
    DiTBlock
    DiT
"""
from dataclasses import asdict, dataclass
import math

import torch
import torch.nn as nn
from einops import rearrange

from viti.utils.codec import LatentVideo, _data
from viti.utils.conditioning import GarmentEncoder, PoseEncoder
from viti.utils.errors import ConfigError, ContractError


@dataclass
class DiTConfig:
    """Denoiser hyperparameters.

    Attributes:
        depth (int): number of transformer blocks. Defaults to 2.
        model_dim (int): token width D. Defaults to 64.
        heads (int): attention heads; must divide model_dim. Defaults to 4.
        patch_size (int): spatial patch p. Defaults to 2.
        latent_channels (int): codec channels C. Defaults to 3.
        text_dim (int): width of text tokens. Defaults to 32.
        garment_dim (int): width of garment tokens. Defaults to 64.
        garment_scale (float): s, weight of the garment branch. Defaults to 1.0.
        garment_adapter (bool): build the garment branch and garment encoder.
        garment_branch_dims (tuple): widths of the two visual extractor branches.
        pose_encoder (bool): build the pose encoder.
        pose_channels (int): dense-pose channels P. Defaults to 3.
        mlp_ratio (float): FFN expansion. Defaults to 4.0.
        max_frames, max_rows, max_cols (int): sizes of the positional tables.
        num_timesteps (int): T_diff; timesteps outside [0, T_diff) are rejected.
        freq_dim (int): sinusoidal timestep embedding width. Defaults to 64.
        zero_init_head (bool): zero-initialize the output head. Defaults to True.
        attn_block_size (int or None): query block size for blocked attention.
    """
    depth: int = 2
    model_dim: int = 64
    heads: int = 4
    patch_size: int = 2
    latent_channels: int = 3
    text_dim: int = 32
    garment_dim: int = 64
    garment_scale: float = 1.0
    garment_adapter: bool = False
    garment_branch_dims: tuple = (16, 32)
    pose_encoder: bool = False
    pose_channels: int = 3
    mlp_ratio: float = 4.0
    max_frames: int = 32
    max_rows: int = 64
    max_cols: int = 64
    num_timesteps: int = 1000
    freq_dim: int = 64
    zero_init_head: bool = True
    attn_block_size: int = None

    def __post_init__(self):
        self.garment_branch_dims = tuple(self.garment_branch_dims)
        self.validate()

    def validate(self):
        for name in ['depth', 'model_dim', 'heads', 'patch_size', 'latent_channels', 'text_dim', 'garment_dim']:
            if getattr(self, name) < 1:
                raise ConfigError(name + ' must be a positive integer')
        if self.model_dim % self.heads:
            raise ConfigError('model_dim ' + str(self.model_dim) + ' not divisible by heads ' + str(self.heads))
        if self.garment_scale < 0:
            raise ConfigError('garment_scale must be nonnegative')

    def to_dict(self):
        d = asdict(self)
        d['garment_branch_dims'] = list(self.garment_branch_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError('Unknown model options: ' + ', '.join(sorted(unknown)))
        return cls(**d)


@dataclass
class TokenSequence:
    """Patchified latent.

    Attributes:
        data (torch.Tensor): [(B,) L, D].
        layout (tuple): (T, h/p, w/p); L is their product.
    """
    data: torch.Tensor
    layout: tuple = None

    @property
    def length(self):
        return self.data.shape[-2]


###############################################################################
# Patchify

def patchify(latent, p, proj=None):
    """Non-overlapping p x p patches per latent frame, flattened in (T, row, col) order.

    Each token holds its patch entries in (row-in-patch, col-in-patch, channel)
    order; proj, if given, maps them to the model width.

    Raises:
        ConfigError: h or w not divisible by p.
    """
    z = _data(latent)
    n_frames, height, width = z.shape[-4], z.shape[-3], z.shape[-2]
    if height % p or width % p:
        raise ConfigError('Latent size ' + str((height, width)) + ' not divisible by patch size ' + str(p))
    x = rearrange(z, '... t (r a) (c b) ch -> ... (t r c) (a b ch)', a=p, b=p)
    if proj is not None:
        x = proj(x)
    return TokenSequence(x, (n_frames, height // p, width // p))


def unpatchify(tokens, p):
    """Exact inverse of patchify's rearrangement.

    Raises:
        ContractError: the token sequence has no layout.
    """
    if getattr(tokens, 'layout', None) is None:
        raise ContractError('unpatchify needs a token sequence with layout metadata')
    n_frames, rows, cols = tokens.layout
    z = rearrange(tokens.data, '... (t r c) (a b ch) -> ... t (r a) (c b) ch', t=n_frames, r=rows, c=cols, a=p, b=p)
    if z.ndim == 4:
        return LatentVideo(z)
    return z


###############################################################################
# Attention

def scaled_dot_attention(q, k, v, key_mask=None, block_size=None):
    """softmax(q k^T / sqrt(d)) v over heads.

    Args:
        q (torch.Tensor): [B, H, L, d]
        k, v (torch.Tensor): [B, H, S, d]
        key_mask (torch.Tensor, optional): [B, S] bool, False marks padding.
            Queries of a sample without any valid key get 0.
        block_size (int, optional): process queries in blocks of this size.
    """
    if k.shape[-2] == 0:
        return torch.zeros_like(q)
    if block_size is not None and q.shape[-2] > block_size:
        return torch.cat([scaled_dot_attention(q[..., i:i + block_size, :], k, v, key_mask)
                          for i in range(0, q.shape[-2], block_size)], dim=-2)
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float('-inf'))
        has_keys = key_mask.any(dim=-1)
        scores = torch.where(has_keys[:, None, None, None], scores, torch.zeros_like(scores))
        out = scores.softmax(dim=-1) @ v
        return out * has_keys[:, None, None, None].to(out.dtype)
    return scores.softmax(dim=-1) @ v


class Full3DAttention(nn.Module):
    """Multi-head self-attention over every token of every latent frame jointly."""

    def __init__(self, dim, heads, block_size=None):
        super().__init__()
        self.heads = heads
        self.block_size = block_size
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = rearrange(self.qkv(x), 'b l (three h d) -> three b h l d', three=3, h=self.heads)
        out = scaled_dot_attention(q, k, v, block_size=self.block_size)
        return self.proj(rearrange(out, 'b h l d -> b l (h d)'))


class DualCrossAttention(nn.Module):
    """Text cross-attention with a parallel garment branch weighted by s.

    Returns x + CrossAttn(x, text) + s * CrossAttn(x, garment). The query
    projection is shared; each branch has its own key, value and output
    projections. A branch without tokens contributes exactly 0.
    """

    def __init__(self, dim, heads, text_dim, garment_dim=None, garment_adapter=False):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(text_dim, dim)
        self.to_v = nn.Linear(text_dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.garment_adapter = garment_adapter
        if garment_adapter:
            self.to_k_garment = nn.Linear(garment_dim, dim)
            self.to_v_garment = nn.Linear(garment_dim, dim)
            self.to_out_garment = nn.Linear(dim, dim)

    def _branch(self, q, ctx, mask, to_k, to_v, to_out):
        if ctx is None or ctx.shape[-2] == 0:
            return None
        k = rearrange(to_k(ctx), 'b s (h d) -> b h s d', h=self.heads)
        v = rearrange(to_v(ctx), 'b s (h d) -> b h s d', h=self.heads)
        out = to_out(rearrange(scaled_dot_attention(q, k, v, mask), 'b h l d -> b l (h d)'))
        if mask is not None:
            out = out * mask.any(dim=-1)[:, None, None].to(out.dtype)
        return out

    def forward(self, x, text, text_mask=None, garment=None, garment_mask=None, s=1.0):
        q = rearrange(self.to_q(x), 'b l (h d) -> b h l d', h=self.heads)
        out = x
        t = self._branch(q, text, text_mask, self.to_k, self.to_v, self.to_out)
        if t is not None:
            out = out + t
        if self.garment_adapter and s != 0:
            g = self._branch(q, garment, garment_mask, self.to_k_garment, self.to_v_garment, self.to_out_garment)
            if g is not None:
                out = out + s * g
        return out


###############################################################################
# Embeddings and blocks

class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep features followed by a two-layer MLP."""

    def __init__(self, hidden_size, frequency_embedding_size=64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, hidden_size),
            nn.SiLU(),
            nn.Linear(hidden_size, hidden_size),
        )
        self.frequency_embedding_size = frequency_embedding_size

    @staticmethod
    def timestep_embedding(t, dim, max_period=10000):
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        args = t[:, None].double() * freqs[None]
        embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if dim % 2:
            embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
        return embedding

    def forward(self, t):
        dtype = self.mlp[0].weight.dtype
        return self.mlp(self.timestep_embedding(t, self.frequency_embedding_size).to(dtype))


class DiTBlock(nn.Module):
    """norm -> self-attn -> residual -> dual cross-attn (residual) -> norm -> FFN -> residual."""

    def __init__(self, cfg):
        super().__init__()
        d = cfg.model_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = Full3DAttention(d, cfg.heads, block_size=cfg.attn_block_size)
        self.cross = DualCrossAttention(d, cfg.heads, cfg.text_dim, cfg.garment_dim, cfg.garment_adapter)
        self.norm2 = nn.LayerNorm(d)
        hidden = int(d * cfg.mlp_ratio)
        self.ffn = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x, c, s):
        x = x + self.attn(self.norm1(x))
        x = self.cross(x, c.text_tokens, c.text_mask, c.garment_tokens, c.garment_mask, s)
        x = x + self.ffn(self.norm2(x))
        return x


def _batched(t, ndim):
    if t is None:
        return None
    return t.unsqueeze(0) if t.ndim == ndim - 1 else t


class DiT(nn.Module):
    """The denoiser: predicts the injected noise from the fused latent input.

    Submodules garment_encoder and pose_encoder exist only when the config
    enables them, so inpainting-only checkpoints carry no adapter tensors.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        p, d, ch = cfg.patch_size, cfg.model_dim, cfg.latent_channels
        self.x_embedder = nn.Linear(p * p * ch, d)
        self.pos_t = nn.Parameter(torch.randn(cfg.max_frames, d) * 0.02)
        self.pos_row = nn.Parameter(torch.randn(cfg.max_rows, d) * 0.02)
        self.pos_col = nn.Parameter(torch.randn(cfg.max_cols, d) * 0.02)
        self.t_embedder = TimestepEmbedder(d, cfg.freq_dim)
        self.blocks = nn.ModuleList([DiTBlock(cfg) for _ in range(cfg.depth)])
        self.norm_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, p * p * ch)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        if cfg.garment_adapter:
            dim_a, dim_b = cfg.garment_branch_dims
            self.garment_encoder = GarmentEncoder(dim_a, dim_b, cfg.garment_dim)
        if cfg.pose_encoder:
            self.pose_encoder = PoseEncoder(cfg.pose_channels, ch)

    def positional_embedding(self, layout):
        n_frames, rows, cols = layout
        if n_frames > self.cfg.max_frames or rows > self.cfg.max_rows or cols > self.cfg.max_cols:
            raise ConfigError('Token layout ' + str(layout) + ' exceeds positional tables '
                              + str((self.cfg.max_frames, self.cfg.max_rows, self.cfg.max_cols)))
        pos = (self.pos_t[:n_frames, None, None] + self.pos_row[None, :rows, None]
               + self.pos_col[None, None, :cols])
        return rearrange(pos, 't r c d -> (t r c) d')

    def forward(self, z, c, garment_scale=None):
        """Predicted noise with the shape of z.

        Args:
            z (torch.Tensor): fused latent input, [(B,) T, h, w, C].
            c (ConditionBundle)
            garment_scale (float, optional): overrides cfg.garment_scale.
        """
        z = _data(z)
        unbatched = z.ndim == 4
        z = _batched(z, 5)
        s = self.cfg.garment_scale if garment_scale is None else garment_scale

        t = torch.as_tensor(c.timestep, dtype=torch.long).reshape(-1)
        if ((t < 0) | (t >= self.cfg.num_timesteps)).any():
            raise ContractError('Timestep ' + str(c.timestep) + ' outside [0, ' + str(self.cfg.num_timesteps) + ')')
        if t.numel() == 1:
            t = t.expand(z.shape[0])

        if c.pose_latent is not None:
            z = z + _batched(c.pose_latent, 5)

        bundle = _BatchedBundle(c)
        tokens = patchify(z, self.cfg.patch_size, self.x_embedder)
        x = tokens.data + self.positional_embedding(tokens.layout)
        x = x + self.t_embedder(t)[:, None, :]
        for block in self.blocks:
            x = block(x, bundle, s)
        x = self.head(self.norm_out(x))
        out = unpatchify(TokenSequence(x, tokens.layout), self.cfg.patch_size)
        return out[0] if unbatched else out


class _BatchedBundle:
    """Bundle view with a leading batch axis on every token tensor."""

    def __init__(self, c):
        self.text_tokens = _batched(c.text_tokens, 3)
        self.text_mask = _batched(c.text_mask, 2)
        self.garment_tokens = _batched(c.garment_tokens, 3)
        self.garment_mask = _batched(c.garment_mask, 2)
