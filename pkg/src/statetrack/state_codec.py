"""Compressing feature maps into state tokens, and reconstructing them.

A target feature map (B, D, Hf, Wf) is distilled into two compact vectors:

* channel token (B, D): 4x4 average pool, GroupNorm over all channels, then
  Q/K/V built by 1x1 depthwise-separable convs and attended with the channels
  as tokens (feature length = number of pooled positions), globally pooled
  and squashed by a sigmoid.
* spatial token (B, Wf + Hf): directional means collapse height (width
  branch) and width (height branch); channels split into groups, each group
  passed through its own depthwise-separable length-1 conv; groups rejoined,
  group-normalized, channel-averaged, sigmoid. Width gate comes first.

Reconstruction inverts the compression losslessly enough for supervision: the
outer product of the height/width gates forms a spatial map, scaled by the
broadcast channel token, concatenated with the template feature, and fused by
parallel 1/3/5 convs.

The square pointwise convs initialize near identity so an untrained codec
already maps bright rows/columns/channels to high gate values at the right
index.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DimensionError
from .numerics import Tensor, functional as F
from .numerics.module import Conv2d, GroupNorm, Linear, Module, ModuleList


VALID_SOURCES = ("compressed", "inferred", "init")


@dataclass
class StateTokenPair:
    """One frame's compressed state: spatial + channel token, with provenance."""

    spatial: np.ndarray
    channel: np.ndarray
    frame_index: int
    source: str = "compressed"

    def __post_init__(self):
        self.spatial = np.asarray(self.spatial, dtype=np.float32)
        self.channel = np.asarray(self.channel, dtype=np.float32)
        if self.spatial.ndim != 1 or self.channel.ndim != 1:
            raise DimensionError(
                f"tokens must be 1-D, got {self.spatial.shape}/{self.channel.shape}"
            )
        if not (np.isfinite(self.spatial).all() and np.isfinite(self.channel).all()):
            raise ContractViolation(f"non-finite state token at frame {self.frame_index}")
        if self.source not in VALID_SOURCES:
            raise ContractViolation(f"unknown token source {self.source!r}")


class SeparableMix(Module):
    """Depthwise-separable mixing on (B, C, N): per-channel scale + channel mix."""

    def __init__(self, channels, rng, identity=True):
        super().__init__()
        self.dw = Tensor(np.ones((1, channels, 1), dtype=np.float32), requires_grad=True)
        self.pw = Linear(channels, channels, rng, init="identity" if identity else "trunc")

    def forward(self, x):
        x = F.mul(x, self.dw)
        return F.transpose(self.pw(F.transpose(x, (0, 2, 1))), (0, 2, 1))


class ChannelCompressor(Module):
    def __init__(self, dim, rng, pool=4):
        super().__init__()
        self.pool = pool
        self.norm = GroupNorm(1, dim)
        self.q = SeparableMix(dim, rng)
        self.k = SeparableMix(dim, rng)
        self.v = SeparableMix(dim, rng)

    def forward(self, fmap):
        """(B, D, H, W) -> channel token (B, D) in (0, 1)."""
        if fmap.ndim != 4:
            raise DimensionError(f"expected feature map, got {fmap.shape}")
        b, c, h, w = fmap.shape
        if h < self.pool or w < self.pool:
            pooled = F.mean(fmap, axis=(2, 3), keepdims=True)  # degenerate: global pool
        else:
            pooled = F.avg_pool2d(fmap, self.pool)
        pooled = self.norm(pooled)
        tokens = F.reshape(pooled, (b, c, pooled.shape[2] * pooled.shape[3]))
        # pooled positions are the tokens; dot products contract the channel axis
        q = F.transpose(self.q(tokens), (0, 2, 1))
        k = F.transpose(self.k(tokens), (0, 2, 1))
        v = F.transpose(self.v(tokens), (0, 2, 1))
        att = F.attention(q, k, v)  # (B, N, D)
        return F.sigmoid(F.mean(att, axis=1))


class SpatialCompressor(Module):
    def __init__(self, dim, rng, groups=4):
        super().__init__()
        if dim % groups:
            raise DimensionError(f"{dim} channels not divisible by {groups} groups")
        self.groups = groups
        gc = dim // groups
        self.w_mix = ModuleList([SeparableMix(gc, rng) for _ in range(groups)])
        self.h_mix = ModuleList([SeparableMix(gc, rng) for _ in range(groups)])
        self.w_norm = GroupNorm(groups, dim)
        self.h_norm = GroupNorm(groups, dim)

    def _gate(self, line, mixes, norm):
        b, c, _ = line.shape
        gc = c // self.groups
        parts = [mixes[g](F.narrow(line, 1, g * gc, gc)) for g in range(self.groups)]
        mixed = norm(F.concat(parts, axis=1))
        return F.sigmoid(F.mean(mixed, axis=1))

    def forward(self, fmap):
        """(B, D, H, W) -> spatial token (B, W + H), width gate first."""
        if fmap.ndim != 4:
            raise DimensionError(f"expected feature map, got {fmap.shape}")
        w_gate = self._gate(F.mean(fmap, axis=2), self.w_mix, self.w_norm)  # (B, W)
        h_gate = self._gate(F.mean(fmap, axis=3), self.h_mix, self.h_norm)  # (B, H)
        return F.concat([w_gate, h_gate], axis=1)


class Reconstructor(Module):
    def __init__(self, dim, rng):
        super().__init__()
        self.c1 = Conv2d(2 * dim, dim, 1, rng)
        self.c3 = Conv2d(2 * dim, dim, 3, rng, pad=1)
        self.c5 = Conv2d(2 * dim, dim, 5, rng, pad=2)
        self.proj = Conv2d(dim, dim, 1, rng)

    def forward(self, spatial_tok, channel_tok, f_z):
        """Tokens + template feature (B, D, Hf, Wf) -> predicted feature map."""
        b, d, hf, wf = f_z.shape
        if spatial_tok.shape != (b, wf + hf):
            raise DimensionError(
                f"spatial token {spatial_tok.shape} does not match map {hf}x{wf}"
            )
        if channel_tok.shape != (b, d):
            raise DimensionError(f"channel token {channel_tok.shape} vs {d} channels")
        w_gate = F.reshape(F.narrow(spatial_tok, 1, 0, wf), (b, 1, 1, wf))
        h_gate = F.reshape(F.narrow(spatial_tok, 1, wf, hf), (b, 1, hf, 1))
        grid = F.mul(F.broadcast_to(h_gate, (b, 1, hf, wf)), F.broadcast_to(w_gate, (b, 1, hf, wf)))
        # spatial map and channel token combine additively before fusion
        state = F.add(
            F.broadcast_to(grid, (b, d, hf, wf)),
            F.broadcast_to(F.reshape(channel_tok, (b, d, 1, 1)), (b, d, hf, wf)),
        )
        x = F.concat([state, f_z], axis=1)
        fused = F.gelu(F.add(F.add(self.c1(x), self.c3(x)), self.c5(x)))
        return self.proj(fused)


class StateCodec(Module):
    """Channel + spatial compressors, the paired reconstructor, and the
    learned init tokens that stand in for a state before any history exists."""

    def __init__(self, dim, rng, groups=4, pool=4, spatial_len=8):
        super().__init__()
        self.dim = dim
        self.channel = ChannelCompressor(dim, rng, pool=pool)
        self.spatial = SpatialCompressor(dim, rng, groups=groups)
        self.recon = Reconstructor(dim, rng)
        # neutral-gate starting point; trained like any other parameter
        self.s_init = Tensor(np.full((1, spatial_len), 0.5, np.float32), requires_grad=True)
        self.c_init = Tensor(np.full((1, dim), 0.5, np.float32), requires_grad=True)

    def compress(self, fmap):
        """Feature map -> (spatial token, channel token)."""
        return self.spatial(fmap), self.channel(fmap)

    def reconstruct(self, spatial_tok, channel_tok, f_z):
        return self.recon(spatial_tok, channel_tok, f_z)

    def init_tokens(self):
        """The learned init tokens as live (1, ws) / (1, dc) Tensors."""
        return self.s_init, self.c_init

    def init_pair(self, frame_index):
        """The current init-token values packaged as a StateTokenPair."""
        return StateTokenPair(
            spatial=self.s_init.data[0].copy(), channel=self.c_init.data[0].copy(),
            frame_index=frame_index, source="init",
        )

    def compress_to_pair(self, fmap, frame_index, source="compressed"):
        """Single-sample convenience: returns a StateTokenPair of numpy copies."""
        s, c = self.compress(fmap)
        if s.shape[0] != 1:
            raise ContractViolation("compress_to_pair expects batch size 1")
        return StateTokenPair(
            spatial=s.data[0].copy(), channel=c.data[0].copy(),
            frame_index=frame_index, source=source,
        )
