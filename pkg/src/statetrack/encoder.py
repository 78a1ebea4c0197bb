"""Joint template/search feature extraction.

Template and search images are patch-embedded by a small conv stack (total
stride 16), tagged with learned positional embeddings, concatenated into one
token sequence, and run through pre-norm self-attention layers so the two
views attend to each other. The output splits back into a template feature
map and a search feature map.

A second, frozen copy of this module (refreshed from the live weights between
epochs) embeds ground-truth target crops during training; reusing the template
positional embedding for the crop slot makes a crop identical to the template
produce the template's own feature map.
"""

import numpy as np

from .errors import DimensionError
from .numerics import Tensor, functional as F
from .numerics.module import Conv2d, Linear, LayerNorm, Module, ModuleList, trunc_normal


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, t):
        b, n, d = t.shape
        h = self.heads
        return F.transpose(F.reshape(t, (b, n, h, d // h)), (0, 2, 1, 3))

    def forward(self, q_tokens, kv_tokens):
        b, nq, d = q_tokens.shape
        q = self._split(self.q(q_tokens))
        k = self._split(self.k(kv_tokens))
        v = self._split(self.v(kv_tokens))
        out = F.attention(q, k, v)  # (B, h, Nq, d/h)
        out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (b, nq, d))
        return self.o(out)


class Mlp(Module):
    def __init__(self, dim, hidden, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm residual block: self-attention then MLP."""

    def __init__(self, dim, heads, mlp_ratio, rng):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def forward(self, x):
        h = self.ln1(x)
        x = F.add(x, self.attn(h, h))
        return F.add(x, self.mlp(self.ln2(x)))


def _fan_in_std(cin, k):
    # Kaiming scale; the transformer-default 0.02 stacked three times here
    # would leave patch tokens orders of magnitude below the positional
    # embeddings, starving every layer above of image content
    return float(np.sqrt(2.0 / (cin * k * k)))


class PatchEmbed(Module):
    """Conv stack with total stride 16: 3 -> dim/4 -> dim/2 -> dim."""

    def __init__(self, dim, rng):
        super().__init__()
        if dim % 4:
            raise DimensionError(f"embed dim {dim} must be divisible by 4")
        self.c1 = Conv2d(3, dim // 4, 4, rng, stride=4, std=_fan_in_std(3, 4))
        self.c2 = Conv2d(dim // 4, dim // 2, 2, rng, stride=2, std=_fan_in_std(dim // 4, 2))
        self.c3 = Conv2d(dim // 2, dim, 2, rng, stride=2, std=_fan_in_std(dim // 2, 2))

    def forward(self, img):
        x = F.gelu(self.c1(img))
        x = F.gelu(self.c2(x))
        return self.c3(x)  # (B, dim, H/16, W/16)


def _to_tokens(fmap):
    b, d, h, w = fmap.shape
    return F.transpose(F.reshape(fmap, (b, d, h * w)), (0, 2, 1))


def _to_map(tokens, h, w):
    b, n, d = tokens.shape
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot tile a {h}x{w} map")
    return F.reshape(F.transpose(tokens, (0, 2, 1)), (b, d, h, w))


class JointEncoder(Module):
    def __init__(self, dim, heads, layers, template_size, search_size, rng, mlp_ratio=4):
        super().__init__()
        if template_size % 16 or search_size % 16:
            raise DimensionError("image sizes must be multiples of the stride (16)")
        if search_size <= template_size:
            raise DimensionError(
                f"search side {search_size} must exceed template side {template_size}"
            )
        self.dim = dim
        self.z_side = template_size // 16
        self.x_side = search_size // 16
        self.n_z = self.z_side * self.z_side
        self.n_x = self.x_side * self.x_side
        self.embed = PatchEmbed(dim, rng)
        self.pos_z = Tensor(trunc_normal(rng, (1, self.n_z, dim)), requires_grad=True)
        self.pos_x = Tensor(trunc_normal(rng, (1, self.n_x, dim)), requires_grad=True)
        self.layers = ModuleList([EncoderLayer(dim, heads, mlp_ratio, rng) for _ in range(layers)])

    def embed_pair(self, z_img, x_img):
        """(B,3,Sz,Sz) + (B,3,Sx,Sx) -> joint token sequence (B, Nz+Nx, D)."""
        zt = F.add(_to_tokens(self.embed(z_img)), self.pos_z)
        xt = F.add(_to_tokens(self.embed(x_img)), self.pos_x)
        return F.concat([zt, xt], axis=1)

    def encode(self, tokens):
        # zero layers degenerate to the raw embedding, so no trailing norm
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens

    def split_maps(self, tokens):
        zt = F.narrow(tokens, 1, 0, self.n_z)
        xt = F.narrow(tokens, 1, self.n_z, tokens.shape[1] - self.n_z)
        side_x = int(np.sqrt(xt.shape[1]))
        return _to_map(zt, self.z_side, self.z_side), _to_map(xt, side_x, side_x)

    def forward(self, z_img, x_img):
        """Returns (template feature map, search feature map)."""
        return self.split_maps(self.encode(self.embed_pair(z_img, x_img)))

    def encode_pair_maps(self, z_img, crop_img):
        """Joint pass where both slots are template-sized; the second slot
        reuses the template positional embedding. Returns both feature maps."""
        if crop_img.shape != z_img.shape:
            raise DimensionError(f"crop {crop_img.shape} vs template {z_img.shape}")
        zt = F.add(_to_tokens(self.embed(z_img)), self.pos_z)
        ct = F.add(_to_tokens(self.embed(crop_img)), self.pos_z)
        tokens = self.encode(F.concat([zt, ct], axis=1))
        z_out = F.narrow(tokens, 1, 0, self.n_z)
        c_out = F.narrow(tokens, 1, self.n_z, self.n_z)
        return _to_map(z_out, self.z_side, self.z_side), _to_map(c_out, self.z_side, self.z_side)

    def encode_crop_pair(self, z_img, crop_img):
        """The crop-slot feature map of encode_pair_maps."""
        return self.encode_pair_maps(z_img, crop_img)[1]


def split_tokens(tokens, n_z):
    """Split a joint sequence into (template tokens, search tokens)."""
    zt = F.narrow(tokens, 1, 0, n_z)
    xt = F.narrow(tokens, 1, n_z, tokens.shape[1] - n_z)
    return zt, xt
