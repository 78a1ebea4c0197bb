"""Temporal decoding of search features and box prediction.

Each decoder layer runs two attention stages: search tokens first query a
reference sequence (predicted-state feature tokens concatenated with template
tokens) to form a joint query, then that joint query attends back over the
search tokens that entered the layer; an FFN follows. All three stages are
pre-norm residual. The refined search map feeds two conv branches producing a
sigmoid center-score map and a sigmoid size map; ``decode_box`` turns those
into one box with the peak cell's center (row-major argmax tie-break).
"""

from dataclasses import dataclass

import numpy as np

from .encoder import Mlp, MultiHeadAttention, _to_map, _to_tokens
from .errors import DimensionError
from .numerics import functional as F
from .numerics.module import Conv2d, LayerNorm, Module, ModuleList


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, center + size, in normalized [0, 1] image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DimensionError(f"non-positive box size {self.w}x{self.h}")

    def corners(self):
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def to_pixels(self, canvas_w, canvas_h):
        """(x, y, w, h) in pixels."""
        return (
            (self.cx - self.w / 2.0) * canvas_w,
            (self.cy - self.h / 2.0) * canvas_h,
            self.w * canvas_w,
            self.h * canvas_h,
        )

    @staticmethod
    def from_pixels(x, y, w, h, canvas_w, canvas_h):
        return BBox(
            cx=(x + w / 2.0) / canvas_w,
            cy=(y + h / 2.0) / canvas_h,
            w=w / canvas_w,
            h=h / canvas_h,
        )


class DecoderLayer(Module):
    def __init__(self, dim, heads, rng, mlp_ratio=4):
        super().__init__()
        self.ln_q = LayerNorm(dim)
        self.ln_ref = LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads, rng)
        self.ln_q2 = LayerNorm(dim)
        self.ln_kv2 = LayerNorm(dim)
        self.back = MultiHeadAttention(dim, heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = Mlp(dim, dim * mlp_ratio, rng)

    def forward(self, x, ref):
        joint = F.add(x, self.cross(self.ln_q(x), self.ln_ref(ref)))
        # second stage: the joint query reads the layer's own search tokens
        out = F.add(joint, self.back(self.ln_q2(joint), self.ln_kv2(x)))
        return F.add(out, self.ffn(self.ln_ffn(out)))


class TemporalDecoder(Module):
    def __init__(self, dim, heads, layers, rng):
        super().__init__()
        self.layers = ModuleList([DecoderLayer(dim, heads, rng) for _ in range(layers)])

    def forward(self, x_map, ref_maps):
        """Search feature map + list of reference maps -> refined search map."""
        if not ref_maps:
            raise DimensionError("decoder needs at least one reference map")
        _, _, h, w = x_map.shape
        x = _to_tokens(x_map)
        ref = F.concat([_to_tokens(m) for m in ref_maps], axis=1)
        for layer in self.layers:
            x = layer(x, ref)
        return _to_map(x, h, w)


class HeadOutput:
    """Per-frame head maps: cls (B,1,H,W) and size (B,2,H,W), both in (0,1)."""

    def __init__(self, cls_map, size_map):
        if cls_map.shape[1] != 1 or size_map.shape[1] != 2:
            raise DimensionError(f"head maps: cls {cls_map.shape}, size {size_map.shape}")
        if cls_map.shape[2:] != size_map.shape[2:]:
            raise DimensionError("cls and size grids differ")
        self.cls_map = cls_map
        self.size_map = size_map


class PredictionHead(Module):
    def __init__(self, dim, rng):
        super().__init__()
        mid, low = max(dim // 2, 4), max(dim // 4, 4)
        self.cls_stack = ModuleList([
            Conv2d(dim, mid, 3, rng, pad=1),
            Conv2d(mid, low, 3, rng, pad=1),
            Conv2d(low, 1, 1, rng),
        ])
        self.size_stack = ModuleList([
            Conv2d(dim, mid, 3, rng, pad=1),
            Conv2d(mid, low, 3, rng, pad=1),
            Conv2d(low, 2, 1, rng),
        ])

    @staticmethod
    def _run(stack, x):
        x = F.gelu(stack[0](x))
        x = F.gelu(stack[1](x))
        return F.sigmoid(stack[2](x))

    def forward(self, fmap):
        return HeadOutput(self._run(self.cls_stack, fmap), self._run(self.size_stack, fmap))


def decode_box(cls_map, size_map):
    """Peak cell of the score grid -> (BBox, confidence).

    cls_map (H, W) and size_map (2, H, W) as numpy arrays. The box center is
    the peak cell's center ((col + 0.5)/W, (row + 0.5)/H); width/height are
    the size map at that cell, floored at 1e-6 so the box type stays valid
    when a sigmoid underflows. Ties resolve to the first peak in row-major
    order (np.argmax on the flat array).
    """
    cls_map = np.asarray(cls_map)
    size_map = np.asarray(size_map)
    if cls_map.ndim != 2 or size_map.shape != (2,) + cls_map.shape:
        raise DimensionError(f"decode_box: cls {cls_map.shape}, size {size_map.shape}")
    h, w = cls_map.shape
    idx = int(np.argmax(cls_map))
    row, col = divmod(idx, w)
    box = BBox(
        cx=(col + 0.5) / w,
        cy=(row + 0.5) / h,
        w=max(float(size_map[0, row, col]), 1e-6),
        h=max(float(size_map[1, row, col]), 1e-6),
    )
    return box, float(cls_map[row, col])
