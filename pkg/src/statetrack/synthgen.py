"""Deterministic synthetic tracking sequences and evaluation metrics.

A scene is one moving textured target on a static noise background, with
optional look-alike distractors, per-frame hue/scale drift, and scripted
full-occlusion intervals where an opaque patch covers the target. Same spec,
same frames, bit for bit.

Sequences round-trip through a directory of PNG frames plus a UTF-8
annotation file with one ``frame_index x y w h`` line per frame (pixels).
"""

import colorsys
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .imaging import load_png, save_png
from .losses import iou_xyxy

SHAPES = ("rectangle", "ellipse")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    frames: int
    canvas: int = 128
    shape: str = "rectangle"
    hue_drift: float = 0.0
    scale_drift: float = 0.0
    speed: float = 2.0
    motion_noise: float = 0.3
    distractors: int = 0
    # half-open [start, end) frame intervals with the target fully occluded
    occlusions: tuple = field(default_factory=tuple)
    base_size: tuple = None

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigurationError("a scene needs at least one frame")
        if self.canvas < 32:
            raise ConfigurationError(f"canvas {self.canvas} too small")
        if self.shape not in SHAPES:
            raise ConfigurationError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.distractors < 0:
            raise ConfigurationError("distractor count must be non-negative")
        for iv in self.occlusions:
            if len(iv) != 2 or iv[0] >= iv[1]:
                raise ConfigurationError(f"bad occlusion interval {iv}")


def _hsv_u8(h, s, v):
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return np.array([r, g, b], dtype=np.float64) * 255.0


def _background(rng, canvas):
    """Static smooth-noise background, uint8 (H, W, 3)."""
    coarse = rng.uniform(40.0, 200.0, (8, 8, 3))
    ys = np.linspace(0, 7, canvas)
    xs = np.linspace(0, 7, canvas)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, 7)
    x1 = np.minimum(x0 + 1, 7)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = (
        coarse[y0][:, x0] * (1 - fy) * (1 - fx)
        + coarse[y0][:, x1] * (1 - fy) * fx
        + coarse[y1][:, x0] * fy * (1 - fx)
        + coarse[y1][:, x1] * fy * fx
    )
    img += rng.normal(0.0, 6.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _shape_mask(shape, h, w):
    if shape == "rectangle":
        return np.ones((h, w), dtype=bool)
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w * 2.0 - 1.0
    return (ys[:, None] ** 2 + xs[None, :] ** 2) <= 1.0


def _nearest_resize(tex, h, w):
    th, tw = tex.shape
    ri = np.minimum((np.arange(h) * th) // h, th - 1)
    ci = np.minimum((np.arange(w) * tw) // w, tw - 1)
    return tex[ri][:, ci]


class _Blob:
    """One moving textured shape with its own motion state."""

    def __init__(self, rng, spec, hue, size):
        self.hue0 = hue
        self.w0, self.h0 = size
        self.tex = rng.uniform(0.7, 1.0, (self.h0, self.w0))
        c = spec.canvas
        self.cx = rng.uniform(self.w0 / 2 + 1, c - self.w0 / 2 - 1)
        self.cy = rng.uniform(self.h0 / 2 + 1, c - self.h0 / 2 - 1)
        ang = rng.uniform(0, 2 * np.pi)
        self.vx = spec.speed * np.cos(ang)
        self.vy = spec.speed * np.sin(ang)

    def step(self, rng, spec, t):
        if t > 0:
            self.vx += rng.normal(0.0, spec.motion_noise)
            self.vy += rng.normal(0.0, spec.motion_noise)
            self.cx += self.vx
            self.cy += self.vy
        scale = (1.0 + spec.scale_drift) ** t
        w = max(4, int(round(self.w0 * scale)))
        h = max(4, int(round(self.h0 * scale)))
        w = min(w, spec.canvas - 2)
        h = min(h, spec.canvas - 2)
        # reflect off walls so the box stays fully inside the canvas
        lo_x, hi_x = w / 2.0, spec.canvas - w / 2.0
        lo_y, hi_y = h / 2.0, spec.canvas - h / 2.0
        if self.cx < lo_x:
            self.cx = 2 * lo_x - self.cx
            self.vx = abs(self.vx)
        elif self.cx > hi_x:
            self.cx = 2 * hi_x - self.cx
            self.vx = -abs(self.vx)
        if self.cy < lo_y:
            self.cy = 2 * lo_y - self.cy
            self.vy = abs(self.vy)
        elif self.cy > hi_y:
            self.cy = 2 * hi_y - self.cy
            self.vy = -abs(self.vy)
        self.cx = float(np.clip(self.cx, lo_x, hi_x))
        self.cy = float(np.clip(self.cy, lo_y, hi_y))
        x = int(round(self.cx - w / 2.0))
        y = int(round(self.cy - h / 2.0))
        x = max(0, min(x, spec.canvas - w))
        y = max(0, min(y, spec.canvas - h))
        return x, y, w, h

    def paint(self, img, spec, box, t):
        x, y, w, h = box
        hue = self.hue0 + spec.hue_drift * t
        color = _hsv_u8(hue, 0.8, 0.9)
        tex = _nearest_resize(self.tex, h, w)
        patch = np.clip(tex[:, :, None] * color[None, None, :], 0, 255).astype(np.uint8)
        mask = _shape_mask(spec.shape, h, w)
        region = img[y : y + h, x : x + w]
        region[mask] = patch[mask]
        return mask


def _occluded(spec, t):
    return any(a <= t < b for a, b in spec.occlusions)


def gen_sequence(spec, with_masks=False):
    """Render a scene.

    Returns (frames, boxes): uint8 (T, C, C, 3) and float64 (T, 4) pixel
    ``x y w h`` rows. With ``with_masks`` a boolean (T, C, C) array marking
    visible target pixels is appended.
    """
    rng = np.random.default_rng(spec.seed)
    bg = _background(rng, spec.canvas)
    lo = max(8, spec.canvas // 6)
    hi = max(lo + 2, spec.canvas // 3)
    if spec.base_size is not None:
        size = (int(spec.base_size[0]), int(spec.base_size[1]))
    else:
        size = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
    hue = float(rng.uniform(0, 1))
    target = _Blob(rng, spec, hue, size)
    extras = []
    for _ in range(spec.distractors):
        dsize = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
        dhue = hue + float(rng.choice([-1, 1])) * float(rng.uniform(0.08, 0.2))
        extras.append(_Blob(rng, spec, dhue, dsize))
    occ_tex = rng.uniform(0, 255, (hi * 2, hi * 2, 3)).astype(np.uint8)

    frames = np.empty((spec.frames, spec.canvas, spec.canvas, 3), dtype=np.uint8)
    boxes = np.empty((spec.frames, 4), dtype=np.float64)
    masks = np.zeros((spec.frames, spec.canvas, spec.canvas), dtype=bool) if with_masks else None
    for t in range(spec.frames):
        img = bg.copy()
        for blob in extras:
            blob.paint(img, spec, blob.step(rng, spec, t), t)
        box = target.step(rng, spec, t)
        tmask = target.paint(img, spec, box, t)
        x, y, w, h = box
        if with_masks:
            masks[t, y : y + h, x : x + w] = tmask
        if _occluded(spec, t):
            # opaque patch over the whole padded target box
            ow, oh = int(np.ceil(w * 1.2)), int(np.ceil(h * 1.2))
            ox = max(0, min(x - (ow - w) // 2, spec.canvas - ow))
            oy = max(0, min(y - (oh - h) // 2, spec.canvas - oh))
            img[oy : oy + oh, ox : ox + ow] = occ_tex[:oh, :ow]
            if with_masks:
                masks[t, oy : oy + oh, ox : ox + ow] = False
        frames[t] = img
        boxes[t] = (x, y, w, h)
    if with_masks:
        return frames, boxes, masks
    return frames, boxes


def mask_box_iou(mask, box):
    """IoU between a boolean pixel mask and a pixel box treated as a region."""
    h, wd = mask.shape
    x, y, w, bh = box
    region = np.zeros_like(mask)
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = int(round(x + w)), int(round(y + bh))
    region[max(0, y0) : min(h, y1), max(0, x0) : min(wd, x1)] = True
    inter = np.logical_and(mask, region).sum()
    union = np.logical_or(mask, region).sum()
    return float(inter) / float(union) if union else 0.0


def export_sequence(out_dir, frames, boxes):
    """Write frame_%05d.png files plus annotations.txt (frame_index x y w h)."""
    os.makedirs(out_dir, exist_ok=True)
    if len(frames) != len(boxes):
        raise DimensionError(f"{len(frames)} frames vs {len(boxes)} boxes")
    for t, frame in enumerate(frames):
        save_png(os.path.join(out_dir, f"frame_{t:05d}.png"), frame)
    lines = [
        f"{t} {b[0]:.4f} {b[1]:.4f} {b[2]:.4f} {b[3]:.4f}"
        for t, b in enumerate(np.asarray(boxes, dtype=np.float64))
    ]
    path = os.path.join(out_dir, "annotations.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_annotations(path):
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split()
            if len(parts) != 5:
                raise ConfigurationError(f"bad annotation line: {raw!r}")
            idx = int(parts[0])
            if idx != len(boxes):
                raise ConfigurationError(f"non-contiguous frame index {idx}")
            boxes.append([float(v) for v in parts[1:]])
    if not boxes:
        raise ConfigurationError(f"no annotations in {path}")
    return np.asarray(boxes, dtype=np.float64)


def load_sequence(seq_dir):
    """Inverse of export_sequence: (frames uint8, boxes float64)."""
    boxes = load_annotations(os.path.join(seq_dir, "annotations.txt"))
    frames = []
    for t in range(len(boxes)):
        frames.append(load_png(os.path.join(seq_dir, f"frame_{t:05d}.png")))
    return np.stack(frames), boxes


class TrackMetrics(NamedTuple):
    mean_iou: float
    success_auc: float
    precision: float


def _xywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]], axis=1)


def eval_metrics(pred_boxes, gt_boxes, canvas):
    """Pixel xywh predictions vs ground truth -> TrackMetrics.

    Success AUC averages, over 21 thresholds tau in 0..1 step 0.05, the
    fraction of frames whose IoU clears tau; frames with zero IoU never
    count, so a perfect tracker scores 1 and a disjoint one scores 0.
    Precision is the fraction of frames with center error under 20 px,
    scaled by canvas / 128 for other canvas sizes.
    """
    pred = np.asarray(pred_boxes, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise DimensionError(f"metrics shapes: pred {pred.shape} vs gt {gt.shape}")
    pa = _xywh_to_xyxy(pred)
    ga = _xywh_to_xyxy(gt)
    ious = np.array([iou_xyxy(pa[i], ga[i]) for i in range(len(pa))])
    taus = np.arange(21, dtype=np.float64) * 0.05
    hit = (ious[:, None] >= taus[None, :]) & (ious[:, None] > 0.0)
    auc = float(hit.mean(axis=0).mean())
    pc = pred[:, :2] + pred[:, 2:] / 2.0
    gc = gt[:, :2] + gt[:, 2:] / 2.0
    err = np.sqrt(((pc - gc) ** 2).sum(axis=1))
    prec = float((err < 20.0 * canvas / 128.0).mean())
    return TrackMetrics(float(ious.mean()), auc, prec)


def standard_scenes(count, seed, frames=48, canvas=128):
    """A varied batch of scene specs for training or evaluation."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        occ = ()
        if i % 4 == 3 and frames >= 24:
            a = int(rng.integers(frames // 3, frames // 2))
            occ = ((a, min(frames - 4, a + frames // 6)),)
        specs.append(
            SceneSpec(
                seed=int(rng.integers(0, 2**31 - 1)),
                frames=frames,
                canvas=canvas,
                shape=SHAPES[i % 2],
                hue_drift=float(rng.uniform(0, 0.004)) if i % 3 else 0.0,
                scale_drift=float(rng.uniform(-0.002, 0.002)) if i % 3 == 1 else 0.0,
                speed=float(rng.uniform(1.0, 3.0)),
                motion_noise=float(rng.uniform(0.1, 0.5)),
                distractors=int(rng.integers(0, 3)),
                occlusions=occ,
            )
        )
    return specs
