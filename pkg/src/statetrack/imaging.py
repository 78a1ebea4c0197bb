"""Image plumbing: crops, bilinear resize, PNG IO, box overlays.

Frames are (H, W, 3) uint8 throughout; model inputs are (3, S, S) float32 in
[0, 1]. Nothing here is differentiable (crops feed the frozen branch only).
"""

import numpy as np

from .errors import DimensionError


def to_model_image(frame):
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DimensionError(f"expected (H,W,3) frame, got {frame.shape}")
    return np.ascontiguousarray(frame.transpose(2, 0, 1)).astype(np.float32) / 255.0


def bilinear_resize(img, out_h, out_w):
    """Resize (H, W, C) float array with bilinear sampling at pixel centers."""
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return top * (1 - wy) + bot * wy


def crop_resize(frame, box_px, context, out_size):
    """Square context crop around a pixel box, resized to out_size.

    box_px is (x, y, w, h) in pixels. The crop side is context * sqrt(w*h),
    clipped to the frame bounds. Returns ((3, out, out) float32, clipped flag).
    """
    h, w = frame.shape[:2]
    x, y, bw, bh = [float(v) for v in box_px]
    cx, cy = x + bw / 2.0, y + bh / 2.0
    side = max(context * np.sqrt(max(bw, 1e-6) * max(bh, 1e-6)), 2.0)
    x0, x1 = cx - side / 2.0, cx + side / 2.0
    y0, y1 = cy - side / 2.0, cy + side / 2.0
    clipped = x0 < 0 or y0 < 0 or x1 > w or y1 > h
    x0c, x1c = max(0.0, x0), min(float(w), x1)
    y0c, y1c = max(0.0, y0), min(float(h), y1)
    ix0, ix1 = int(np.floor(x0c)), max(int(np.ceil(x1c)), int(np.floor(x0c)) + 1)
    iy0, iy1 = int(np.floor(y0c)), max(int(np.ceil(y1c)), int(np.floor(y0c)) + 1)
    patch = frame[iy0:iy1, ix0:ix1].astype(np.float32)
    out = bilinear_resize(patch, out_size, out_size)
    return np.ascontiguousarray(out.transpose(2, 0, 1)) / 255.0, clipped


def draw_box(frame, box_px, color=(255, 64, 64), thickness=1):
    """Return a copy of the frame with a rectangle outline drawn on it."""
    out = frame.copy()
    h, w = out.shape[:2]
    x, y, bw, bh = [int(round(float(v))) for v in box_px]
    x2, y2 = x + bw, y + bh
    col = np.array(color, dtype=np.uint8)
    for t in range(thickness):
        xt, yt, x2t, y2t = x + t, y + t, x2 - t, y2 - t
        if yt in range(h):
            out[yt, max(xt, 0) : min(x2t + 1, w)] = col
        if y2t in range(h):
            out[y2t, max(xt, 0) : min(x2t + 1, w)] = col
        if xt in range(w):
            out[max(yt, 0) : min(y2t + 1, h), xt] = col
        if x2t in range(w):
            out[max(yt, 0) : min(y2t + 1, h), x2t] = col
    return out


def save_png(path, frame):
    from PIL import Image

    Image.fromarray(frame).save(path)


def load_png(path):
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"))
