"""Training objectives.

Reduction convention everywhere: sum over a sample's elements, mean over the
batch (and over frames, applied by the caller). Nothing is normalized by
element count inside a sample.

* state loss: squared error between predicted and true token pairs
* reconstruction loss: squared error between predicted and true feature maps
* state-supervision loss: 0.5 * state + 1.0 * reconstruction
* classification: center-point focal loss against a unit-peak Gaussian target
* box size: L1 at the ground-truth cell, and a GIoU term for the box decoded
  at that cell (cell-center position + predicted size)
* total = cls + 2 * iou + 5 * l1 + 4 * state-supervision
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DimensionError
from .numerics import Tensor, functional as F

ALPHA_STATE = 0.5
BETA_RECON = 1.0
LAMBDA_IOU = 2.0
LAMBDA_L1 = 5.0
LAMBDA_SSM = 4.0
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
CLS_CLAMP = 1e-4


@dataclass
class LossReport:
    cls: float
    iou: float
    l1: float
    state: float
    recon: float
    ssm: float
    total: float

    def line(self, step=None):
        head = f"step={step} " if step is not None else ""
        return (
            f"{head}total={self.total:.6f} cls={self.cls:.6f} iou={self.iou:.6f} "
            f"l1={self.l1:.6f} state={self.state:.6f} recon={self.recon:.6f} "
            f"ssm={self.ssm:.6f} lambda_iou={LAMBDA_IOU:g} lambda_l1={LAMBDA_L1:g} "
            f"lambda_ssm={LAMBDA_SSM:g} alpha={ALPHA_STATE:g} beta={BETA_RECON:g}"
        )


def _sum_elems_mean_batch(sq):
    """(B, ...) -> scalar: sum per sample, mean over batch."""
    axes = tuple(range(1, sq.ndim))
    return F.mean(F.sum(sq, axis=axes))


def state_loss(s_true, c_true, s_hat, c_hat):
    if s_true.shape != s_hat.shape or c_true.shape != c_hat.shape:
        raise DimensionError(
            f"state_loss shapes: {s_true.shape}/{s_hat.shape}, {c_true.shape}/{c_hat.shape}"
        )
    ds = F.sub(s_true, s_hat)
    dc = F.sub(c_true, c_hat)
    per = F.add(F.sum(F.mul(ds, ds), axis=1), F.sum(F.mul(dc, dc), axis=1))
    return F.mean(per)


def recon_loss(f_true, f_hat):
    if f_true.shape != f_hat.shape:
        raise DimensionError(f"recon_loss shapes: {f_true.shape} vs {f_hat.shape}")
    d = F.sub(f_true, f_hat)
    return _sum_elems_mean_batch(F.mul(d, d))


def ssm_loss(l_state, l_recon):
    # both operands are sums of squares; a negative value means a broken caller
    if float(l_state.data) < 0.0 or float(l_recon.data) < 0.0:
        raise ContractViolation("state-supervision terms must be non-negative")
    return F.add(F.scale(l_state, ALPHA_STATE), F.scale(l_recon, BETA_RECON))


def peak_cells(boxes, grid_h, grid_w):
    """Integer (rows, cols) of the gt centers on the score grid."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cols = np.clip(np.floor(boxes[:, 0] * grid_w), 0, grid_w - 1).astype(np.int64)
    rows = np.clip(np.floor(boxes[:, 1] * grid_h), 0, grid_h - 1).astype(np.int64)
    return rows, cols


def gaussian_target(boxes, grid_h, grid_w):
    """Unit-peak Gaussian heatmaps (B, 1, H, W) centered on the gt cells.

    Standard deviations are the box extent in cells divided by 6, floored to
    keep the map well-defined for tiny boxes.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    b = boxes.shape[0]
    rows, cols = peak_cells(boxes, grid_h, grid_w)
    ys = np.arange(grid_h, dtype=np.float64)[:, None]
    xs = np.arange(grid_w, dtype=np.float64)[None, :]
    out = np.zeros((b, 1, grid_h, grid_w), dtype=np.float32)
    for i in range(b):
        sx = max(boxes[i, 2] * grid_w / 6.0, 1e-3)
        sy = max(boxes[i, 3] * grid_h / 6.0, 1e-3)
        g = np.exp(-((xs - cols[i]) ** 2 / (2 * sx * sx) + (ys - rows[i]) ** 2 / (2 * sy * sy)))
        out[i, 0] = g.astype(np.float32)
        out[i, 0, rows[i], cols[i]] = 1.0
    return out


def focal_loss(cls_map, target):
    """Center-point focal loss; normalized by the number of unit peaks."""
    if cls_map.shape != target.shape:
        raise DimensionError(f"focal_loss shapes: {cls_map.shape} vs {target.shape}")
    t = np.asarray(target, dtype=cls_map.dtype.type)
    pos = (t == 1.0).astype(cls_map.dtype.type)
    n_pos = max(float(pos.sum()), 1.0)
    neg_w = Tensor((1.0 - t) ** FOCAL_BETA * (1.0 - pos))
    pos_w = Tensor(pos)
    p = F.clamp(cls_map, CLS_CLAMP, 1.0 - CLS_CLAMP)
    one_m_p = F.addc(F.neg(p), 1.0)
    pos_term = F.mul(F.mul(F.pow_const(one_m_p, FOCAL_ALPHA), F.log(p)), pos_w)
    neg_term = F.mul(F.mul(F.pow_const(p, FOCAL_ALPHA), F.log(one_m_p)), neg_w)
    return F.scale(F.neg(F.sum(F.add(pos_term, neg_term))), 1.0 / n_pos)


def _values_at_cells(size_map, rows, cols):
    """(B, 2, H, W) Tensor -> (B, 2) Tensor of values at each sample's cell."""
    b, _, h, w = size_map.shape
    mask = np.zeros((b, 1, h, w), dtype=np.float32)
    mask[np.arange(b), 0, rows, cols] = 1.0
    return F.sum(F.mul(size_map, Tensor(mask)), axis=(2, 3))


def size_l1_loss(size_map, boxes):
    """Sum of |w - w_hat| + |h - h_hat| at the gt cell, mean over batch."""
    b, _, h, w = size_map.shape
    boxes = np.asarray(boxes, dtype=np.float64)
    rows, cols = peak_cells(boxes, h, w)
    pred = _values_at_cells(size_map, rows, cols)
    gt = Tensor(boxes[:, 2:4].astype(np.float32))
    return F.mean(F.sum(F.abs_(F.sub(pred, gt)), axis=1))


def giou_loss(size_map, boxes):
    """1 - GIoU between gt and the box decoded at the gt cell, mean over batch."""
    b, _, h, w = size_map.shape
    boxes = np.asarray(boxes, dtype=np.float64)
    rows, cols = peak_cells(boxes, h, w)
    pred_wh = _values_at_cells(size_map, rows, cols)  # (B, 2)
    cxp = Tensor(((cols + 0.5) / w).astype(np.float32))
    cyp = Tensor(((rows + 0.5) / h).astype(np.float32))
    wp = F.reshape(F.narrow(pred_wh, 1, 0, 1), (b,))
    hp = F.reshape(F.narrow(pred_wh, 1, 1, 1), (b,))
    px1 = F.sub(cxp, F.scale(wp, 0.5))
    px2 = F.add(cxp, F.scale(wp, 0.5))
    py1 = F.sub(cyp, F.scale(hp, 0.5))
    py2 = F.add(cyp, F.scale(hp, 0.5))
    gx1 = Tensor((boxes[:, 0] - boxes[:, 2] / 2).astype(np.float32))
    gx2 = Tensor((boxes[:, 0] + boxes[:, 2] / 2).astype(np.float32))
    gy1 = Tensor((boxes[:, 1] - boxes[:, 3] / 2).astype(np.float32))
    gy2 = Tensor((boxes[:, 1] + boxes[:, 3] / 2).astype(np.float32))
    iw = F.clamp(F.sub(F.minimum(px2, gx2), F.maximum(px1, gx1)), lo=0.0)
    ih = F.clamp(F.sub(F.minimum(py2, gy2), F.maximum(py1, gy1)), lo=0.0)
    inter = F.mul(iw, ih)
    area_p = F.mul(wp, hp)
    area_g = Tensor((boxes[:, 2] * boxes[:, 3]).astype(np.float32))
    union = F.sub(F.add(area_p, area_g), inter)
    iou = F.div(inter, union)
    hull = F.mul(
        F.sub(F.maximum(px2, gx2), F.minimum(px1, gx1)),
        F.sub(F.maximum(py2, gy2), F.minimum(py1, gy1)),
    )
    giou = F.sub(iou, F.div(F.sub(hull, union), hull))
    return F.mean(F.addc(F.neg(giou), 1.0))


def track_loss(head, boxes):
    """HeadOutput + gt boxes (B, 4 normalized cxcywh) -> (cls, iou, l1) tensors."""
    target = gaussian_target(boxes, head.cls_map.shape[2], head.cls_map.shape[3])
    l_cls = focal_loss(head.cls_map, target)
    l_iou = giou_loss(head.size_map, boxes)
    l_l1 = size_l1_loss(head.size_map, boxes)
    return l_cls, l_iou, l_l1


def total_loss(l_cls, l_iou, l_l1, l_ssm):
    out = F.add(l_cls, F.scale(l_iou, LAMBDA_IOU))
    out = F.add(out, F.scale(l_l1, LAMBDA_L1))
    return F.add(out, F.scale(l_ssm, LAMBDA_SSM))


# -- numpy box helpers (shared by the metrics tests) -------------------------

def iou_xyxy(a, b):
    """IoU of two (x1, y1, x2, y2) boxes, plain floats."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def giou_xyxy(a, b):
    """GIoU of two (x1, y1, x2, y2) boxes, plain floats."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    iou = inter / ua if ua > 0 else 0.0
    hw = max(a[2], b[2]) - min(a[0], b[0])
    hh = max(a[3], b[3]) - min(a[1], b[1])
    hull = hw * hh
    return iou - (hull - ua) / hull if hull > 0 else iou
