"""Training and inference orchestration.

Training processes batches of (template, 4 ordered search frames) samples.
For every search frame the model first predicts the current state tokens from
a per-sample history holding only compressed true-state tokens of earlier
frames, reconstructs the predicted target feature, decodes, and accumulates
tracking plus state-supervision losses; true tokens come from a frozen
encoder snapshot so the supervision target cannot chase itself.

Inference keeps a persistent history per sequence. Each frame runs
reasoning (bidirectional on every interval-th frame), reconstruction,
decoding, then maintains the history: low confidence stores the initial
pair, and otherwise frames alternate between compressing a crop at the
predicted box and storing the inferred tokens, per the configured parity.
"""

from dataclasses import dataclass

import numpy as np

from .decoder_head import PredictionHead, TemporalDecoder, decode_box
from .encoder import JointEncoder
from .errors import ConfigurationError, ContractViolation, DimensionError
from .imaging import bilinear_resize, crop_resize, to_model_image
from .losses import (
    LossReport,
    recon_loss,
    ssm_loss,
    state_loss,
    total_loss,
    track_loss,
)
from .numerics import Tensor, functional as F
from .numerics.module import Module
from .numerics.optim import AdamW, clip_grad_norm
from .reasoning import HistoryBuffer, StateReasoner, history_tensors
from .state_codec import StateCodec, StateTokenPair

PARITIES = ("even", "odd", "compress", "infer")
MIN_BOX_PX = 2.0


@dataclass(frozen=True)
class TrackConfig:
    """Inference policy knobs."""

    threshold: float = 0.4
    interval: int = 60
    window: int = 500
    parity: str = "even"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must be in [0,1], got {self.threshold}")
        if self.interval < 1:
            raise ConfigurationError(f"interval must be >= 1, got {self.interval}")
        if self.window < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.window}")
        if self.parity not in PARITIES:
            raise ConfigurationError(f"parity must be one of {PARITIES}, got {self.parity!r}")


@dataclass(frozen=True)
class AblationMask:
    """True removes the component. ssm_loss only affects training."""

    reasoning: bool = False
    decoder: bool = False
    recon: bool = False
    ssm_loss: bool = False

    @property
    def use_predicted(self):
        return not (self.reasoning or self.recon)


ABLATION_PRESETS = {
    "none": AblationMask(),
    "no-reasoning": AblationMask(reasoning=True),
    "no-decoder": AblationMask(decoder=True),
    "no-recon": AblationMask(recon=True),
    "no-ssm-loss": AblationMask(ssm_loss=True),
    "baseline": AblationMask(reasoning=True, decoder=True, recon=True, ssm_loss=True),
}


def ablation_mask(name):
    try:
        return ABLATION_PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown ablation {name!r}; choose from {', '.join(sorted(ABLATION_PRESETS))}"
        )


@dataclass
class TrainSample:
    """One template frame plus temporally ordered search frames, same video."""

    template_frame: np.ndarray
    template_box: np.ndarray
    search_frames: list
    search_boxes: list

    def __post_init__(self):
        if len(self.search_frames) != len(self.search_boxes) or not self.search_frames:
            raise DimensionError("search frames and boxes must align and be non-empty")


@dataclass(frozen=True)
class TrackResult:
    """Per-frame prediction, normalized center/size plus confidence."""

    frame_index: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float

    def to_line(self):
        return (
            f"{self.frame_index} {self.cx:.6f} {self.cy:.6f} "
            f"{self.w:.6f} {self.h:.6f} {self.confidence:.6f}"
        )

    @staticmethod
    def parse(line):
        parts = line.split()
        if len(parts) != 6:
            raise ConfigurationError(f"bad result line: {line!r}")
        return TrackResult(int(parts[0]), *(float(v) for v in parts[1:]))

    def to_pixel_box(self, canvas_w, canvas_h):
        """(x, y, w, h) in pixels."""
        return (
            (self.cx - self.w / 2.0) * canvas_w,
            (self.cy - self.h / 2.0) * canvas_h,
            self.w * canvas_w,
            self.h * canvas_h,
        )


class TrackerModel(Module):
    """Encoder, state codec, reasoner, temporal decoder, and head."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = dict(cfg)
        self.mask = AblationMask()
        dim = cfg["dim"]
        self.encoder = JointEncoder(
            dim,
            cfg["heads"],
            cfg["encoder_layers"],
            cfg["template_size"],
            cfg["search_size"],
            rng,
        )
        spatial_dim = 2 * (cfg["template_size"] // 16)
        self.codec = StateCodec(dim, rng, spatial_len=spatial_dim)
        self.reasoner = StateReasoner(
            spatial_dim, dim, rng, state_n=cfg["ssm_state"], layers=cfg["ssm_layers"]
        )
        self.decoder = TemporalDecoder(dim, cfg["heads"], cfg["decoder_layers"], rng)
        self.head = PredictionHead(dim, rng)


def build_model(cfg, seed=None):
    rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
    return TrackerModel(cfg, rng)


def ablate(model, mask):
    """A variant sharing the model's parameters with components masked off."""
    variant = TrackerModel.__new__(TrackerModel)
    Module.__init__(variant)
    variant.cfg = dict(model.cfg)
    variant.mask = mask
    variant.encoder = model.encoder
    variant.codec = model.codec
    variant.reasoner = model.reasoner
    variant.decoder = model.decoder
    variant.head = model.head
    return variant


def _prep_search(frame, search_size):
    """uint8 frame -> (3, S, S) float input, resizing when the canvas differs."""
    h, w = frame.shape[:2]
    if (h, w) == (search_size, search_size):
        return to_model_image(frame)
    resized = bilinear_resize(frame.astype(np.float32), search_size, search_size)
    return np.ascontiguousarray(resized.transpose(2, 0, 1)) / 255.0


def _boxes_to_norm(boxes_px, canvas_w, canvas_h):
    """Pixel xywh rows -> normalized cxcywh rows."""
    b = np.asarray(boxes_px, dtype=np.float64)
    return np.stack(
        [
            (b[:, 0] + b[:, 2] / 2.0) / canvas_w,
            (b[:, 1] + b[:, 3] / 2.0) / canvas_h,
            b[:, 2] / canvas_w,
            b[:, 3] / canvas_h,
        ],
        axis=1,
    )


def _refine(model, f_x, f_z, f_pred):
    """Decoder refinement, or per-channel correlation when it is masked off."""
    if model.mask.decoder:
        kernel = f_pred if f_pred is not None else f_z
        return F.depthwise_xcorr(f_x, kernel)
    refs = [f_pred, f_z] if f_pred is not None else [f_z]
    return model.decoder(f_x, refs)


def draw_samples(dataset, rng, batch_size, frames_per_sample):
    """Random TrainSamples from a list of (frames, boxes) sequences."""
    samples = []
    for _ in range(batch_size):
        frames, boxes = dataset[int(rng.integers(len(dataset)))]
        if len(frames) <= frames_per_sample:
            raise ConfigurationError("sequence too short for the sampling plan")
        t0 = int(rng.integers(0, len(frames) - frames_per_sample))
        later = np.arange(t0 + 1, len(frames))
        picks = np.sort(rng.choice(later, size=frames_per_sample, replace=False))
        samples.append(
            TrainSample(
                template_frame=frames[t0],
                template_box=boxes[t0],
                search_frames=[frames[int(t)] for t in picks],
                search_boxes=[boxes[int(t)] for t in picks],
            )
        )
    return samples


class Trainer:
    """Owns the optimizer, the frozen encoder snapshot, and the step loop."""

    def __init__(self, model, cfg, log=None):
        self.model = model
        self.cfg = dict(cfg)
        self.log = log if log is not None else (lambda line: None)
        rng = np.random.default_rng(0)
        self.frozen = JointEncoder(
            cfg["dim"],
            cfg["heads"],
            cfg["encoder_layers"],
            cfg["template_size"],
            cfg["search_size"],
            rng,
        )
        self.refresh_snapshot()
        enc_ids = {id(p) for p in model.encoder.parameters()}
        rest = [p for p in model.parameters() if id(p) not in enc_ids]
        self.opt = AdamW(
            [
                {"params": model.encoder.parameters(), "lr": cfg["encoder_lr"]},
                {"params": rest, "lr": cfg["lr"]},
            ],
            weight_decay=cfg["weight_decay"],
        )
        self.step_count = 0
        self.decay_step = int(round(cfg["steps"] * cfg["decay_at"]))

    def refresh_snapshot(self):
        self.frozen.copy_from(self.model.encoder)
        self.frozen.set_requires_grad(False)

    def _filter_degenerate(self, batch):
        keep = []
        for i, sample in enumerate(batch):
            boxes = [sample.template_box] + list(sample.search_boxes)
            if any(b[2] < MIN_BOX_PX or b[3] < MIN_BOX_PX for b in boxes):
                self.log(f"skip sample={i} reason=degenerate_box")
                continue
            keep.append(sample)
        if not keep:
            raise ContractViolation("every sample in the batch had a degenerate box")
        return keep

    def train_step(self, batch):
        """One optimizer step over a batch of TrainSamples; returns a LossReport."""
        cfg, mask = self.cfg, self.model.mask
        tsize, ctx = cfg["template_size"], cfg["crop_context"]
        batch = self._filter_degenerate(batch)
        n_frames = len(batch[0].search_frames)
        if any(len(s.search_frames) != n_frames for s in batch):
            raise DimensionError("samples must share the search-frame count")
        canvas_h, canvas_w = batch[0].template_frame.shape[:2]

        z_imgs = np.stack(
            [crop_resize(s.template_frame, s.template_box, ctx, tsize)[0] for s in batch]
        )
        z_in = Tensor(z_imgs)
        # history starts with the compressed template state (frozen branch)
        f0 = self.frozen.encode_crop_pair(z_in, Tensor(z_imgs.copy()))
        s0, c0 = self.model.codec.compress(f0)
        hist_s, hist_c = [s0.data.copy()], [c0.data.copy()]
        push_sources = ["compressed"]

        terms = []
        acc = {"cls": 0.0, "iou": 0.0, "l1": 0.0, "state": 0.0, "recon": 0.0, "ssm": 0.0}
        for k in range(n_frames):
            x_imgs = np.stack(
                [_prep_search(s.search_frames[k], cfg["search_size"]) for s in batch]
            )
            gt_px = np.stack([np.asarray(s.search_boxes[k], float) for s in batch])
            gt_norm = _boxes_to_norm(gt_px, canvas_w, canvas_h)
            f_z, f_x = self.model.encoder(z_in, Tensor(x_imgs))

            crops = np.stack(
                [crop_resize(s.search_frames[k], s.search_boxes[k], ctx, tsize)[0] for s in batch]
            )
            f_true = self.frozen.encode_crop_pair(z_in, Tensor(crops))
            s_true, c_true = self.model.codec.compress(f_true)

            s_hat = c_hat = f_pred = None
            if not mask.reasoning:
                seq_s = Tensor(np.stack(hist_s, axis=1))
                seq_c = Tensor(np.stack(hist_c, axis=1))
                # the appended init query is the live learned token, so it trains
                s_init, c_init = self.model.codec.init_tokens()
                init_s = F.broadcast_to(s_init, (len(batch), s_init.shape[1]))
                init_c = F.broadcast_to(c_init, (len(batch), c_init.shape[1]))
                s_hat, c_hat = self.model.reasoner.reason(seq_s, seq_c, init_s, init_c)
                if not mask.recon:
                    f_pred = self.model.codec.reconstruct(s_hat, c_hat, f_z)

            head = self.model.head(_refine(self.model, f_x, f_z, f_pred))
            l_cls, l_iou, l_l1 = track_loss(head, gt_norm)
            if mask.ssm_loss or s_hat is None:
                l_ssm = Tensor(0.0)
            else:
                l_state = state_loss(s_true, c_true, s_hat, c_hat)
                l_recon = recon_loss(f_true, f_pred) if f_pred is not None else Tensor(0.0)
                l_ssm = ssm_loss(l_state, l_recon)
                acc["state"] += float(l_state.data)
                acc["recon"] += float(l_recon.data)
            l_tot = total_loss(l_cls, l_iou, l_l1, l_ssm)
            terms.append(l_tot)
            acc["cls"] += float(l_cls.data)
            acc["iou"] += float(l_iou.data)
            acc["l1"] += float(l_l1.data)
            acc["ssm"] += float(l_ssm.data)

            hist_s.append(s_true.data.copy())
            hist_c.append(c_true.data.copy())
            push_sources.append("compressed")

        assert all(src == "compressed" for src in push_sources)
        loss = terms[0]
        for t in terms[1:]:
            loss = F.add(loss, t)
        loss = F.scale(loss, 1.0 / n_frames)

        self.opt.zero_grad()
        loss.backward()
        clip_grad_norm(self.model.parameters(), cfg["max_grad_norm"])
        if cfg["steps"] > 0 and self.step_count >= self.decay_step:
            self.opt.lr_scale = cfg["decay_factor"]
        self.opt.step()
        self.step_count += 1
        if cfg["snapshot_every"] > 0 and self.step_count % cfg["snapshot_every"] == 0:
            self.refresh_snapshot()

        mean = {key: val / n_frames for key, val in acc.items()}
        return LossReport(
            cls=mean["cls"],
            iou=mean["iou"],
            l1=mean["l1"],
            state=mean["state"],
            recon=mean["recon"],
            ssm=mean["ssm"],
            total=float(loss.data),
        )


def _compress_turn(parity, t):
    if parity == "compress":
        return True
    if parity == "infer":
        return False
    return t % 2 == (0 if parity == "even" else 1)


def track_sequence(model, frames, init_box_px, tcfg, trace=None):
    """Track one sequence; returns a TrackResult per frame.

    frames are uint8 (H, W, 3); init_box_px is the frame-0 pixel box. Pass a
    list as ``trace`` to capture one policy line per frame. Deterministic for
    fixed weights, frames, and config.
    """
    if len(frames) == 0:
        raise DimensionError("cannot track an empty frame list")
    cfg, mask = model.cfg, model.mask
    tsize, ctx = cfg["template_size"], cfg["crop_context"]
    canvas_h, canvas_w = frames[0].shape[:2]

    z_arr, _ = crop_resize(frames[0], init_box_px, ctx, tsize)
    z_in = Tensor(z_arr[None])
    use_history = not mask.reasoning
    psi = HistoryBuffer(tcfg.window)
    if use_history:
        f0 = model.encoder.encode_crop_pair(z_in, Tensor(z_arr[None].copy()))
        psi.push(model.codec.compress_to_pair(f0, frame_index=0, source="compressed"))

    x0, y0, w0, h0 = (float(v) for v in init_box_px)
    results = [
        TrackResult(
            0,
            (x0 + w0 / 2.0) / canvas_w,
            (y0 + h0 / 2.0) / canvas_h,
            w0 / canvas_w,
            h0 / canvas_h,
            1.0,
        )
    ]
    for t in range(1, len(frames)):
        x_in = Tensor(_prep_search(frames[t], cfg["search_size"])[None])
        f_z, f_x = model.encoder(z_in, x_in)
        s_hat = c_hat = f_pred = None
        mode = "off"
        if use_history:
            seq_s, seq_c = history_tensors(psi)
            init_s, init_c = model.codec.init_tokens()
            if t % tcfg.interval == 0:
                s_hat, c_hat = model.reasoner.bidirectional_reason(seq_s, seq_c, init_s, init_c)
                mode = "bidirectional"
            else:
                s_hat, c_hat = model.reasoner.reason(seq_s, seq_c, init_s, init_c)
                mode = "reason"
            if not mask.recon:
                f_pred = model.codec.reconstruct(s_hat, c_hat, f_z)

        head = model.head(_refine(model, f_x, f_z, f_pred))
        box, conf = decode_box(head.cls_map.data[0, 0], head.size_map.data[0])
        results.append(TrackResult(t, box.cx, box.cy, box.w, box.h, conf))

        action = "off"
        if use_history:
            box_px = box.to_pixels(canvas_w, canvas_h)
            degenerate = box_px[2] < 1.0 or box_px[3] < 1.0
            gating_conf = 0.0 if degenerate else conf
            if gating_conf < tcfg.threshold:
                psi.push(model.codec.init_pair(t))
                action = "gate"
            elif _compress_turn(tcfg.parity, t):
                crop, clipped = crop_resize(frames[t], box_px, ctx, tsize)
                f_c = model.encoder.encode_crop_pair(z_in, Tensor(crop[None]))
                psi.push(model.codec.compress_to_pair(f_c, frame_index=t, source="compressed"))
                action = "compress_clipped" if clipped else "compress"
            else:
                psi.push(
                    StateTokenPair(
                        spatial=s_hat.data[0].copy(),
                        channel=c_hat.data[0].copy(),
                        frame_index=t,
                        source="inferred",
                    )
                )
                action = "infer"
        if trace is not None:
            trace.append(f"frame={t} mode={mode} conf={conf:.4f} action={action}")
    return results


def results_to_pixel_boxes(results, canvas_w, canvas_h):
    return np.array([r.to_pixel_box(canvas_w, canvas_h) for r in results], dtype=np.float64)
