"""Per-module gradient verification on a float64 micro model.

Each probe builds a scalar loss through one module (plus one composite probe
through the whole training objective) and compares analytic gradients against
central finite differences. The suite is the substance behind the
``gradcheck`` subcommand; ``corrupt`` injects a deliberate forward/backward
inconsistency into one probe to prove the harness can fail.
"""

import numpy as np

from .config import DEFAULTS, apply_overrides
from .losses import recon_loss, ssm_loss, state_loss, total_loss, track_loss
from .numerics import Tensor, functional as F
from .numerics.gradcheck import check_gradients
from .trackpipe import build_model

TOLERANCE = 1e-3

MICRO_OVERRIDES = {
    "dim": 16,
    "heads": 2,
    "encoder_layers": 2,
    "decoder_layers": 1,
    "ssm_layers": 2,
    "ssm_state": 4,
    "template_size": 32,
    "search_size": 64,
    "canvas": 64,
    "batch_size": 2,
    "frames_per_sample": 2,
    "steps": 4,
    "train_sequences": 2,
    "seq_frames": 8,
    "snapshot_every": 2,
}


def micro_config():
    return apply_overrides(dict(DEFAULTS), dict(MICRO_OVERRIDES))


def micro_model(seed=0):
    """Micro-config model with every parameter promoted to float64."""
    cfg = micro_config()
    model = build_model(cfg, seed=seed)
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
    return model, cfg


def _t64(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def _probe_numerics(model, cfg, rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)

    def build():
        z = F.matmul(a, b)
        mix = F.add(F.softmax(z, -1), F.gelu(z))
        loss = F.sum(F.mul(mix, F.sigmoid(z)))
        return F.add(loss, F.mean(F.matmul(b, a)))

    return build, [("a", a), ("b", b)]


def _probe_encoder(model, cfg, rng):
    z = _t64(rng, (1, 3, cfg["template_size"], cfg["template_size"]), 0.5)
    x = _t64(rng, (1, 3, cfg["search_size"], cfg["search_size"]), 0.5)

    def build():
        f_z, f_x = model.encoder(z, x)
        return F.add(F.sum(F.mul(f_z, f_z)), F.mean(f_x))

    return build, list(model.encoder.named_parameters("encoder."))


def _probe_state_codec(model, cfg, rng):
    f = _t64(rng, (1, cfg["dim"], 8, 8), 0.5)
    f_z = _t64(rng, (1, cfg["dim"], 8, 8), 0.5)

    def build():
        s, c = model.codec.compress(f)
        pred = model.codec.reconstruct(s, c, f_z)
        return F.add(F.sum(F.mul(pred, pred)), F.add(F.sum(s), F.sum(c)))

    # the init tokens only flow through the reasoning probe's query position
    params = [(n, p) for n, p in model.codec.named_parameters("codec.") if "_init" not in n]
    return build, params


def _probe_reasoning(model, cfg, rng):
    ws = 2 * (cfg["template_size"] // 16)
    seq_s = Tensor(rng.uniform(0.1, 0.9, (1, 2, ws)))
    seq_c = Tensor(rng.uniform(0.1, 0.9, (1, 2, cfg["dim"])))

    def build():
        init_s, init_c = model.codec.init_tokens()
        s_hat, c_hat = model.reasoner.reason(seq_s, seq_c, init_s, init_c)
        return F.add(F.sum(F.mul(s_hat, s_hat)), F.sum(c_hat))

    params = list(model.reasoner.named_parameters("reasoner."))
    params += [("codec.s_init", model.codec.s_init), ("codec.c_init", model.codec.c_init)]
    return build, params


def _probe_decoder_head(model, cfg, rng):
    side_x = cfg["search_size"] // 16
    side_z = cfg["template_size"] // 16
    f_x = _t64(rng, (1, cfg["dim"], side_x, side_x), 0.5)
    f_z = _t64(rng, (1, cfg["dim"], side_z, side_z), 0.5)
    f_pred = _t64(rng, (1, cfg["dim"], side_z, side_z), 0.5)

    def build():
        refined = model.decoder(f_x, [f_pred, f_z])
        head = model.head(refined)
        return F.add(F.sum(head.cls_map), F.sum(F.mul(head.size_map, head.size_map)))

    params = list(model.decoder.named_parameters("decoder."))
    params += list(model.head.named_parameters("head."))
    return build, params


def _probe_composite(model, cfg, rng):
    """Full training objective on one 2-frame sample, sampled parameters."""
    tsz, ssz = cfg["template_size"], cfg["search_size"]
    z = Tensor(rng.uniform(0, 1, (1, 3, tsz, tsz)))
    xs = [Tensor(rng.uniform(0, 1, (1, 3, ssz, ssz))) for _ in range(2)]
    crops = [Tensor(rng.uniform(0, 1, (1, 3, tsz, tsz))) for _ in range(2)]
    gts = [np.array([[0.45, 0.55, 0.3, 0.4]]), np.array([[0.55, 0.45, 0.35, 0.3]])]

    frozen_maps = []
    frozen0 = model.encoder.encode_crop_pair(z, z)
    for crop in crops:
        frozen_maps.append(model.encoder.encode_crop_pair(z, crop))

    # history entries are detached during training, so the probe freezes the
    # exact values once; build() must stay a pure function of the parameters
    s0, c0 = model.codec.compress(Tensor(frozen0.data.copy()))
    hist_s, hist_c = [s0.data.copy()], [c0.data.copy()]
    for fmap in frozen_maps[:-1]:
        st, ct = model.codec.compress(Tensor(fmap.data.copy()))
        hist_s.append(st.data.copy())
        hist_c.append(ct.data.copy())

    def build():
        terms = []
        for k in range(2):
            f_z, f_x = model.encoder(z, xs[k])
            f_true = Tensor(frozen_maps[k].data.copy())
            s_true, c_true = model.codec.compress(f_true)
            seq_s = Tensor(np.stack(hist_s[: k + 1], axis=1))
            seq_c = Tensor(np.stack(hist_c[: k + 1], axis=1))
            init_s, init_c = model.codec.init_tokens()
            s_hat, c_hat = model.reasoner.reason(seq_s, seq_c, init_s, init_c)
            f_pred = model.codec.reconstruct(s_hat, c_hat, f_z)
            head = model.head(model.decoder(f_x, [f_pred, f_z]))
            l_cls, l_iou, l_l1 = track_loss(head, gts[k])
            l_ssm = ssm_loss(state_loss(s_true, c_true, s_hat, c_hat), recon_loss(f_true, f_pred))
            terms.append(total_loss(l_cls, l_iou, l_l1, l_ssm))
        return F.scale(F.add(terms[0], terms[1]), 0.5)

    wanted = [
        "encoder.embed.c1.weight",
        "encoder.pos_z",
        "encoder.layers.0.attn.q.weight",
        "encoder.layers.1.mlp.fc1.bias",
        "codec.channel.q.pw.weight",
        "codec.spatial.w_mix.0.dw",
        "codec.recon.c3.weight",
        "codec.s_init",
        "reasoner.s_stack.layers.0.A_log",
        "reasoner.c_stack.layers.1.in_proj.weight",
        "reasoner.c_stack.layers.0.out_proj.weight",
        "decoder.layers.0.cross.q.weight",
        "decoder.layers.0.back.o.weight",
        "head.cls_stack.2.weight",
        "head.size_stack.0.bias",
    ]
    all_params = dict(model.named_parameters())
    params = [(name, all_params[name]) for name in wanted]
    return build, params


PROBES = [
    ("numerics", _probe_numerics),
    ("encoder", _probe_encoder),
    ("state_codec", _probe_state_codec),
    ("reasoning", _probe_reasoning),
    ("decoder_head", _probe_decoder_head),
    ("composite", _probe_composite),
]

PROBE_NAMES = tuple(name for name, _ in PROBES)


def _with_grad_leak(build_fn, param):
    """A forward term the backward pass cannot see (intentional corruption)."""

    def build():
        leak = F.sum(F.mul(Tensor(param.data), Tensor(np.full_like(param.data, 0.05))))
        return F.add(build_fn(), leak)

    return build


def run_suite(corrupt=None, seed=0, max_per_tensor=6):
    """Returns rows of (module, worst_parameter, max_rel_error)."""
    if corrupt is not None and corrupt not in PROBE_NAMES:
        raise ValueError(f"corrupt must be one of {PROBE_NAMES}, got {corrupt!r}")
    model, cfg = micro_model(seed=seed)
    rng = np.random.default_rng(seed + 1)
    rows = []
    for name, factory in PROBES:
        build_fn, params = factory(model, cfg, rng)
        if corrupt == name:
            build_fn = _with_grad_leak(build_fn, params[0][1])
        per_tensor = 3 if name == "composite" else max_per_tensor
        report = check_gradients(build_fn, params, max_per_tensor=per_tensor, rng=rng)
        worst_name = max(report, key=report.get)
        rows.append((name, worst_name, report[worst_name]))
    return rows


def format_table(rows, tolerance=TOLERANCE):
    width = max(len(r[0]) for r in rows)
    lines = [f"{'module'.ljust(width)}  max_rel_err  worst_parameter"]
    for module, worst_name, err in rows:
        lines.append(f"{module.ljust(width)}  {err:<11.3e}  {worst_name}")
    ok = all(err < tolerance for _, _, err in rows)
    failed = [module for module, _, err in rows if err >= tolerance]
    verdict = "PASS" if ok else "FAIL " + " ".join(failed)
    lines.append(f"tolerance {tolerance:g}: {verdict}")
    return "\n".join(lines), ok
