"""State codec tests: compression oracles, gate invariants, reconstruction."""

import math

import numpy as np
import pytest

import statetrack.numerics.functional as F
from statetrack.errors import ContractViolation, DimensionError
from statetrack.numerics.tensor import Tensor
from statetrack.state_codec import (
    ChannelCompressor,
    SpatialCompressor,
    StateCodec,
    StateTokenPair,
)


def to_float64(module):
    # run the whole module in float64 so loop oracles compare at tight tolerance
    for _, p in module.named_parameters(""):
        p.data = p.data.astype(np.float64)
    return module


def randomize(module, rng, scale=0.2):
    for _, p in module.named_parameters(""):
        p.data = p.data + rng.normal(0.0, scale, p.data.shape)
    return module


def separable_mix_loops(mix, tokens):
    """(C, N) through per-channel scale then channel mix, explicit loops."""
    c, n = tokens.shape
    dw = mix.dw.data.reshape(c)
    wmat = mix.pw.weight.data  # (C_in, C_out)
    bias = mix.pw.bias.data
    scaled = np.zeros((c, n))
    for ci in range(c):
        for ni in range(n):
            scaled[ci, ni] = tokens[ci, ni] * dw[ci]
    out = np.zeros((c, n))
    for ni in range(n):
        for co in range(c):
            acc = bias[co]
            for cin in range(c):
                acc += scaled[cin, ni] * wmat[cin, co]
            out[co, ni] = acc
    return out


def channel_token_loops(comp, fmap):
    """Brute-force channel compression of one (C, H, W) map."""
    c, h, w = fmap.shape
    p = comp.pool
    if h < p or w < p:
        pooled = np.zeros((c, 1, 1))
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += fmap[ci, i, j]
            pooled[ci, 0, 0] = acc / (h * w)
    else:
        ph, pw = h // p, w // p
        pooled = np.zeros((c, ph, pw))
        for ci in range(c):
            for i in range(ph):
                for j in range(pw):
                    acc = 0.0
                    for a in range(p):
                        for b in range(p):
                            acc += fmap[ci, i * p + a, j * p + b]
                    pooled[ci, i, j] = acc / (p * p)
    # group norm with a single group: statistics over every entry
    flat = pooled.reshape(-1)
    mu = flat.mean()
    var = ((flat - mu) ** 2).mean()
    inv = 1.0 / math.sqrt(var + comp.norm.eps)
    gamma, beta = comp.norm.gamma.data, comp.norm.beta.data
    normed = np.zeros_like(pooled)
    for ci in range(c):
        normed[ci] = (pooled[ci] - mu) * inv * gamma[ci] + beta[ci]
    n = normed.shape[1] * normed.shape[2]
    tokens = normed.reshape(c, n)
    q = separable_mix_loops(comp.q, tokens)
    k = separable_mix_loops(comp.k, tokens)
    v = separable_mix_loops(comp.v, tokens)
    # pooled positions are tokens; scores contract the channel axis
    att = np.zeros((n, c))
    for i in range(n):
        scores = np.zeros(n)
        for j in range(n):
            acc = 0.0
            for ci in range(c):
                acc += q[ci, i] * k[ci, j]
            scores[j] = acc / math.sqrt(c)
        e = np.exp(scores - scores.max())
        weights = e / e.sum()
        for ci in range(c):
            acc = 0.0
            for j in range(n):
                acc += weights[j] * v[ci, j]
            att[i, ci] = acc
    tok = np.zeros(c)
    for ci in range(c):
        mean_att = att[:, ci].sum() / n
        tok[ci] = 1.0 / (1.0 + math.exp(-mean_att))
    return tok


def spatial_token_loops(comp, fmap):
    """Brute-force spatial compression: width gate first, then height gate."""
    c, h, w = fmap.shape
    g = comp.groups
    gc = c // g

    def gate(line, mixes, norm):
        n = line.shape[1]
        mixed = np.zeros((c, n))
        for gi in range(g):
            part = separable_mix_loops(mixes[gi], line[gi * gc : (gi + 1) * gc])
            mixed[gi * gc : (gi + 1) * gc] = part
        normed = np.zeros_like(mixed)
        for gi in range(g):
            block = mixed[gi * gc : (gi + 1) * gc]
            mu = block.mean()
            var = ((block - mu) ** 2).mean()
            inv = 1.0 / math.sqrt(var + norm.eps)
            for local in range(gc):
                ci = gi * gc + local
                normed[ci] = (block[local] - mu) * inv * norm.gamma.data[ci] + norm.beta.data[ci]
        out = np.zeros(n)
        for ni in range(n):
            acc = 0.0
            for ci in range(c):
                acc += normed[ci, ni]
            out[ni] = 1.0 / (1.0 + math.exp(-acc / c))
        return out

    line_w = np.zeros((c, w))
    for ci in range(c):
        for j in range(w):
            acc = 0.0
            for i in range(h):
                acc += fmap[ci, i, j]
            line_w[ci, j] = acc / h
    line_h = np.zeros((c, h))
    for ci in range(c):
        for i in range(h):
            acc = 0.0
            for j in range(w):
                acc += fmap[ci, i, j]
            line_h[ci, i] = acc / w
    w_gate = gate(line_w, comp.w_mix, comp.w_norm)
    h_gate = gate(line_h, comp.h_mix, comp.h_norm)
    return np.concatenate([w_gate, h_gate])


def test_channel_matches_brute_force_loops():
    rng = np.random.default_rng(0)
    for seed in range(4):
        comp = to_float64(ChannelCompressor(8, np.random.default_rng(seed)))
        randomize(comp, rng)
        fmap = rng.uniform(-1.0, 1.0, (1, 8, 8, 8))
        got = comp(Tensor(fmap)).data[0]
        want = channel_token_loops(comp, fmap[0])
        assert np.max(np.abs(got - want)) < 1e-6


def test_channel_small_map_falls_back_to_global_average():
    rng = np.random.default_rng(1)
    comp = to_float64(ChannelCompressor(8, np.random.default_rng(5)))
    randomize(comp, rng)
    for shape in ((1, 8, 2, 3), (1, 8, 3, 9), (1, 8, 9, 2)):
        fmap = rng.uniform(-1.0, 1.0, shape)
        got = comp(Tensor(fmap)).data[0]
        want = channel_token_loops(comp, fmap[0])
        assert got.shape == (8,)
        assert np.max(np.abs(got - want)) < 1e-6


def test_channel_constant_map_gives_identical_gates():
    comp = ChannelCompressor(16, np.random.default_rng(2))
    # a constant map normalizes to (near) zero, so every channel gets the same
    # gate; float32 mean accumulation leaves ~1e-6 residue for nonzero values
    for value in (3.7, -2.5):
        fmap = np.full((1, 16, 8, 8), value, dtype=np.float32)
        tok = comp(Tensor(fmap)).data[0]
        assert np.ptp(tok) < 2e-5
        assert np.allclose(tok, 0.5, atol=1e-4)
    zero = comp(Tensor(np.zeros((1, 16, 8, 8), dtype=np.float32))).data[0]
    assert np.ptp(zero) == 0.0 and zero[0] == 0.5


def test_channel_single_token_attention_is_identity_on_v():
    rng = np.random.default_rng(3)
    comp = to_float64(ChannelCompressor(64, np.random.default_rng(7)))
    randomize(comp, rng)
    fmap = rng.uniform(-1.0, 1.0, (1, 64, 4, 4))  # 4x4 pool -> single position
    got = comp(Tensor(fmap)).data[0]
    # recompute v by loops and bypass attention entirely
    pooled = np.zeros((64, 1, 1))
    for ci in range(64):
        pooled[ci, 0, 0] = fmap[0, ci].mean()
    flat = pooled.reshape(-1)
    mu, var = flat.mean(), flat.var()
    normed = (pooled.reshape(64) - mu) / math.sqrt(var + comp.norm.eps)
    normed = normed * comp.norm.gamma.data + comp.norm.beta.data
    v = separable_mix_loops(comp.v, normed.reshape(64, 1))
    want = 1.0 / (1.0 + np.exp(-v[:, 0]))
    assert np.max(np.abs(got - want)) < 1e-6


def test_spatial_matches_brute_force_loops():
    rng = np.random.default_rng(4)
    for seed in range(4):
        comp = to_float64(SpatialCompressor(8, np.random.default_rng(seed), groups=4))
        randomize(comp, rng)
        fmap = rng.uniform(-1.0, 1.0, (1, 8, 6, 5))
        got = comp(Tensor(fmap)).data[0]
        want = spatial_token_loops(comp, fmap[0])
        assert got.shape == (11,)  # width gate (5) first, then height gate (6)
        assert np.max(np.abs(got - want)) < 1e-6


def test_spatial_constant_input_gives_constant_gates():
    comp = SpatialCompressor(16, np.random.default_rng(6), groups=4)
    fmap = np.full((1, 16, 4, 4), 2.0, dtype=np.float32)
    tok = comp(Tensor(fmap)).data[0]
    w_gate, h_gate = tok[:4], tok[4:]
    assert np.ptp(w_gate) == 0.0
    assert np.ptp(h_gate) == 0.0
    grid = np.outer(h_gate, w_gate)
    assert np.ptp(grid) == 0.0


def test_spatial_bright_column_peaks_width_gate():
    for seed in range(5):
        comp = SpatialCompressor(16, np.random.default_rng(seed), groups=4)
        for j in (0, 3, 5, 7):
            fmap = np.zeros((1, 16, 8, 8), dtype=np.float32)
            fmap[0, :, :, j] = 1.0
            tok = comp(Tensor(fmap)).data[0]
            w_gate = tok[:8]
            assert int(np.argmax(w_gate)) == j
            others = np.delete(w_gate, j)
            assert w_gate[j] > others.max()


def test_spatial_group_arithmetic_at_toy_scale():
    comp = SpatialCompressor(64, np.random.default_rng(8), groups=4)
    assert len(comp.w_mix) == 4 and len(comp.h_mix) == 4
    assert comp.w_mix[0].pw.weight.shape == (16, 16)
    tok = comp(Tensor(np.random.default_rng(9).uniform(size=(1, 64, 4, 4)))).data
    assert tok.shape == (1, 8)


def test_gate_ranges_strictly_inside_unit_interval():
    rng = np.random.default_rng(10)
    codec = StateCodec(16, np.random.default_rng(11), spatial_len=8)
    for _ in range(5):
        fmap = Tensor(rng.normal(0.0, 3.0, (2, 16, 4, 4)).astype(np.float32))
        s, c = codec.compress(fmap)
        for arr in (s.data, c.data):
            assert np.all(arr > 0.0) and np.all(arr < 1.0)


def test_channel_count_must_divide_groups():
    with pytest.raises(DimensionError):
        SpatialCompressor(30, np.random.default_rng(0), groups=4)
    with pytest.raises(DimensionError):
        StateCodec(30, np.random.default_rng(0))


def test_reconstruct_zero_inputs_bias_only_and_reproducible():
    def build():
        return StateCodec(16, np.random.default_rng(12), spatial_len=8)

    codec = build()
    s = Tensor(np.zeros((1, 8), dtype=np.float32))
    c = Tensor(np.zeros((1, 16), dtype=np.float32))
    f_z = Tensor(np.zeros((1, 16, 4, 4), dtype=np.float32))
    out1 = codec.reconstruct(s, c, f_z).data
    out2 = codec.reconstruct(s, c, f_z).data
    out3 = build().reconstruct(s, c, f_z).data
    assert out1.shape == (1, 16, 4, 4)
    assert np.array_equal(out1, out2)
    assert np.array_equal(out1, out3)
    assert np.ptp(out1.reshape(16, -1), axis=1).max() == 0.0  # bias only, flat maps


def test_reconstruct_rejects_mismatched_tokens():
    codec = StateCodec(16, np.random.default_rng(13), spatial_len=8)
    f_z = Tensor(np.zeros((1, 16, 4, 4), dtype=np.float32))
    with pytest.raises(DimensionError):
        codec.reconstruct(Tensor(np.zeros((1, 6), dtype=np.float32)),
                          Tensor(np.zeros((1, 16), dtype=np.float32)), f_z)
    with pytest.raises(DimensionError):
        codec.reconstruct(Tensor(np.zeros((1, 8), dtype=np.float32)),
                          Tensor(np.zeros((1, 8), dtype=np.float32)), f_z)


def test_token_pair_validation():
    pair = StateTokenPair(np.ones(8, dtype=np.float64), np.ones(16), 3, "inferred")
    assert pair.spatial.dtype == np.float32 and pair.channel.dtype == np.float32
    assert pair.frame_index == 3 and pair.source == "inferred"
    with pytest.raises(DimensionError):
        StateTokenPair(np.ones((2, 4)), np.ones(16), 0)
    bad = np.ones(16, dtype=np.float32)
    bad[3] = np.nan
    with pytest.raises(ContractViolation):
        StateTokenPair(np.ones(8), bad, 0)
    with pytest.raises(ContractViolation):
        StateTokenPair(np.ones(8), np.ones(16), 0, source="magic")


def test_compress_to_pair_contract():
    codec = StateCodec(16, np.random.default_rng(14), spatial_len=8)
    fmap = Tensor(np.random.default_rng(15).uniform(size=(1, 16, 4, 4)).astype(np.float32))
    pair = codec.compress_to_pair(fmap, frame_index=2)
    assert pair.source == "compressed" and pair.frame_index == 2
    assert pair.spatial.shape == (8,) and pair.channel.shape == (16,)
    inferred = codec.compress_to_pair(fmap, frame_index=3, source="inferred")
    assert inferred.source == "inferred"
    # returned arrays are copies, not views into autodiff buffers
    before = codec.compress(fmap)[0].data[0].copy()
    pair.spatial[:] = -1.0
    assert np.array_equal(codec.compress(fmap)[0].data[0], before)
    batch = Tensor(np.zeros((2, 16, 4, 4), dtype=np.float32))
    with pytest.raises(ContractViolation):
        codec.compress_to_pair(batch, frame_index=0)


def test_init_tokens_are_learned_neutral_gates():
    codec = StateCodec(16, np.random.default_rng(16), spatial_len=8)
    s, c = codec.init_tokens()
    assert s is codec.s_init and c is codec.c_init  # live parameters, not copies
    assert s.requires_grad and c.requires_grad
    assert s.shape == (1, 8) and c.shape == (1, 16)
    assert np.all(s.data == 0.5) and np.all(c.data == 0.5)
    names = dict(codec.named_parameters("codec."))
    assert "codec.s_init" in names and "codec.c_init" in names


def test_init_pair_packages_current_values_as_copies():
    codec = StateCodec(16, np.random.default_rng(17), spatial_len=8)
    codec.s_init.data[0, 0] = 0.75
    pair = codec.init_pair(frame_index=9)
    assert pair.source == "init" and pair.frame_index == 9
    assert pair.spatial[0] == pytest.approx(0.75)
    pair.spatial[0] = -5.0
    assert codec.s_init.data[0, 0] == pytest.approx(0.75)


def test_compression_is_deterministic():
    fmap = np.random.default_rng(18).uniform(size=(1, 16, 4, 4)).astype(np.float32)
    outs = []
    for _ in range(2):
        codec = StateCodec(16, np.random.default_rng(19), spatial_len=8)
        s, c = codec.compress(Tensor(fmap.copy()))
        outs.append((s.data.copy(), c.data.copy()))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])
