"""Temporal reasoning over compressed state tokens.

Past per-frame token pairs live in a HistoryBuffer. To predict the current
state, each token stream (spatial, channel) is run through a small stack of
selective-scan layers with the caller's init token appended at the end as a
query; the scan output at that position, clamped to [0, 1], is the predicted
token. Periodically the scan is also applied to the reversed history and the
two predictions are summed before clamping (bidirectional pass).
"""

import numpy as np

from .errors import ContractViolation, DimensionError
from .numerics import Tensor, functional as F
from .numerics.module import LayerNorm, Linear, Module, ModuleList, trunc_normal
from .state_codec import StateTokenPair


class HistoryBuffer:
    """Append-only token history with window sampling.

    Storage keeps every pushed pair (cheap: two short vectors per frame); the
    reasoning input is ``window_view()``, the most recent ``window`` entries.
    The first pushed pair is pinned as ``initial_pair`` and can never be
    replaced, regardless of how far the window has moved past it.
    """

    def __init__(self, window):
        if window < 1:
            raise ContractViolation(f"window must be >= 1, got {window}")
        self.window = window
        self._entries = []

    def __len__(self):
        return len(self._entries)

    @property
    def initial_pair(self):
        if not self._entries:
            raise ContractViolation("buffer is empty; push the first frame before reading")
        return self._entries[0]

    def push(self, pair):
        if not isinstance(pair, StateTokenPair):
            raise ContractViolation(f"expected StateTokenPair, got {type(pair).__name__}")
        if self._entries and pair.frame_index <= self._entries[-1].frame_index:
            raise ContractViolation(
                f"frame indices must increase: {pair.frame_index} after "
                f"{self._entries[-1].frame_index}"
            )
        self._entries.append(pair)

    def entries(self):
        """All stored entries, oldest first (copy of the list)."""
        return list(self._entries)

    def window_view(self):
        """The at-most-``window`` most recent entries, oldest first."""
        return list(self._entries[-self.window :])

    def reset(self):
        self._entries = []

    def as_arrays(self):
        """Window view stacked: (T, ws) spatial and (T, dc) channel arrays."""
        view = self.window_view()
        if not view:
            raise ContractViolation("cannot stack an empty history")
        return (
            np.stack([p.spatial for p in view]).astype(np.float32),
            np.stack([p.channel for p in view]).astype(np.float32),
        )


class ScanLayer(Module):
    """Pre-norm residual selective-scan block on (B, T, d) sequences."""

    def __init__(self, dim, state_n, rng):
        super().__init__()
        self.ln = LayerNorm(dim)
        self.in_proj = Linear(dim, dim, rng)
        self.delta_proj = Linear(dim, dim, rng)
        self.b_proj = Linear(dim, state_n, rng)
        self.c_proj = Linear(dim, state_n, rng)
        # A = -exp(A_log) stays strictly negative; log(1..N) staggers the decay rates
        a_log = np.log(np.arange(1, state_n + 1, dtype=np.float32))[None, :].repeat(dim, 0)
        self.A_log = Tensor(a_log, requires_grad=True)
        self.D_skip = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.out_proj = Linear(dim, dim, rng)

    def forward(self, x):
        u = self.in_proj(self.ln(x))
        delta = F.softplus(self.delta_proj(u))
        a = F.neg(F.exp(self.A_log))
        y = F.selective_scan(u, delta, a, self.b_proj(u), self.c_proj(u), self.D_skip)
        return F.add(x, self.out_proj(y))


class SsmStack(Module):
    def __init__(self, dim, state_n, layers, rng):
        super().__init__()
        self.layers = ModuleList([ScanLayer(dim, state_n, rng) for _ in range(layers)])

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class StateReasoner(Module):
    """Predicts the current (spatial, channel) tokens from their histories."""

    def __init__(self, spatial_dim, channel_dim, rng, state_n=8, layers=3):
        super().__init__()
        self.spatial_dim = spatial_dim
        self.channel_dim = channel_dim
        self.s_stack = SsmStack(spatial_dim, state_n, layers, rng)
        self.c_stack = SsmStack(channel_dim, state_n, layers, rng)

    def _predict(self, seq, stack, init):
        # the init token rides along as the final query position
        b = seq.shape[0]
        if seq.shape[-1] != init.shape[-1]:
            raise DimensionError(f"sequence dim {seq.shape} vs init token {init.shape}")
        q = F.reshape(init, (b, 1, seq.shape[-1]))
        full = F.concat([seq, q], axis=1) if seq.shape[1] > 0 else q
        out = stack(full)
        return F.reshape(F.narrow(out, 1, full.shape[1] - 1, 1), (b, seq.shape[-1]))

    def reason(self, seq_s, seq_c, init_s, init_c):
        """Histories (B, T, ws)/(B, T, dc) plus init tokens (B, ws)/(B, dc).

        Returns the scan outputs at the appended init position, clamped to
        [0, 1].
        """
        s = self._predict(seq_s, self.s_stack, init_s)
        c = self._predict(seq_c, self.c_stack, init_c)
        return F.clamp(s, 0.0, 1.0), F.clamp(c, 0.0, 1.0)

    def bidirectional_reason(self, seq_s, seq_c, init_s, init_c):
        """Forward pass plus a pass over the reversed history, summed then clamped."""
        sf = self._predict(seq_s, self.s_stack, init_s)
        cf = self._predict(seq_c, self.c_stack, init_c)
        sb = self._predict(F.flip(seq_s, 1), self.s_stack, init_s)
        cb = self._predict(F.flip(seq_c, 1), self.c_stack, init_c)
        return F.clamp(F.add(sf, sb), 0.0, 1.0), F.clamp(F.add(cf, cb), 0.0, 1.0)


def history_tensors(buffer):
    """Buffer window -> batch-1 Tensors ((1, T, ws), (1, T, dc))."""
    s, c = buffer.as_arrays()
    return Tensor(s[None]), Tensor(c[None])
