"""AdamW with decoupled weight decay and a global-norm gradient clip."""

import numpy as np


def clip_grad_norm(params, max_norm):
    """Scale all grads so their joint L2 norm is at most max_norm. Returns the norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


class AdamW:
    """param groups: [{"params": [Tensor,...], "lr": float}, ...]."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.lr_scale = 1.0
        self._m = {}
        self._v = {}

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for g in self.groups:
            lr = g["lr"] * self.lr_scale
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad.astype(np.float32, copy=False)
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                m = self._m[key]
                v = self._v[key]
                m *= self.b1
                m += (1 - self.b1) * grad
                v *= self.b2
                v += (1 - self.b2) * grad * grad
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data = p.data - lr * (update + self.wd * p.data)
