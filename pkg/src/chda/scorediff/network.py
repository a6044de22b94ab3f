"""Compact residual convolutional score network with hand-written backprop.

Layout is channels-last, ``(batch, ny, nx, channels)``, float64.  The network
maps a noised field and its diffusion time to ``out``; the score is
``out / sigma_t``, so the training loss ``|eps + sigma_t * score|^2`` reduces
to ``|eps + out|^2``.  ``out`` is preconditioned for unit-variance data: the
convolutional stack sees ``c_in x`` with ``c_in = 1/sqrt(1 + sigma_t^2)`` and
only learns the residual to the exact score of N(0, I),

    out = net(c_in x, t) - sigma_t c_in^2 x

    emb   = silu(fourier(t) @ W_emb + b_emb)
    h     = conv_in(x)
    h    += conv2_k(silu(conv1_k(silu(h)) + dense_k(emb)))     for each block k
    out   = conv_out(silu(h))
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class NetworkSpec:
    channels: int = 16
    n_blocks: int = 4
    kernel: int = 3
    embed_dim: int = 32
    fourier_scale: float = 16.0

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")
        if self.channels < 1 or self.n_blocks < 1:
            raise ValueError("channels >= 1 and n_blocks >= 1 required")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> NetworkSpec:
        return cls(**json.loads(s))


def silu(a):
    return a / (1.0 + np.exp(-a))


def silu_grad(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


class Conv2d:
    """'Same'-padded 2D convolution via im2col."""

    def __init__(self, name, cin, cout, k, rng, scale=1.0):
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        fan_in = cin * k * k
        self.W = rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=(fan_in, cout))
        self.b = np.zeros(cout)

    def params(self):
        return [(f"{self.name}.W", self.W), (f"{self.name}.b", self.b)]

    def _cols(self, x):
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (self.k, self.k), axis=(1, 2))  # (B,H,W,C,k,k)
        return win.reshape(-1, self.cin * self.k * self.k)

    def forward(self, x, cache=None):
        B, H, W, _ = x.shape
        cols = self._cols(x)
        if cache is not None:
            cache[self.name] = (cols, x.shape)
        return (cols @ self.W + self.b).reshape(B, H, W, self.cout)

    def backward(self, dy, cache, grads):
        cols, xshape = cache[self.name]
        B, H, W, C = xshape
        dyf = dy.reshape(-1, self.cout)
        grads[f"{self.name}.W"] = grads.get(f"{self.name}.W", 0.0) + cols.T @ dyf
        grads[f"{self.name}.b"] = grads.get(f"{self.name}.b", 0.0) + dyf.sum(axis=0)
        dcols = (dyf @ self.W.T).reshape(B, H, W, C, self.k, self.k)
        p = self.k // 2
        dxp = np.zeros((B, H + 2 * p, W + 2 * p, C))
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, i:i + H, j:j + W, :] += dcols[..., i, j]
        return dxp[:, p:p + H, p:p + W, :]


class Dense:
    def __init__(self, name, nin, nout, rng, scale=1.0):
        self.name = name
        self.W = rng.normal(0.0, scale * np.sqrt(1.0 / nin), size=(nin, nout))
        self.b = np.zeros(nout)

    def params(self):
        return [(f"{self.name}.W", self.W), (f"{self.name}.b", self.b)]

    def forward(self, x, cache=None):
        if cache is not None:
            cache[self.name] = x
        return x @ self.W + self.b

    def backward(self, dy, cache, grads):
        x = cache[self.name]
        grads[f"{self.name}.W"] = grads.get(f"{self.name}.W", 0.0) + x.T @ dy
        grads[f"{self.name}.b"] = grads.get(f"{self.name}.b", 0.0) + dy.sum(axis=0)
        return dy @ self.W.T


class ScoreNet:
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator | None = None, out_scale: float = 0.1):
        rng = np.random.default_rng(0) if rng is None else rng
        self.spec = spec
        c, k, e = spec.channels, spec.kernel, spec.embed_dim
        # fixed random Fourier frequencies (not trained)
        self.fourier_W = rng.normal(0.0, spec.fourier_scale, size=e // 2)
        self.embed = Dense("embed", e, e, rng)
        self.conv_in = Conv2d("conv_in", 1, c, k, rng)
        self.blocks = []
        for i in range(spec.n_blocks):
            self.blocks.append((
                Conv2d(f"block{i}.conv1", c, c, k, rng),
                Dense(f"block{i}.time", e, c, rng),
                Conv2d(f"block{i}.conv2", c, c, k, rng, scale=0.5),
            ))
        self.conv_out = Conv2d("conv_out", c, 1, k, rng, scale=out_scale)

    # -- parameters -------------------------------------------------------
    def layers(self):
        yield self.embed
        yield self.conv_in
        for blk in self.blocks:
            yield from blk
        yield self.conv_out

    def params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self.layers():
            out.extend(layer.params())
        return out

    def n_params(self) -> int:
        return sum(p.size for _, p in self.params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValueError(f"expected {self.n_params()} weights, got {flat.size}")
        off = 0
        for _, p in self.params():
            p[...] = flat[off:off + p.size].reshape(p.shape)
            off += p.size

    # -- forward / backward ---------------------------------------------------
    def _time_features(self, t):
        proj = 2.0 * np.pi * np.outer(t, self.fourier_W)
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)

    def forward(self, x, t, cache=None):
        """x: (B, ny, nx) normalized fields; t: (B,) times.  Returns ``out`` (B, ny, nx)."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        a_emb = self.embed.forward(self._time_features(t), cache)
        emb = silu(a_emb)
        h = self.conv_in.forward(x[..., None], cache)
        if cache is not None:
            cache["a_emb"] = a_emb
        for i, (c1, dn, c2) in enumerate(self.blocks):
            u = c1.forward(silu(h), cache)
            a = u + dn.forward(emb, cache)[:, None, None, :]
            if cache is not None:
                cache[f"h{i}"] = h
                cache[f"a{i}"] = a
            h = h + c2.forward(silu(a), cache)
        if cache is not None:
            cache["h_final"] = h
        return self.conv_out.forward(silu(h), cache)[..., 0]

    def output(self, x_t, t, sigma_t, cache=None):
        """Preconditioned ``sigma_t * score`` for (B, ny, nx) inputs."""
        sig = np.asarray(sigma_t, dtype=np.float64).reshape(-1, 1, 1)
        c2 = 1.0 / (1.0 + sig * sig)
        return self.forward(x_t * np.sqrt(c2), t, cache) - sig * c2 * x_t

    def backward(self, dout, cache):
        """Gradients of sum(dout * out) w.r.t. every parameter, keyed by name."""
        grads: dict[str, np.ndarray] = {}
        dh = self.conv_out.backward(dout[..., None], cache, grads) * silu_grad(cache["h_final"])
        demb = 0.0
        for i in reversed(range(len(self.blocks))):
            c1, dn, c2 = self.blocks[i]
            a = cache[f"a{i}"]
            da = c2.backward(dh, cache, grads) * silu_grad(a)
            demb = demb + dn.backward(da.sum(axis=(1, 2)), cache, grads)
            du = c1.backward(da, cache, grads)
            dh = dh + du * silu_grad(cache[f"h{i}"])
        self.conv_in.backward(dh, cache, grads)
        self.embed.backward(demb * silu_grad(cache["a_emb"]), cache, grads)
        return grads

    def flat_grad(self, grads: dict) -> np.ndarray:
        return np.concatenate([np.broadcast_to(grads[n], p.shape).ravel() for n, p in self.params()])

    def loss_and_grad(self, x0, t, eps, sigma_t):
        """Denoising score-matching loss, mean over the batch of |eps + sigma_t s|^2."""
        x_t = x0 + sigma_t[:, None, None] * eps
        cache = {}
        out = self.output(x_t, t, sigma_t, cache)
        r = eps + out
        B = x0.shape[0]
        loss = float(np.sum(r * r) / B)
        grads = self.backward(2.0 * r / B, cache)
        return loss, self.flat_grad(grads)
