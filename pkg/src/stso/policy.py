"""Feedback policy networks with hand-rolled reverse-mode gradients.

Two architectures cover all experiments: a feedforward network with two
rectified-linear hidden layers for 1D systems, and a small convolutional
network (two conv + two max-pool stages and a linear output layer) for
2D systems. The layer vocabulary is closed, so gradients are coded
directly per layer instead of through a general tape.

Conventions fixed here and relied on by the tests:
  * rectifier subgradient at exactly zero pre-activation is 0,
  * max-pool ties break toward the first index in scan order, recorded
    at forward time so the backward pass is exact,
  * output layers are linear (commands must take either sign).

The sparse forward pass evaluates the network on every one-hot node
basis element. For the feedforward network the first layer then reduces
to reading a single weight column, which makes per-node evaluation
cheap and exactly equal to a dense forward on the basis vector.
"""

from __future__ import annotations

import numpy as np


def xavier_init(shape: tuple[int, ...], fan_in: int, fan_out: int, rng) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class MlpPolicy:
    """Fully connected network: n_in -> hidden ... -> n_out (linear)."""

    kind = "mlp"

    def __init__(self, sizes: list[int], weights=None, biases=None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        if weights is None:
            weights = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
            biases = [np.zeros(o) for o in sizes[1:]]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b, i, o in zip(self.weights, self.biases, sizes[:-1], sizes[1:]):
            if w.shape != (o, i) or b.shape != (o,):
                raise ValueError("parameter shapes inconsistent with layer sizes")

    @classmethod
    def xavier(cls, sizes, seed_stream, zero_output: bool = False) -> "MlpPolicy":
        weights, biases = [], []
        for li, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = li == len(sizes) - 2
            if last and zero_output:
                weights.append(np.zeros((o, i)))
            else:
                weights.append(xavier_init((o, i), i, o, seed_stream))
            biases.append(np.zeros(o))
        return cls(list(sizes), weights, biases)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_parameters(self, params: list[np.ndarray]):
        it = iter(params)
        for li in range(len(self.weights)):
            self.weights[li] = np.asarray(next(it), dtype=np.float64)
            self.biases[li] = np.asarray(next(it), dtype=np.float64)

    def forward_batch(self, x: np.ndarray):
        """(B, n_in) -> ((B, n_out), cache for backward)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected (B, {self.n_in}) input, got {x.shape}")
        acts = [x]
        masks = []
        h = x
        n_layers = len(self.weights)
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if li < n_layers - 1:
                mask = z > 0
                h = np.where(mask, z, 0.0)
                masks.append(mask)
                acts.append(h)
            else:
                h = z
        return h, (acts, masks)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_batch(np.asarray(x, dtype=np.float64)[None, :])
        return out[0]

    def backward_batch(self, cache, upstream: np.ndarray):
        """Chain upstream (B, n_out) through the recorded forward.

        Returns (gradients in parameters() order, input gradients).
        """
        acts, masks = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (acts[0].shape[0], self.n_out):
            raise ValueError("upstream shape does not match recorded forward")
        grads = [None] * (2 * len(self.weights))
        delta = upstream
        for li in range(len(self.weights) - 1, -1, -1):
            grads[2 * li] = delta.T @ acts[li]
            grads[2 * li + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[li]
            if li > 0:
                delta = delta * masks[li - 1]
        return grads, delta

    def backward(self, cache, upstream: np.ndarray):
        grads, dx = self.backward_batch(cache, np.asarray(upstream)[None, :])
        return grads, dx[0]

    def spec(self) -> dict:
        return {"kind": self.kind, "sizes": self.sizes}


def _pool2_ceil(x: np.ndarray):
    """2x2 stride-2 max pool with ceil-mode edges; records argmax indices."""
    b, c, h, w = x.shape
    hp, wp = -(-h // 2) * 2, -(-w // 2) * 2
    xp = np.full((b, c, hp, wp), -np.inf)
    xp[:, :, :h, :w] = x
    win = xp.reshape(b, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, hp // 2, wp // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx, (h, w)


def _pool2_ceil_backward(upstream: np.ndarray, idx: np.ndarray, in_hw):
    b, c, ho, wo = upstream.shape
    h, w = in_hw
    grad = np.zeros((b, c, ho * 2, wo * 2))
    flat = grad.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = flat.reshape(b, c, ho, wo, 4)
    np.put_along_axis(flat, idx[..., None], upstream[..., None], axis=-1)
    grad = flat.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    grad = grad.reshape(b, c, ho * 2, wo * 2)
    return grad[:, :, :h, :w]


class CnnPolicy:
    """conv-relu-pool, conv-relu-pool, then a linear readout layer."""

    kind = "cnn"

    def __init__(self, input_shape, filters=(8, 16), kernel=3, n_out=1,
                 conv_w=None, conv_b=None, fc_w=None, fc_b=None):
        self.input_shape = tuple(int(s) for s in input_shape)  # (C, H, W)
        self.filters = tuple(int(f) for f in filters)
        self.kernel = int(kernel)
        self.n_out = int(n_out)
        c, h, w = self.input_shape
        f1, f2 = self.filters
        k = self.kernel
        self._hw1 = (-(-h // 2), -(-w // 2))
        self._hw2 = (-(-self._hw1[0] // 2), -(-self._hw1[1] // 2))
        self.flat = f2 * self._hw2[0] * self._hw2[1]
        self.conv_w = conv_w or [np.zeros((f1, c, k, k)), np.zeros((f2, f1, k, k))]
        self.conv_b = conv_b or [np.zeros(f1), np.zeros(f2)]
        self.fc_w = fc_w if fc_w is not None else np.zeros((self.n_out, self.flat))
        self.fc_b = fc_b if fc_b is not None else np.zeros(self.n_out)

    @classmethod
    def xavier(cls, input_shape, filters, kernel, n_out, seed_stream,
               zero_output: bool = False) -> "CnnPolicy":
        c = input_shape[0]
        k = kernel
        chans = (c,) + tuple(filters)
        conv_w = [
            xavier_init((co, ci, k, k), ci * k * k, co * k * k, seed_stream)
            for ci, co in zip(chans[:-1], chans[1:])
        ]
        conv_b = [np.zeros(f) for f in filters]
        net = cls(input_shape, filters, kernel, n_out, conv_w=conv_w, conv_b=conv_b)
        if not zero_output:
            net.fc_w = xavier_init((n_out, net.flat), net.flat, n_out, seed_stream)
        return net

    @property
    def n_in(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def parameters(self) -> list[np.ndarray]:
        return [self.conv_w[0], self.conv_b[0], self.conv_w[1], self.conv_b[1],
                self.fc_w, self.fc_b]

    def set_parameters(self, params: list[np.ndarray]):
        p = [np.asarray(a, dtype=np.float64) for a in params]
        self.conv_w = [p[0], p[2]]
        self.conv_b = [p[1], p[3]]
        self.fc_w, self.fc_b = p[4], p[5]

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        k = self.kernel
        p = k // 2
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # (B, C, H, W, k, k) -> (B, C*k*k, H*W)
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, h * w)

    def _col2im(self, cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
        k = self.kernel
        p = k // 2
        b = cols.shape[0]
        xp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        cols = cols.reshape(b, c, k, k, h, w)
        for di in range(k):
            for dj in range(k):
                xp[:, :, di:di + h, dj:dj + w] += cols[:, :, di, dj]
        return xp[:, :, p:p + h, p:p + w]

    def _conv(self, x: np.ndarray, layer: int):
        b, c, h, w = x.shape
        cols = self._im2col(x)
        wmat = self.conv_w[layer].reshape(self.conv_w[layer].shape[0], -1)
        out = (wmat @ cols).reshape(b, -1, h, w) + self.conv_b[layer][None, :, None, None]
        return out, cols

    def forward_batch(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x.reshape(x.shape[0], *self.input_shape)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected {self.input_shape} images, got {x.shape[1:]}")
        z1, cols1 = self._conv(x, 0)
        out, cache = self._from_conv1(z1)
        cache["cols1"] = cols1
        return out, cache

    def _from_conv1(self, z1: np.ndarray):
        """Shared tail: relu -> pool -> conv2 -> relu -> pool -> linear."""
        m1 = z1 > 0
        a1 = np.where(m1, z1, 0.0)
        p1, idx1, hw1 = _pool2_ceil(a1)
        z2, cols2 = self._conv(p1, 1)
        m2 = z2 > 0
        a2 = np.where(m2, z2, 0.0)
        p2, idx2, hw2 = _pool2_ceil(a2)
        flat = p2.reshape(p2.shape[0], -1)
        out = flat @ self.fc_w.T + self.fc_b
        cache = dict(m1=m1, idx1=idx1, hw1=hw1, p1=p1, cols2=cols2,
                     m2=m2, idx2=idx2, hw2=hw2, p2shape=p2.shape, flat=flat)
        return out, cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_batch(np.asarray(x, dtype=np.float64)[None, ...])
        return out[0]

    def backward_batch(self, cache, upstream: np.ndarray):
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (cache["flat"].shape[0], self.n_out):
            raise ValueError("upstream shape does not match recorded forward")
        d_fc_w = upstream.T @ cache["flat"]
        d_fc_b = upstream.sum(axis=0)
        d_flat = upstream @ self.fc_w
        d_p2 = d_flat.reshape(cache["p2shape"])
        d_a2 = _pool2_ceil_backward(d_p2, cache["idx2"], cache["hw2"])
        d_z2 = d_a2 * cache["m2"]
        b, f2, h1, w1 = d_z2.shape
        d_z2_flat = d_z2.reshape(b, f2, h1 * w1)
        w2 = self.conv_w[1].reshape(f2, -1)
        d_w2 = np.einsum("bfn,bcn->fc", d_z2_flat, cache["cols2"]).reshape(self.conv_w[1].shape)
        d_b2 = d_z2_flat.sum(axis=(0, 2))
        d_cols2 = np.einsum("fc,bfn->bcn", w2, d_z2_flat)
        d_p1 = self._col2im(d_cols2, self.filters[0], h1, w1)
        d_a1 = _pool2_ceil_backward(d_p1, cache["idx1"], cache["hw1"])
        d_z1 = d_a1 * cache["m1"]
        bb, f1, h, w = d_z1.shape
        d_z1_flat = d_z1.reshape(bb, f1, h * w)
        w1mat = self.conv_w[0].reshape(f1, -1)
        d_w1 = np.einsum("bfn,bcn->fc", d_z1_flat, cache["cols1"]).reshape(self.conv_w[0].shape)
        d_b1 = d_z1_flat.sum(axis=(0, 2))
        d_cols1 = np.einsum("fc,bfn->bcn", w1mat, d_z1_flat)
        d_x = self._col2im(d_cols1, self.input_shape[0], h, w)
        grads = [d_w1, d_b1, d_w2, d_b2, d_fc_w, d_fc_b]
        return grads, d_x

    def backward(self, cache, upstream: np.ndarray):
        grads, dx = self.backward_batch(cache, np.asarray(upstream)[None, :])
        return grads, dx[0]

    def spec(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "filters": list(self.filters), "kernel": self.kernel,
                "n_out": self.n_out}


def sparse_forward_pass(policy, grid) -> np.ndarray:
    """Network outputs for every one-hot node input; (n_nodes, n_out).

    Row j equals forward(one_hot(j)). Only the activated column of the
    first layer participates, so the table costs one cheap tail
    evaluation per node instead of a dense product with a full image.
    Summing rows against nodal values of a field (times the quadrature
    weight) turns spatial integrals of the per-node response into plain
    vector sums.
    """
    if isinstance(policy, MlpPolicy):
        if policy.n_in != grid.n_nodes:
            raise ValueError("sparse pass requires input size == node count")
        table = np.empty((grid.n_nodes, policy.n_out))
        w0, b0 = policy.weights[0], policy.biases[0]
        for j in range(grid.n_nodes):
            h = w0[:, j] + b0
            h = np.where(h > 0, h, 0.0)
            for li in range(1, len(policy.weights)):
                z = policy.weights[li] @ h + policy.biases[li]
                h = np.where(z > 0, z, 0.0) if li < len(policy.weights) - 1 else z
            table[j] = h
        return table
    if isinstance(policy, CnnPolicy):
        c, h, w = policy.input_shape
        if c != 1 or h * w != grid.n_nodes:
            raise ValueError("sparse pass requires a single-channel image of the grid")
        k = policy.kernel
        p = k // 2
        f1 = policy.filters[0]
        kern = policy.conv_w[0]  # (F1, 1, k, k)
        # conv1 response to a one-hot pixel is the kernel stamped around it
        z1 = np.zeros((grid.n_nodes, f1, h, w))
        jx, jy = np.divmod(np.arange(grid.n_nodes), w)
        for a in range(k):
            for bq in range(k):
                x = jx + p - a
                y = jy + p - bq
                ok = (x >= 0) & (x < h) & (y >= 0) & (y < w)
                z1[np.arange(grid.n_nodes)[ok], :, x[ok], y[ok]] = kern[:, 0, a, bq]
        z1 += policy.conv_b[0][None, :, None, None]
        out, _ = policy._from_conv1(z1)
        return out
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def policy_from_spec(spec: dict) -> "MlpPolicy | CnnPolicy":
    if spec["kind"] == "mlp":
        return MlpPolicy(spec["sizes"])
    if spec["kind"] == "cnn":
        return CnnPolicy(spec["input_shape"], spec["filters"], spec["kernel"],
                         spec["n_out"])
    raise ValueError(f"unknown policy kind {spec['kind']!r}")
