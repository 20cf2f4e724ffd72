"""Residual denoising network: fixed-depth 3x3 conv stack on 2-channel maps."""

from __future__ import annotations

import json
import struct

import numpy as np

from chandenoise.autodiff import Tensor, add, matmul, pad2d, relu, reshape, take, transpose

_CHECKPOINT_MAGIC = b"DNNN"
_CHECKPOINT_VERSION = 1

_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(batch: int, chans: int, h: int, w: int, k: int, pad: int) -> np.ndarray:
    """Flat gather indices into the zero-padded input, shape (B*H*W, C*k*k)."""
    key = (batch, chans, h, w, k, pad)
    cached = _IM2COL_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * pad, w + 2 * pad
    b = np.arange(batch)[:, None, None, None, None, None]
    i = np.arange(h)[None, :, None, None, None, None]
    j = np.arange(w)[None, None, :, None, None, None]
    c = np.arange(chans)[None, None, None, :, None, None]
    di = np.arange(k)[None, None, None, None, :, None]
    dj = np.arange(k)[None, None, None, None, None, :]
    flat = ((b * chans + c) * hp + (i + di)) * wp + (j + dj)
    idx = np.ascontiguousarray(flat.reshape(batch * h * w, chans * k * k))
    if len(_IM2COL_CACHE) > 32:
        _IM2COL_CACHE.clear()
    _IM2COL_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-shape 2D convolution via im2col.

    x: (B, C, H, W); weight: (Co, C, k, k); bias: (Co,). Zero padding keeps
    the spatial shape; requires H, W >= k.
    """
    batch, chans, h, w = x.shape
    out_c, _, k, _ = weight.shape
    if h < k or w < k:
        raise ValueError(f"spatial dims ({h}, {w}) smaller than kernel {k}")
    pad = k // 2
    idx = _im2col_indices(batch, chans, h, w, k, pad)
    cols = take(pad2d(x, pad), idx)                       # (B*H*W, C*k*k)
    out = matmul(cols, transpose(reshape(weight, (out_c, chans * k * k))))
    out = add(out, bias)                                  # broadcast over rows
    return transpose(reshape(out, (batch, h, w, out_c)), (0, 3, 1, 2))


class ResidualDenoiser:
    """Conv stack predicting the noise component of a 2-channel sub-CFR map.

    Layer 1: conv+relu (in->width); middle layers: conv+relu (width->width);
    final layer: conv (width->in). denoise() subtracts the predicted
    residual from the input.
    """

    def __init__(self, width: int = 16, depth: int = 5, in_channels: int = 2,
                 kernel_size: int = 3, dtype=np.float32, seed: int = 0):
        if depth < 2:
            raise ValueError("depth must be >= 2")
        self.width = width
        self.depth = depth
        self.in_channels = in_channels
        self.kernel_size = kernel_size
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        dims = [in_channels] + [width] * (depth - 1) + [in_channels]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for cin, cout in zip(dims[:-1], dims[1:]):
            std = np.sqrt(2.0 / (cin * kernel_size * kernel_size))  # He init
            w = rng.standard_normal((cout, cin, kernel_size, kernel_size)) * std
            self.weights.append(Tensor(w.astype(self.dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x, params: list[Tensor] | None = None) -> Tensor:
        """Residual prediction R(x). Pass `params` for a functional forward
        with substituted parameters (used by the meta inner loop)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        ps = self.parameters() if params is None else params
        if len(ps) != 2 * self.depth:
            raise ValueError("wrong parameter count")
        out = x
        for layer in range(self.depth):
            out = conv2d(out, ps[2 * layer], ps[2 * layer + 1])
            if layer < self.depth - 1:
                out = relu(out)
        return out

    def denoise(self, x: np.ndarray) -> np.ndarray:
        """Denoised map(s): input minus predicted residual."""
        arr = np.asarray(x, dtype=self.dtype)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        out = arr - self.forward(Tensor(arr)).data
        return out[0] if squeeze else out

    # --- flat parameter vector view -------------------------------------
    def get_theta(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_theta(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=self.dtype)
        if theta.size != self.n_params:
            raise ValueError(f"theta size {theta.size} != {self.n_params}")
        pos = 0
        for p in self.parameters():
            p.data = theta[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def grad_theta(self) -> np.ndarray:
        """Flat gradient vector after a backward pass (zeros where unset)."""
        parts = []
        for p in self.parameters():
            if p.grad is None:
                parts.append(np.zeros(p.size, dtype=self.dtype))
            else:
                parts.append(np.asarray(p.grad.data, dtype=self.dtype).ravel())
        return np.concatenate(parts)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "ResidualDenoiser":
        other = ResidualDenoiser(width=self.width, depth=self.depth,
                                 in_channels=self.in_channels,
                                 kernel_size=self.kernel_size, dtype=self.dtype)
        other.set_theta(self.get_theta())
        return other

    # --- checkpoint io ---------------------------------------------------
    def save(self, path, metadata: dict | None = None):
        """Flat binary checkpoint: header + LE float32 parameters + JSON meta."""
        meta = json.dumps(metadata or {}).encode()
        shapes = [p.shape for p in self.parameters()]
        with open(path, "wb") as f:
            f.write(_CHECKPOINT_MAGIC)
            f.write(struct.pack("<IIIII", _CHECKPOINT_VERSION, self.depth, self.width,
                                self.in_channels, self.kernel_size))
            f.write(struct.pack("<I", len(shapes)))
            for s in shapes:
                f.write(struct.pack("<I", len(s)))
                f.write(struct.pack(f"<{len(s)}I", *s))
            theta = self.get_theta().astype("<f4")
            f.write(struct.pack("<Q", theta.size))
            f.write(theta.tobytes())
            f.write(struct.pack("<I", len(meta)))
            f.write(meta)

    @classmethod
    def load(cls, path) -> tuple["ResidualDenoiser", dict]:
        with open(path, "rb") as f:
            if f.read(4) != _CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a denoiser checkpoint")
            version, depth, width, in_ch, ks = struct.unpack("<IIIII", f.read(20))
            if version != _CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            (n_arrays,) = struct.unpack("<I", f.read(4))
            shapes = []
            for _ in range(n_arrays):
                (ndim,) = struct.unpack("<I", f.read(4))
                shapes.append(struct.unpack(f"<{ndim}I", f.read(4 * ndim)))
            (n_theta,) = struct.unpack("<Q", f.read(8))
            theta = np.frombuffer(f.read(4 * n_theta), dtype="<f4")
            (n_meta,) = struct.unpack("<I", f.read(4))
            metadata = json.loads(f.read(n_meta).decode() or "{}")
        model = cls(width=width, depth=depth, in_channels=in_ch, kernel_size=ks,
                    dtype=np.float32)
        expected = [p.shape for p in model.parameters()]
        if expected != [tuple(s) for s in shapes]:
            raise ValueError("checkpoint shapes do not match architecture")
        model.set_theta(theta)
        return model, metadata


def residual_loss(model: ResidualDenoiser, noisy: np.ndarray, target: np.ndarray,
                  params: list[Tensor] | None = None) -> Tensor:
    """Mean over the batch of ||R(noisy) - (noisy - target)||_F^2."""
    noisy = np.asarray(noisy, dtype=model.dtype)
    target = np.asarray(target, dtype=model.dtype)
    if noisy.shape != target.shape:
        raise ValueError(f"shape mismatch {noisy.shape} vs {target.shape}")
    if noisy.ndim == 3:
        noisy, target = noisy[None], target[None]
    pred = model.forward(Tensor(noisy), params=params)
    err = pred - Tensor(noisy - target)
    return (err * err).sum() * (1.0 / noisy.shape[0])
