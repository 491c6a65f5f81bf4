"""U-Net building blocks on top of the autodiff tensor engine.

Each layer op is a fused graph node: the forward runs in plain numpy and
registers a hand-derived backward closure, which keeps graphs short and
avoids materializing intermediate tensors for every elementwise step.

Convolutions are zero-padded to preserve spatial size ("same"), including
the 2x2 up-convolution, which pads one row at the bottom and one column on
the right. Batch normalization runs AFTER the ReLU activation throughout
the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, Tensor, accumulate_grad, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects a rank-4 (N,C,H,W) tensor, got shape {x.shape}")


# -- functional ops -------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pads: tuple) -> Tensor:
    """Zero-padded cross-correlation, stride 1.

    pads is (top, bottom, left, right). The patch matrix is rebuilt in the
    backward pass instead of being kept alive, trading a little compute for
    memory.
    """
    _require_4d(x, "conv2d")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    pt, pb, pl, pr = pads
    h_out = h + pt + pb - kh + 1
    w_out = w + pl + pr - kw + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")

    def patch_matrix(arr):
        padded = np.pad(arr, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)

    w2 = weight.data.reshape(c_out, c * kh * kw)
    out = patch_matrix(x.data) @ w2.T + bias.data
    out = np.ascontiguousarray(
        out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        accumulate_grad(bias, gm.sum(axis=0))
        accumulate_grad(weight, (gm.T @ patch_matrix(x.data)).reshape(weight.shape))
        if not x.tracked():
            return
        d6 = (gm @ w2).reshape(n, h_out, w_out, c, kh, kw)
        dxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + h_out, j:j + w_out] += \
                    d6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        accumulate_grad(x, dxp[:, :, pt:pt + h, pl:pl + w])

    return record_op("conv2d", (x, weight, bias), out, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pooling, stride 2. Ties route the gradient to the first
    maximum in row-major order within the block."""
    _require_4d(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=4)
    out = np.take_along_axis(blocks, idx[..., None], axis=4)[..., 0]

    def backward(g):
        if not x.tracked():
            return
        d5 = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(d5, idx[..., None], g[..., None], axis=4)
        dx = d5.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, h, w)
        accumulate_grad(x, dx)

    return record_op("maxpool2x2", (x,), out, backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x replication; backward sums each cell's four grads."""
    _require_4d(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        if not x.tracked():
            return
        accumulate_grad(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return record_op("upsample_nearest2x", (x,), out, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two activations along the channel axis; backward splits."""
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"concat_channels dtype mismatch: {a.dtype} vs {b.dtype}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        accumulate_grad(a, g[:, :ca])
        accumulate_grad(b, g[:, ca:])

    return record_op("concat_channels", (a, b), out, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place as
    ``running <- (1 - momentum) * running + momentum * batch``; eval mode
    uses the running buffers only. The backward pass implements the full
    gradient, including the mean and variance terms.
    """
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm parameter shape mismatch for {c} channels")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * ivar
        out = g4 * xhat + b4
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)

        def backward(g):
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
            if not x.tracked():
                return
            dxhat = g * g4
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            accumulate_grad(x, (ivar / m) * (m * dxhat - s1 - xhat * s2))

        return record_op("batch_norm_train", (x, gamma, beta), out, backward)

    ivar = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
    xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * ivar

    def backward(g):
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        if x.tracked():
            accumulate_grad(x, g * g4 * ivar)

    return record_op("batch_norm_eval", (x, gamma, beta), g4 * xhat + b4, backward)


# -- layer classes --------------------------------------------------------


class Conv2d:
    """Learned convolution with "same" zero padding.

    Odd kernels pad k//2 on every side; the 2x2 kernel pads (0,1,0,1) so
    the output size still matches the input.
    """

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE) -> None:
        if k % 2 == 1:
            self.pads = (k // 2,) * 4
        elif k == 2:
            self.pads = (0, 1, 0, 1)
        else:
            raise ValueError(f"unsupported kernel size {k}")
        std = math.sqrt(2.0 / (in_ch * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (out_ch, in_ch, k, k)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.pads)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_states(self):
        return []


class BatchNorm2d:
    """Batch normalization layer with train/eval mode and running buffers."""

    def __init__(self, ch: int, dtype=DEFAULT_DTYPE,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> None:
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta,
                          self.running_mean, self.running_var,
                          training=self.training,
                          momentum=self.momentum, eps=self.eps)

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_states(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class ConvBlock:
    """Two rounds of conv3x3 -> ReLU -> batch norm (normalization after the
    activation)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE) -> None:
        self.conv0 = Conv2d(in_ch, out_ch, 3, rng, dtype)
        self.bn0 = BatchNorm2d(out_ch, dtype)
        self.conv1 = Conv2d(out_ch, out_ch, 3, rng, dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.bn0(self.conv0(x).relu())
        return self.bn1(self.conv1(x).relu())

    def _children(self):
        return [("conv0", self.conv0), ("bn0", self.bn0),
                ("conv1", self.conv1), ("bn1", self.bn1)]

    def named_parameters(self):
        return [(f"{cn}.{pn}", p) for cn, child in self._children()
                for pn, p in child.named_parameters()]

    def named_states(self):
        return [(f"{cn}.{sn}", s) for cn, child in self._children()
                for sn, s in child.named_states()]


class UpBlock:
    """Nearest 2x replication followed by a learned 2x2 same-size conv."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE) -> None:
        self.conv = Conv2d(in_ch, out_ch, 2, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(upsample_nearest2x(x))

    def named_parameters(self):
        return [(f"conv.{pn}", p) for pn, p in self.conv.named_parameters()]

    def named_states(self):
        return []


# -- U-Net assembly -------------------------------------------------------


@dataclass(frozen=True)
class UNetSpec:
    """Architecture knobs: input channels, down-sampling depth, base filter
    count (doubling per stage). The head always emits one sigmoid channel."""

    in_channels: int = 1
    depth: int = 4
    base_filters: int = 64

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")


class UNet:
    """Encoder/decoder segmentation network with skip connections.

    Encoder stages run a double conv block and pool; the pre-pool activation
    feeds the matching decoder stage, where it is concatenated after the
    up-block. A 1x1 convolution plus sigmoid produces the foreground
    probability map, so outputs live strictly in (0, 1) and keep the input's
    spatial size.
    """

    def __init__(self, spec: UNetSpec, seed: int, dtype=DEFAULT_DTYPE) -> None:
        rng = np.random.Generator(np.random.PCG64(seed))
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.training = True

        chs = [spec.base_filters * (2 ** i) for i in range(spec.depth)]
        self.encoder = []
        prev = spec.in_channels
        for ch in chs:
            self.encoder.append(ConvBlock(prev, ch, rng, dtype))
            prev = ch
        bottleneck_ch = spec.base_filters * (2 ** spec.depth)
        self.bottleneck = ConvBlock(prev, bottleneck_ch, rng, dtype)
        self.ups = []
        self.decoder = []
        prev = bottleneck_ch
        for ch in reversed(chs):
            self.ups.append(UpBlock(prev, ch, rng, dtype))
            self.decoder.append(ConvBlock(2 * ch, ch, rng, dtype))
            prev = ch
        self.head = Conv2d(chs[0], 1, 1, rng, dtype)

    # module registry in fixed creation order; stage indices count from the
    # finest resolution, so decoder stage i mirrors encoder stage i
    def _modules(self):
        mods = [(f"enc{i}", b) for i, b in enumerate(self.encoder)]
        mods.append(("bottleneck", self.bottleneck))
        depth = self.spec.depth
        for j, (up, dec) in enumerate(zip(self.ups, self.decoder)):
            i = depth - 1 - j
            mods.append((f"up{i}", up))
            mods.append((f"dec{i}", dec))
        mods.append(("head", self.head))
        return mods

    def named_parameters(self):
        return [(f"{mn}.{pn}", p) for mn, mod in self._modules()
                for pn, p in mod.named_parameters()]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_states(self):
        return [(f"{mn}.{sn}", s) for mn, mod in self._modules()
                for sn, s in mod.named_states()]

    def train(self) -> "UNet":
        return self._set_mode(True)

    def eval(self) -> "UNet":
        return self._set_mode(False)

    def _set_mode(self, training: bool) -> "UNet":
        self.training = training
        for block in [*self.encoder, self.bottleneck, *self.decoder]:
            block.bn0.training = training
            block.bn1.training = training
        return self

    def _check_input(self, x: Tensor) -> None:
        _require_4d(x, "UNet.forward")
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, "
                             f"got {x.shape[1]}")
        div = 2 ** self.spec.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"input spatial size {x.shape[2]}x{x.shape[3]} "
                             f"not divisible by 2^depth = {div}")
        if x.dtype != self.dtype:
            raise ValueError(f"input dtype {x.dtype} does not match model dtype "
                             f"{self.dtype}")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        skips = []
        h = x
        for block in self.encoder:
            h = block(h)
            skips.append(h)
            h = maxpool2x2(h)
        h = self.bottleneck(h)
        for up, dec, skip in zip(self.ups, self.decoder, reversed(skips)):
            h = concat_channels(up(h), skip)
            h = dec(h)
        return self.head(h).sigmoid()

    __call__ = forward

    def load_arrays(self, arrays: dict) -> None:
        """Overwrite parameters and running buffers in place from a
        name -> ndarray mapping (all entries required, shapes must match)."""
        targets = [(n, p.data) for n, p in self.named_parameters()]
        targets += self.named_states()
        for name, dest in targets:
            if name not in arrays:
                raise ValueError(f"missing array '{name}'")
            src = np.asarray(arrays[name])
            if src.shape != dest.shape:
                raise ValueError(f"array '{name}' has shape {src.shape}, "
                                 f"expected {dest.shape}")
            dest[...] = src.astype(dest.dtype)


def build_unet(spec: UNetSpec, seed: int, dtype=DEFAULT_DTYPE) -> UNet:
    """Construct a U-Net with seed-deterministic He-normal initialization."""
    return UNet(spec, seed, dtype)
