"""Factorized and plain layers with manual forward/backward passes.

A shared weight W (m x n) is expanded during training into U (m x r),
per-task diagonals stored as r-vectors, and V (r x n); the effective weight
is the contraction U @ diag(d1 * ... * dt) @ V.  Convolutions factorize the
(c_o*k) x (k*c_i) spatial matricization of the kernel.  Contraction is exact,
so the inference model is bit-for-bit a plain architecture.

Backward passes are analytic gradients of the contracted forward; the
factorized parameters receive their chain-rule shares of dW.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DimensionError, RankError
from .linalg import init_dense, spectral_factorize
from .tensor import Tensor, conv2d_backward_raw, conv2d_forward_cols, conv2d_raw, permute_axes


class Param:
    """A named trainable tensor with an accumulated gradient buffer.

    ``task`` is the owning task index for task-specific diagonals, else None.
    ``no_decay`` exempts the parameter from optimizer weight decay.
    """

    def __init__(self, name: str, tensor: Tensor, no_decay: bool = False, task: int | None = None):
        self.name = name
        self.tensor = tensor
        self.no_decay = no_decay
        self.task = task
        self.grad: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def zero_grad(self) -> None:
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.tensor.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def assign(self, values: np.ndarray) -> None:
        self.tensor = Tensor(values, dtype=self.tensor.dtype)


def compose_diag(task_diags: Sequence[Tensor]) -> Tensor:
    """Elementwise product of all task diagonals, accumulated left to right."""
    if len(task_diags) == 0:
        raise ValueError("compose_diag: need at least one diagonal")
    r = task_diags[0].shape[0]
    for d in task_diags:
        if d.shape != (r,):
            raise DimensionError(f"compose_diag: length mismatch, {d.shape} vs ({r},)")
    acc = task_diags[0].data.copy()
    for d in task_diags[1:]:
        acc = acc * d.data
    return Tensor(acc, dtype=task_diags[0].dtype)


def task_block_slices(r: int, t: int) -> list[slice]:
    """Split 0..r into t contiguous blocks; the first r % t blocks get one extra."""
    base, extra = divmod(r, t)
    out, start = [], 0
    for j in range(t):
        size = base + (1 if j < extra else 0)
        out.append(slice(start, start + size))
        start += size
    return out


# -- plain layers ----------------------------------------------------------


class Layer:
    kind = "layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def flops(self, in_shape: tuple[int, ...]) -> tuple[int, tuple[int, ...]]:
        """(FLOPs for one forward at in_shape, output shape). Default: free."""
        return 0, in_shape

    def config(self) -> dict:
        return {"kind": self.kind}


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, dtype: str = "float32",
                 scheme: str = "kaiming-uniform", seed: int = 0):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Param("weight", init_dense((in_dim, out_dim), scheme, seed, dtype=dtype))
        self.bias = Param("bias", Tensor(np.zeros(out_dim), dtype=dtype)) if bias else None
        self.scheme = scheme
        self._x: np.ndarray | None = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias else [])

    def forward(self, x):
        self._x = x
        y = x @ self.weight.data
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, dy):
        x = self._x
        self.weight.add_grad(x.T @ dy)
        if self.bias is not None:
            self.bias.add_grad(dy.sum(axis=0))
        return dy @ self.weight.data.T

    def flops(self, in_shape):
        b = in_shape[0]
        return 2 * b * self.in_dim * self.out_dim, (b, self.out_dim)

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "bias": self.bias is not None}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, dtype: str = "float32", scheme: str = "kaiming-uniform", seed: int = 0):
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding = stride, padding
        self.weight = Param("weight", init_dense((out_ch, in_ch, k, k), scheme, seed, dtype=dtype))
        self.bias = Param("bias", Tensor(np.zeros(out_ch), dtype=dtype)) if bias else None
        self.scheme = scheme
        self._x: np.ndarray | None = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias else [])

    def forward(self, x):
        self._x = x
        y, self._cols = conv2d_forward_cols(x, self.weight.data, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias.data[None, :, None, None]
        return y

    def backward(self, dy):
        dx, dw = conv2d_backward_raw(self._x, self.weight.data, dy, self.stride, self.padding,
                                     cols=self._cols)
        self.weight.add_grad(dw)
        if self.bias is not None:
            self.bias.add_grad(dy.sum(axis=(0, 2, 3)))
        return dx

    def out_shape(self, in_shape):
        b, _, h, w = in_shape
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return (b, self.out_ch, ho, wo)

    def flops(self, in_shape):
        out = self.out_shape(in_shape)
        b, _, ho, wo = out
        return 2 * b * self.out_ch * self.in_ch * self.k * self.k * ho * wo, out

    def config(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k,
                "stride": self.stride, "padding": self.padding, "bias": self.bias is not None}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool2d(Layer):
    """2x2 max pooling; spatial extents must be even."""

    kind = "maxpool2d"

    def forward(self, x):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"maxpool2d: extents must be even, got {x.shape}")
        blocks = x.reshape(b, c, h // 2, 2, w // 2, 2)
        y = blocks.max(axis=(3, 5))
        self._mask = blocks == y[:, :, :, None, :, None]
        # Break ties deterministically: keep only the first max per block.
        flat = self._mask.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
        first = np.cumsum(flat, axis=-1) == 1
        self._mask = (flat & first).reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        self._in_shape = x.shape
        return y

    def backward(self, dy):
        b, c, h, w = self._in_shape
        spread = self._mask * dy[:, :, :, None, :, None]
        return spread.reshape(b, c, h, w)

    def flops(self, in_shape):
        b, c, h, w = in_shape
        return 0, (b, c, h // 2, w // 2)


class Upsample2d(Layer):
    """Nearest-neighbour 2x upsampling."""

    kind = "upsample2d"

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        b, c, h, w = dy.shape
        return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))

    def flops(self, in_shape):
        b, c, h, w = in_shape
        return 0, (b, c, 2 * h, 2 * w)


# -- factorized layers -----------------------------------------------------


def _factor_grads(u2: np.ndarray, v2: np.ndarray, diags: list[np.ndarray], dw: np.ndarray):
    """Chain-rule shares of dW for W = u2 @ diag(prod diags) @ v2.

    Returns (du2, dv2, [ddiag_j]); ddiag_j carries the product of every other
    task's diagonal.
    """
    d = diags[0].copy()
    for extra in diags[1:]:
        d = d * extra
    du2 = (dw @ v2.T) * d[None, :]
    t_mat = u2.T @ dw  # (r, n)
    dv2 = d[:, None] * t_mat
    dd = (t_mat * v2).sum(axis=1)
    ddiags = []
    for j in range(len(diags)):
        others = np.ones_like(d)
        for i, di in enumerate(diags):
            if i != j:
                others = others * di
        ddiags.append(dd * others)
    return du2, dv2, ddiags


def _identity_diag_root(s: np.ndarray, t: int) -> np.ndarray:
    # Spread the spectrum evenly across tasks so the composed product is s.
    return np.power(s, 1.0 / t)


class FactorizedLinear(Layer):
    kind = "fac_linear"

    def __init__(self, in_dim: int, out_dim: int, r: int | None = None, t: int = 1,
                 bias: bool = True, init: str = "spectral", dtype: str = "float32",
                 scheme: str = "kaiming-uniform", seed: int = 0):
        m, n = in_dim, out_dim
        if r is None:
            r = min(m, n)
        if r < min(m, n):
            raise RankError(f"rank {r} below full-rank bound min({m}, {n})")
        if t < 1:
            raise ValueError("task count must be >= 1")
        self.in_dim, self.out_dim, self.r, self.t = m, n, r, t
        self.init, self.scheme = init, scheme
        if init == "spectral":
            w = init_dense((m, n), scheme, seed, dtype=dtype)
            u, mdiag, v = spectral_factorize(w, r, scheme=scheme, seed=seed + 1)
            root = _identity_diag_root(mdiag.data.astype(np.float64), t)
            diags = [Tensor(root, dtype=dtype) for _ in range(t)]
        elif init == "identity-diag":
            u = init_dense((m, r), scheme, seed, dtype=dtype)
            v = init_dense((r, n), scheme, seed + 1, dtype=dtype)
            diags = [Tensor(np.ones(r), dtype=dtype) for _ in range(t)]
        else:
            raise ValueError(f"unknown init mode {init!r}")
        self.u = Param("u", u)
        self.v = Param("v", v)
        self.task_diags = [Param(f"diag.{j}", diags[j], no_decay=True, task=j) for j in range(t)]
        self.bias = Param("bias", Tensor(np.zeros(n), dtype=dtype)) if bias else None
        self._x: np.ndarray | None = None

    def params(self):
        out = [self.u, self.v] + list(self.task_diags)
        if self.bias:
            out.append(self.bias)
        return out

    def contracted_weight(self) -> np.ndarray:
        d = compose_diag([p.tensor for p in self.task_diags]).data
        return (self.u.data * d[None, :]) @ self.v.data

    def forward(self, x):
        self._x = x
        self._w = self.contracted_weight()
        y = x @ self._w
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, dy):
        dw = self._x.T @ dy
        du, dv, ddiags = _factor_grads(
            self.u.data, self.v.data, [p.data for p in self.task_diags], dw
        )
        self.u.add_grad(du)
        self.v.add_grad(dv)
        for p, dd in zip(self.task_diags, ddiags):
            p.add_grad(dd)
        if self.bias is not None:
            self.bias.add_grad(dy.sum(axis=0))
        return dy @ self._w.T

    def to_plain(self) -> Linear:
        layer = Linear(self.in_dim, self.out_dim, bias=self.bias is not None,
                       dtype=self.u.tensor.dtype, scheme=self.scheme)
        layer.weight.assign(self.contracted_weight())
        if self.bias is not None:
            layer.bias.assign(self.bias.data)
        return layer

    def flops(self, in_shape):
        # Training cost is dominated by the contracted matmul; contraction adds m*r*n.
        b = in_shape[0]
        return 2 * b * self.in_dim * self.out_dim, (b, self.out_dim)

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "r": self.r, "t": self.t, "bias": self.bias is not None}


class FactorizedConv2d(Layer):
    kind = "fac_conv2d"

    def __init__(self, in_ch: int, out_ch: int, k: int, r: int | None = None, t: int = 1,
                 stride: int = 1, padding: int = 0, bias: bool = True, init: str = "spectral",
                 dtype: str = "float32", scheme: str = "kaiming-uniform", seed: int = 0):
        rows, cols = out_ch * k, in_ch * k
        if r is None:
            r = min(rows, cols)
        if r < min(rows, cols):
            raise RankError(f"rank {r} below full-rank bound min({rows}, {cols})")
        if t < 1:
            raise ValueError("task count must be >= 1")
        self.in_ch, self.out_ch, self.k, self.r, self.t = in_ch, out_ch, k, r, t
        self.stride, self.padding = stride, padding
        self.init, self.scheme = init, scheme
        if init == "spectral":
            kernel = init_dense((out_ch, in_ch, k, k), scheme, seed, dtype=dtype)
            wmat = permute_axes(kernel, (0, 2, 3, 1)).reshape((rows, cols))
            u2, mdiag, v2 = spectral_factorize(wmat, r, scheme=scheme, seed=seed + 1)
            root = _identity_diag_root(mdiag.data.astype(np.float64), t)
            diags = [Tensor(root, dtype=dtype) for _ in range(t)]
            u = u2.reshape((out_ch, k, r))
            v = v2.reshape((r, k, in_ch))
        elif init == "identity-diag":
            u = init_dense((rows, r), scheme, seed, dtype=dtype).reshape((out_ch, k, r))
            v = init_dense((r, cols), scheme, seed + 1, dtype=dtype).reshape((r, k, in_ch))
            diags = [Tensor(np.ones(r), dtype=dtype) for _ in range(t)]
        else:
            raise ValueError(f"unknown init mode {init!r}")
        self.u = Param("u", u)
        self.v = Param("v", v)
        self.task_diags = [Param(f"diag.{j}", diags[j], no_decay=True, task=j) for j in range(t)]
        self.bias = Param("bias", Tensor(np.zeros(out_ch), dtype=dtype)) if bias else None
        self._x: np.ndarray | None = None

    def params(self):
        out = [self.u, self.v] + list(self.task_diags)
        if self.bias:
            out.append(self.bias)
        return out

    def contracted_kernel(self) -> np.ndarray:
        co, ci, k, r = self.out_ch, self.in_ch, self.k, self.r
        d = compose_diag([p.tensor for p in self.task_diags]).data
        u2 = self.u.data.reshape(co * k, r)
        v2 = self.v.data.reshape(r, k * ci)
        wmat = (u2 * d[None, :]) @ v2  # (co*k, k*ci)
        return np.ascontiguousarray(wmat.reshape(co, k, k, ci).transpose(0, 3, 1, 2))

    def forward(self, x):
        self._x = x
        self._kernel = self.contracted_kernel()
        y, self._cols = conv2d_forward_cols(x, self._kernel, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias.data[None, :, None, None]
        return y

    def backward(self, dy):
        co, ci, k, r = self.out_ch, self.in_ch, self.k, self.r
        dx, dkernel = conv2d_backward_raw(self._x, self._kernel, dy, self.stride, self.padding,
                                          cols=self._cols)
        dwmat = dkernel.transpose(0, 2, 3, 1).reshape(co * k, k * ci)
        du2, dv2, ddiags = _factor_grads(
            self.u.data.reshape(co * k, r), self.v.data.reshape(r, k * ci),
            [p.data for p in self.task_diags], dwmat,
        )
        self.u.add_grad(du2.reshape(co, k, r))
        self.v.add_grad(dv2.reshape(r, k, ci))
        for p, dd in zip(self.task_diags, ddiags):
            p.add_grad(dd)
        if self.bias is not None:
            self.bias.add_grad(dy.sum(axis=(0, 2, 3)))
        return dx

    def to_plain(self) -> Conv2d:
        layer = Conv2d(self.in_ch, self.out_ch, self.k, stride=self.stride, padding=self.padding,
                       bias=self.bias is not None, dtype=self.u.tensor.dtype, scheme=self.scheme)
        layer.weight.assign(self.contracted_kernel())
        if self.bias is not None:
            layer.bias.assign(self.bias.data)
        return layer

    def out_shape(self, in_shape):
        b, _, h, w = in_shape
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return (b, self.out_ch, ho, wo)

    def flops(self, in_shape):
        out = self.out_shape(in_shape)
        b, _, ho, wo = out
        return 2 * b * self.out_ch * self.in_ch * self.k * self.k * ho * wo, out

    def config(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k,
                "r": self.r, "t": self.t, "stride": self.stride, "padding": self.padding,
                "bias": self.bias is not None}


FACTORIZED_KINDS = ("fac_linear", "fac_conv2d")


def contract_linear(layer: FactorizedLinear) -> Tensor:
    """Contracted m x n weight U @ diag(prod task diagonals) @ V."""
    return Tensor(layer.contracted_weight(), dtype=layer.u.tensor.dtype)


def contract_conv(layer: FactorizedConv2d) -> Tensor:
    """Contracted c_o x c_i x k x k kernel via the spatial matricization."""
    return Tensor(layer.contracted_kernel(), dtype=layer.u.tensor.dtype)


def forward(layer: Layer, x: Tensor, mode: str = "factorized") -> Tensor:
    """Functional forward; contracted mode runs the equivalent plain layer."""
    if mode not in ("factorized", "contracted"):
        raise ValueError(f"unknown forward mode {mode!r}")
    if mode == "contracted" and hasattr(layer, "to_plain"):
        layer = layer.to_plain()
    return Tensor(layer.forward(x.data.copy()), dtype=x.dtype)


def backward(layer: Layer, x: Tensor, upstream: Tensor) -> dict[str, Tensor]:
    """Functional backward: grads of every factor plus the input gradient."""
    y = layer.forward(x.data.copy())
    if y.shape != upstream.shape:
        raise DimensionError(f"upstream shape {upstream.shape} != output shape {y.shape}")
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(upstream.data)
    dt = x.dtype
    out = {"dx": Tensor(dx, dtype=dt)}
    if isinstance(layer, (FactorizedLinear, FactorizedConv2d)):
        out["du"] = Tensor(layer.u.grad, dtype=dt)
        out["dv"] = Tensor(layer.v.grad, dtype=dt)
        out["d_task_diags"] = [Tensor(p.grad, dtype=dt) for p in layer.task_diags]
        if layer.bias is not None:
            out["dbias"] = Tensor(layer.bias.grad, dtype=dt)
    else:
        for p in layer.params():
            out["d" + p.name] = Tensor(p.grad, dtype=dt)
    return out


# -- model container -------------------------------------------------------

_LAYER_CLASSES = {
    "linear": Linear,
    "conv2d": Conv2d,
    "relu": ReLU,
    "maxpool2d": MaxPool2d,
    "upsample2d": Upsample2d,
    "fac_linear": FactorizedLinear,
    "fac_conv2d": FactorizedConv2d,
}


def layer_from_config(cfg: dict, dtype: str = "float32") -> Layer:
    kind = cfg["kind"]
    cls = _LAYER_CLASSES[kind]
    kwargs = {k: v for k, v in cfg.items() if k != "kind"}
    if kind in ("fac_linear", "fac_conv2d"):
        kwargs.setdefault("init", "identity-diag")  # weights get overwritten on load
    if kind in ("linear", "conv2d", "fac_linear", "fac_conv2d"):
        kwargs["dtype"] = dtype
    return cls(**kwargs)


class MtlModel:
    """Shared trunk plus t task-specific heads.

    Heads may not contain factorized layers; every factorized trunk layer
    must carry the model's task count.
    """

    def __init__(self, trunk: list[Layer], heads: list[list[Layer]]):
        t = len(heads)
        if t < 1:
            raise ValueError("model needs at least one head")
        for layer in trunk:
            # Ablation modes with a single shared diagonal use layer t=1.
            if layer.kind in FACTORIZED_KINDS and layer.t not in (1, t):
                raise ValueError(f"factorized layer has t={layer.t}, model has t={t}")
        for head in heads:
            for layer in head:
                if layer.kind in FACTORIZED_KINDS:
                    raise ValueError("heads must not contain factorized layers")
        self.trunk = trunk
        self.heads = heads
        self.t = t

    def factorized_layers(self) -> list[Layer]:
        return [l for l in self.trunk if l.kind in FACTORIZED_KINDS]

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for i, layer in enumerate(self.trunk):
            for p in layer.params():
                out.append((f"trunk.{i}.{p.name}", p))
        for j, head in enumerate(self.heads):
            for i, layer in enumerate(head):
                for p in layer.params():
                    out.append((f"head.{j}.{i}.{p.name}", p))
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()

    def forward_trunk(self, x: np.ndarray) -> np.ndarray:
        h = x
        for layer in self.trunk:
            h = layer.forward(h)
        return h

    def forward_head(self, j: int, feat: np.ndarray) -> np.ndarray:
        h = feat
        for layer in self.heads[j]:
            h = layer.forward(h)
        return h

    def forward_all(self, x: np.ndarray) -> list[np.ndarray]:
        feat = self.forward_trunk(x)
        return [self.forward_head(j, feat) for j in range(self.t)]

    def backward_head(self, j: int, dy: np.ndarray) -> np.ndarray:
        g = dy
        for layer in reversed(self.heads[j]):
            g = layer.backward(g)
        return g

    def backward_trunk(self, dfeat: np.ndarray) -> np.ndarray:
        g = dfeat
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        return g

    def config(self) -> dict:
        return {
            "t": self.t,
            "trunk": [l.config() for l in self.trunk],
            "heads": [[l.config() for l in head] for head in self.heads],
        }

    @classmethod
    def from_config(cls, cfg: dict, dtype: str = "float32") -> "MtlModel":
        trunk = [layer_from_config(c, dtype=dtype) for c in cfg["trunk"]]
        heads = [[layer_from_config(c, dtype=dtype) for c in head] for head in cfg["heads"]]
        return cls(trunk, heads)
