"""Model specs, executable graphs, and transposed-graph generation.

A ModelSpec is a plain description of a sequential network (with optional
identity-skip residual blocks). init_params materializes its parameters in
a ParameterStore; build_forward binds them into an executable graph; and
transpose_model builds the layer-reversed graph that shares every parameter
with the forward graph and owns none of its own:

  Linear(W, b):   y = x W^T + b        ->  x = (y - b) W
  Conv2d(W):      y = conv(x, W) + b   ->  x = adjoint conv of y with W
  BatchNorm:      scale/shift          ->  x = ((y - beta) * eps) / gamma
  MaxPool(k=s):                        ->  nearest-neighbor upsample by s
  ReLU, Dropout:  reused as-is
  Flatten:        reshape back to the pre-flatten shape
  Residual block: x = transposed(inner)(y - frozen_branch)

After every transposed conv/linear except the one that produces the final
output, an extra Dropout (default rate 0.3) is inserted so the secret is
not carried by a sparse subset of units.

BatchNorm running statistics live on the bound layer (they are not
Parameters and are not checkpointed); the transposed path never uses them.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .autograd import Tape, Tensor, recording


class GraphError(Exception):
    pass


# ------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class BatchNorm:
    features: int
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Residual:
    inner: tuple


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        if not self.layers:
            raise GraphError("model spec has no layers")

    @property
    def output_shape(self):
        return infer_shapes(self)[-1][1]

    @property
    def output_dim(self):
        out = self.output_shape
        if len(out) != 1:
            raise GraphError(f"model output is not a vector: {out}")
        return out[0]


def _infer_one(kind, shape, where):
    if isinstance(kind, Linear):
        if len(shape) != 1 or shape[0] != kind.in_dim:
            raise GraphError(f"{where}: linear expects ({kind.in_dim},), got {shape}")
        return (kind.out_dim,)
    if isinstance(kind, Conv2d):
        if len(shape) != 3 or shape[0] != kind.in_channels:
            raise GraphError(
                f"{where}: conv expects ({kind.in_channels}, H, W), got {shape}"
            )
        oh, ow = ops.conv_out_hw(shape[1], shape[2], kind.kernel, kind.kernel, kind.stride, kind.pad)
        if oh <= 0 or ow <= 0:
            raise GraphError(f"{where}: conv kernel does not fit input {shape}")
        return (kind.out_channels, oh, ow)
    if isinstance(kind, BatchNorm):
        if len(shape) != 3 or shape[0] != kind.features:
            raise GraphError(f"{where}: batchnorm expects ({kind.features}, H, W), got {shape}")
        return shape
    if isinstance(kind, MaxPool):
        if len(shape) != 3:
            raise GraphError(f"{where}: maxpool expects (C, H, W), got {shape}")
        oh = (shape[1] - kind.kernel) // kind.stride + 1
        ow = (shape[2] - kind.kernel) // kind.stride + 1
        if oh <= 0 or ow <= 0:
            raise GraphError(f"{where}: pool window does not fit input {shape}")
        return (shape[0], oh, ow)
    if isinstance(kind, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(kind, (ReLU, Dropout)):
        return shape
    if isinstance(kind, Residual):
        cur = shape
        for j, inner in enumerate(kind.inner):
            cur = _infer_one(inner, cur, f"{where}.inner[{j}]")
        if cur != shape:
            raise GraphError(
                f"{where}: residual inner path maps {shape} to {cur}; identity skip needs equal shapes"
            )
        return shape
    raise GraphError(f"{where}: unknown layer kind {type(kind).__name__}")


def infer_shapes(spec):
    """Per-layer (input_shape, output_shape), batch dim excluded."""
    shapes = []
    cur = tuple(spec.input_shape)
    for i, kind in enumerate(spec.layers):
        nxt = _infer_one(kind, cur, f"layer[{i}] {type(kind).__name__}")
        shapes.append((cur, nxt))
        cur = nxt
    return shapes


# -------------------------------------------------------------- param init


def _walk(layers, prefix=""):
    for i, kind in enumerate(layers):
        path = f"{prefix}{i:02d}"
        yield path, kind
        if isinstance(kind, Residual):
            yield from _walk(kind.inner, prefix=f"{path}.")


def init_params(spec, store):
    """Create every trainable parameter of `spec` in `store`."""
    infer_shapes(spec)
    for path, kind in _walk(spec.layers):
        if isinstance(kind, Linear):
            store.init_weight(f"{path}.linear.w", (kind.out_dim, kind.in_dim), fan_in=kind.in_dim)
            store.init_zeros(f"{path}.linear.b", (kind.out_dim,))
        elif isinstance(kind, Conv2d):
            fan_in = kind.in_channels * kind.kernel * kind.kernel
            store.init_weight(
                f"{path}.conv.w",
                (kind.out_channels, kind.in_channels, kind.kernel, kind.kernel),
                fan_in=fan_in,
            )
            store.init_zeros(f"{path}.conv.b", (kind.out_channels,))
        elif isinstance(kind, BatchNorm):
            store.init_ones(f"{path}.bn.gamma", (kind.features,))
            store.init_zeros(f"{path}.bn.beta", (kind.features,))
    return store


# ------------------------------------------------------------ bound layers


class _Ctx:
    __slots__ = ("train", "rng", "capture")

    def __init__(self, train, rng, capture=None):
        self.train = train
        self.rng = rng
        self.capture = capture


class _BLinear:
    def __init__(self, w, b):
        self.w, self.b = w, b

    def forward(self, x, ctx):
        return ops.add(ops.matmul(x, ops.transpose2d(self.w.tensor)), self.b.tensor)

    def param_ids(self):
        return [self.w.id, self.b.id]


class _BConv:
    def __init__(self, w, b, stride, pad):
        self.w, self.b, self.stride, self.pad = w, b, stride, pad

    def forward(self, x, ctx):
        return ops.conv2d(x, self.w.tensor, self.b.tensor, stride=self.stride, pad=self.pad)

    def param_ids(self):
        return [self.w.id, self.b.id]


class _BBatchNorm:
    def __init__(self, gamma, beta, eps, features):
        self.gamma, self.beta, self.eps = gamma, beta, eps
        self.state = {
            "running_mean": np.zeros(features, dtype=np.float32),
            "running_var": np.ones(features, dtype=np.float32),
        }

    def forward(self, x, ctx):
        return ops.batchnorm2d(
            x, self.gamma.tensor, self.beta.tensor, self.state, eps=self.eps, train=ctx.train
        )

    def param_ids(self):
        return [self.gamma.id, self.beta.id]


class _BReLU:
    def forward(self, x, ctx):
        return ops.relu(x)

    def param_ids(self):
        return []


class _BMaxPool:
    def __init__(self, kernel, stride):
        self.kernel, self.stride = kernel, stride

    def forward(self, x, ctx):
        return ops.maxpool2d(x, kernel=self.kernel, stride=self.stride)

    def param_ids(self):
        return []


class _BDropout:
    def __init__(self, rate, added=False):
        self.rate = rate
        self.added = added

    def forward(self, x, ctx):
        return ops.dropout(x, self.rate, ctx.rng, train=ctx.train)

    def param_ids(self):
        return []


class _BFlatten:
    def __init__(self, in_shape):
        self.in_shape = in_shape

    def forward(self, x, ctx):
        return ops.reshape(x, (-1, int(np.prod(self.in_shape))))

    def param_ids(self):
        return []


class _BResidual:
    def __init__(self, block_id, inner):
        self.block_id = block_id
        self.inner = inner

    def forward(self, x, ctx):
        if ctx.capture is not None:
            acc = ctx.capture.setdefault(
                self.block_id, [np.zeros(x.shape[1:], dtype=np.float64), 0]
            )
            acc[0] += x.data.sum(axis=0, dtype=np.float64)
            acc[1] += x.shape[0]
        h = x
        for layer in self.inner:
            h = layer.forward(h, ctx)
        return ops.add(h, x)

    def param_ids(self):
        return [pid for layer in self.inner for pid in layer.param_ids()]


# -------------------------------------------------- transposed bound layers


class _TLinear:
    def __init__(self, w, b):
        self.w, self.b = w, b

    def forward(self, y, ctx):
        return ops.matmul(ops.sub(y, self.b.tensor), self.w.tensor)

    def param_ids(self):
        return [self.w.id, self.b.id]


class _TConv:
    def __init__(self, w, stride, pad, out_hw):
        self.w, self.stride, self.pad, self.out_hw = w, stride, pad, out_hw

    def forward(self, y, ctx):
        return ops.conv_transpose2d(y, self.w.tensor, stride=self.stride, pad=self.pad, out_hw=self.out_hw)

    def param_ids(self):
        return [self.w.id]


class _TBatchNorm:
    def __init__(self, gamma, beta, eps, features):
        self.gamma, self.beta, self.eps = gamma, beta, eps
        self.features = features

    def forward(self, y, ctx):
        c = self.features
        beta = ops.reshape(self.beta.tensor, (1, c, 1, 1))
        gamma = ops.reshape(self.gamma.tensor, (1, c, 1, 1))
        return ops.div(ops.mul(ops.sub(y, beta), np.float32(self.eps)), gamma)

    def param_ids(self):
        return [self.gamma.id, self.beta.id]


class _TUpsample:
    def __init__(self, factor):
        self.factor = factor

    def forward(self, y, ctx):
        return ops.upsample_nearest(y, self.factor)

    def param_ids(self):
        return []


class _TUnflatten:
    def __init__(self, shape):
        self.shape = shape

    def forward(self, y, ctx):
        return ops.reshape(y, (-1, *self.shape))

    def param_ids(self):
        return []


class _TResidual:
    def __init__(self, block_id, frozen, inner):
        self.block_id = block_id
        self.frozen = Tensor(frozen[None])  # (1, C, H, W), constant
        self.inner = inner

    def forward(self, y, ctx):
        h = ops.sub(y, self.frozen)
        for layer in self.inner:
            h = layer.forward(h, ctx)
        return h

    def param_ids(self):
        return [pid for layer in self.inner for pid in layer.param_ids()]


# ------------------------------------------------------------------ graphs


class ExecutableGraph:
    def __init__(self, spec, store, layers, input_shape, output_shape, role):
        self.spec = spec
        self.store = store
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(output_shape)
        self.role = role
        self.rng = np.random.default_rng([store.seed, _ROLE_SEEDS.get(role, 99)])

    def param_ids(self):
        seen = []
        for layer in self.layers:
            for pid in layer.param_ids():
                if pid not in seen:
                    seen.append(pid)
        return seen

    def count_trainable_values(self):
        return sum(self.store.get(pid).data.size for pid in self.param_ids())

    def forward(self, x, mode="train", record=True, capture=None):
        if mode not in ("train", "eval"):
            raise GraphError(f"unknown mode {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if tuple(x.shape[1:]) != self.input_shape:
            raise GraphError(
                f"graph expects input (batch, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        tape = Tape(store=self.store) if record else None
        ctx = _Ctx(train=(mode == "train"), rng=self.rng, capture=capture)
        with recording(tape):
            h = x
            for layer in self.layers:
                h = layer.forward(h, ctx)
        return h, tape


_ROLE_SEEDS = {"forward": 1, "transposed": 2, "adversary": 3}


def forward_eval(graph, x, mode="eval", record=True):
    """Run `graph` on a batch; returns (output tensor, tape)."""
    return graph.forward(x, mode=mode, record=record)


def _bind_forward(layers, shapes, store, prefix=""):
    bound = []
    for i, kind in enumerate(layers):
        path = f"{prefix}{i:02d}"
        in_shape = shapes[i][0]
        if isinstance(kind, Linear):
            bound.append(_BLinear(store.get(f"{path}.linear.w"), store.get(f"{path}.linear.b")))
        elif isinstance(kind, Conv2d):
            bound.append(
                _BConv(store.get(f"{path}.conv.w"), store.get(f"{path}.conv.b"), kind.stride, kind.pad)
            )
        elif isinstance(kind, BatchNorm):
            bound.append(
                _BBatchNorm(store.get(f"{path}.bn.gamma"), store.get(f"{path}.bn.beta"), kind.eps, kind.features)
            )
        elif isinstance(kind, ReLU):
            bound.append(_BReLU())
        elif isinstance(kind, MaxPool):
            bound.append(_BMaxPool(kind.kernel, kind.stride))
        elif isinstance(kind, Dropout):
            bound.append(_BDropout(kind.rate))
        elif isinstance(kind, Flatten):
            bound.append(_BFlatten(in_shape))
        elif isinstance(kind, Residual):
            inner_shapes = []
            cur = in_shape
            for j, inner in enumerate(kind.inner):
                nxt = _infer_one(inner, cur, f"layer[{path}].inner[{j}]")
                inner_shapes.append((cur, nxt))
                cur = nxt
            inner_bound = _bind_forward(kind.inner, inner_shapes, store, prefix=f"{path}.")
            bound.append(_BResidual(path, inner_bound))
        else:
            raise GraphError(f"layer[{path}]: unknown layer kind {type(kind).__name__}")
    return bound


def build_forward(spec, store, role="forward"):
    shapes = infer_shapes(spec)
    layers = _bind_forward(spec.layers, shapes, store)
    return ExecutableGraph(spec, store, layers, spec.input_shape, shapes[-1][1], role)


def _transpose_layers(layers, shapes, store, rate, frozen, prefix=""):
    """Reverse `layers` into transposed bound layers, with added dropout
    after each transposed conv/linear (trimming of the final one happens
    at the top level)."""
    out = []
    for i in reversed(range(len(layers))):
        kind = layers[i]
        path = f"{prefix}{i:02d}"
        in_shape, _ = shapes[i]
        if isinstance(kind, Linear):
            out.append(_TLinear(store.get(f"{path}.linear.w"), store.get(f"{path}.linear.b")))
            out.append(_BDropout(rate, added=True))
        elif isinstance(kind, Conv2d):
            out.append(_TConv(store.get(f"{path}.conv.w"), kind.stride, kind.pad, in_shape[1:]))
            out.append(_BDropout(rate, added=True))
        elif isinstance(kind, BatchNorm):
            out.append(
                _TBatchNorm(store.get(f"{path}.bn.gamma"), store.get(f"{path}.bn.beta"), kind.eps, kind.features)
            )
        elif isinstance(kind, ReLU):
            out.append(_BReLU())
        elif isinstance(kind, MaxPool):
            if kind.kernel != kind.stride:
                raise GraphError(
                    f"layer[{path}]: cannot transpose maxpool with kernel {kind.kernel} != stride {kind.stride}"
                )
            if in_shape[1] % kind.stride or in_shape[2] % kind.stride:
                raise GraphError(
                    f"layer[{path}]: cannot transpose maxpool, input {in_shape} not divisible by stride {kind.stride}"
                )
            out.append(_TUpsample(kind.stride))
        elif isinstance(kind, Dropout):
            out.append(_BDropout(kind.rate))
        elif isinstance(kind, Flatten):
            out.append(_TUnflatten(in_shape))
        elif isinstance(kind, Residual):
            if frozen is None or path not in frozen:
                raise GraphError(
                    f"layer[{path}]: residual blocks require frozen branches; "
                    "run capture_frozen_branch first"
                )
            inner_shapes = []
            cur = in_shape
            for j, inner in enumerate(kind.inner):
                nxt = _infer_one(inner, cur, f"layer[{path}].inner[{j}]")
                inner_shapes.append((cur, nxt))
                cur = nxt
            inner_t = _transpose_layers(kind.inner, inner_shapes, store, rate, frozen, prefix=f"{path}.")
            out.append(_TResidual(path, np.asarray(frozen[path], dtype=np.float32), inner_t))
        else:
            raise GraphError(f"layer[{path}]: cannot transpose layer kind {type(kind).__name__}")
    return out


def transpose_model(spec, store, added_dropout_rate=0.3, frozen_branches=None):
    """Build the layer-reversed, weight-shared graph mapping an output-space
    vector to an input-shaped image. Adds no parameters to the store."""
    shapes = infer_shapes(spec)
    before = len(store)
    layers = _transpose_layers(spec.layers, shapes, store, added_dropout_rate, frozen_branches)
    for i in reversed(range(len(layers))):
        if isinstance(layers[i], (_TLinear, _TConv)):
            if i + 1 < len(layers) and isinstance(layers[i + 1], _BDropout) and layers[i + 1].added:
                del layers[i + 1]
            break
    if len(store) != before:
        raise GraphError("transposition must not create parameters")
    out_dim = spec.output_dim
    return ExecutableGraph(spec, store, layers, (out_dim,), tuple(spec.input_shape), "transposed")


# -------------------------------------------------------- skip-branch freeze


def capture_frozen_branch(store, spec, warmup_data, warmup_epochs=3, lr=1e-4, batch_size=64):
    """Train the plain forward model for a few epochs, then record each
    residual block's mean skipped-branch activation over one pass.

    Returns {block_id: mean activation (C, H, W) float32}.
    """
    from .optim import Adam
    from .training import train_plain

    graph = build_forward(spec, store)
    if warmup_epochs > 0:
        train_plain(store, graph, warmup_data, Adam(lr=lr), epochs=warmup_epochs, batch_size=batch_size)
    capture = {}
    images = warmup_data.images
    for lo in range(0, len(images), 256):
        graph.forward(images[lo : lo + 256], mode="eval", record=False, capture=capture)
    if not capture:
        raise GraphError("model has no residual blocks to freeze")
    return {
        block: (acc / max(count, 1)).astype(np.float32) for block, (acc, count) in capture.items()
    }


# ------------------------------------------------------------ head surgery


def swap_last_layer(spec, store, new_output_dim):
    """Replace the final linear layer's parameters with a fresh head of
    `new_output_dim` classes. Returns (new_spec, archive); the archive holds
    bit-exact copies of the original parameters for restore_last_layer."""
    last = spec.layers[-1]
    if not isinstance(last, Linear):
        raise GraphError(f"last layer is {type(last).__name__}, expected Linear")
    idx = len(spec.layers) - 1
    path = f"{idx:02d}"
    w_id, b_id = f"{path}.linear.w", f"{path}.linear.b"
    archive = {
        "w_id": w_id,
        "b_id": b_id,
        "w": store.get(w_id).data.copy(),
        "b": store.get(b_id).data.copy(),
        "out_dim": last.out_dim,
    }
    std = np.sqrt(2.0 / last.in_dim)
    store.replace(w_id, store.rng.normal(0.0, std, size=(new_output_dim, last.in_dim)).astype(np.float32))
    store.replace(b_id, np.zeros(new_output_dim, dtype=np.float32))
    new_layers = spec.layers[:-1] + (Linear(last.in_dim, new_output_dim),)
    return replace(spec, layers=new_layers), archive


def restore_last_layer(spec, store, archive):
    """Reinstall the archived head; returns the spec with the original width."""
    store.replace(archive["w_id"], archive["w"])
    store.replace(archive["b_id"], archive["b"])
    last = spec.layers[-1]
    new_layers = spec.layers[:-1] + (Linear(last.in_dim, archive["out_dim"]),)
    return replace(spec, layers=new_layers)


# ------------------------------------------------------------------ presets


def default_cnn(input_shape=(1, 28, 28), classes=10, channels=(8, 16), hidden=(512, 256)):
    c, h, w = input_shape
    c1, c2 = channels
    flat = c2 * (h // 4) * (w // 4)
    return ModelSpec(
        layers=(
            Conv2d(c, c1, 3, 1, 1),
            ReLU(),
            MaxPool(2, 2),
            Conv2d(c1, c2, 3, 1, 1),
            ReLU(),
            MaxPool(2, 2),
            Flatten(),
            Linear(flat, hidden[0]),
            ReLU(),
            Linear(hidden[0], hidden[1]),
            ReLU(),
            Linear(hidden[1], classes),
        ),
        input_shape=input_shape,
    )


def default_cnn_bn(input_shape=(1, 28, 28), classes=10, channels=(8, 16), hidden=(512, 256)):
    c, h, w = input_shape
    c1, c2 = channels
    flat = c2 * (h // 4) * (w // 4)
    return ModelSpec(
        layers=(
            Conv2d(c, c1, 3, 1, 1),
            BatchNorm(c1),
            ReLU(),
            MaxPool(2, 2),
            Conv2d(c1, c2, 3, 1, 1),
            BatchNorm(c2),
            ReLU(),
            MaxPool(2, 2),
            Flatten(),
            Linear(flat, hidden[0]),
            ReLU(),
            Linear(hidden[0], hidden[1]),
            ReLU(),
            Linear(hidden[1], classes),
        ),
        input_shape=input_shape,
    )


def fc_net(input_shape=(1, 28, 28), classes=10, hidden=(512, 256)):
    flat = int(np.prod(input_shape))
    return ModelSpec(
        layers=(
            Flatten(),
            Linear(flat, hidden[0]),
            ReLU(),
            Linear(hidden[0], hidden[1]),
            ReLU(),
            Linear(hidden[1], classes),
        ),
        input_shape=input_shape,
    )


def tiny_residual_net(input_shape=(1, 28, 28), classes=10, channels=8):
    c, h, w = input_shape
    return ModelSpec(
        layers=(
            Conv2d(c, channels, 3, 1, 1),
            ReLU(),
            Residual(inner=(Conv2d(channels, channels, 3, 1, 1), ReLU())),
            MaxPool(2, 2),
            Flatten(),
            Linear(channels * (h // 2) * (w // 2), classes),
        ),
        input_shape=input_shape,
    )


PRESETS = {
    "default_cnn": default_cnn,
    "default_cnn_bn": default_cnn_bn,
    "fc_net": fc_net,
    "tiny_residual_net": tiny_residual_net,
}
