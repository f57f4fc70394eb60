"""Network assembly: layer descriptors, reference topologies, parameters.

A NetworkSpec is an immutable ordered list of layer descriptors validated
at build time by shape inference. Parameters live in a ParamStore keyed by
layer path, created by init_weights and walked in a fixed canonical order
(which is also the serialization order).
"""

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import tensor_core as tc
from .tensor_core import Node, ShapeError, Tape


# ---------------------------------------------------------------------------
# layer descriptors

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5


@dataclass(frozen=True)
class InceptionSpec:
    """Channel widths of the four parallel branches.

    c1: 1x1 branch; r3 -> c3: 1x1 reduction then 3x3; r5 -> c5: 1x1
    reduction then 5x5; pp: 1x1 projection after 3x3 max pooling. Every
    branch keeps the spatial extent (stride 1, same-padding; the pooling
    branch uses window 3, stride 1, pad 1).
    """
    c1: int
    r3: int
    c3: int
    r5: int
    c5: int
    pp: int

    def __post_init__(self):
        for field in ("c1", "r3", "c3", "r5", "c5", "pp"):
            if getattr(self, field) < 1:
                raise ValueError(f"inception width {field} must be >= 1, "
                                 f"got {getattr(self, field)}")

    @property
    def out_channels(self):
        return self.c1 + self.c3 + self.c5 + self.pp

    def scaled(self, divisor):
        """Widths divided by `divisor`, rounded up, never below 1."""
        return InceptionSpec(*(max(1, math.ceil(v / divisor)) for v in
                               (self.c1, self.r3, self.c3, self.r5, self.c5, self.pp)))


@dataclass(frozen=True)
class Inception:
    spec: InceptionSpec


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_features: int


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple          # (C, H, W)
    layers: tuple
    class_count: int


def build_inception(spec, in_channels):
    """Validated inception layer for the given input channel count."""
    if in_channels < 1:
        raise ValueError(f"in_channels must be >= 1, got {in_channels}")
    if not isinstance(spec, InceptionSpec):
        spec = InceptionSpec(*spec)
    return Inception(spec)


# ---------------------------------------------------------------------------
# shape inference and validation

def _layer_output_shape(layer, shape, index):
    c = shape[0]
    where = f"layer {index} ({type(layer).__name__.lower()})"
    try:
        if isinstance(layer, Conv):
            _, h, w = shape
            ho = tc.conv_output_extent(h, layer.kernel, layer.stride, layer.pad)
            wo = tc.conv_output_extent(w, layer.kernel, layer.stride, layer.pad)
            return (layer.out_channels, ho, wo)
        if isinstance(layer, MaxPool):
            _, h, w = shape
            ho = tc.conv_output_extent(h, layer.window, layer.stride, layer.pad)
            wo = tc.conv_output_extent(w, layer.window, layer.stride, layer.pad)
            return (c, ho, wo)
        if isinstance(layer, Inception):
            _, h, w = shape
            return (layer.spec.out_channels, h, w)
        if isinstance(layer, GlobalAvgPool):
            _, h, w = shape
            return (c,)
        if isinstance(layer, FullyConnected):
            return (layer.out_features,)
        if isinstance(layer, (ReLU, Dropout, Softmax)):
            return shape
    except (ShapeError, ValueError) as err:
        raise ShapeError(f"{where}: {err}") from err
    raise ShapeError(f"{where}: unknown layer kind")


def infer_shapes(spec):
    """Per-layer output shapes; raises ShapeError naming the failing layer."""
    shapes = []
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Conv, MaxPool, Inception)) and len(shape) != 3:
            raise ShapeError(f"layer {i} ({type(layer).__name__.lower()}): "
                             f"needs a C,H,W input, got {shape}")
        shape = _layer_output_shape(layer, shape, i)
        shapes.append(shape)
    return shapes


def validate_spec(spec):
    if len(spec.input_shape) != 3 or any(e < 1 for e in spec.input_shape):
        raise ShapeError(f"input shape must be (C, H, W) with positive extents, "
                         f"got {spec.input_shape}")
    softmax_positions = [i for i, l in enumerate(spec.layers)
                         if isinstance(l, Softmax)]
    if softmax_positions != [len(spec.layers) - 1]:
        raise ShapeError("spec must end with exactly one terminal softmax")
    shapes = infer_shapes(spec)
    final = shapes[-1]
    if final != (spec.class_count,):
        raise ShapeError(f"terminal shape {final} does not match class count "
                         f"{spec.class_count}")
    return shapes


# ---------------------------------------------------------------------------
# parameters

def _layer_name(index, layer):
    return f"{index:02d}_{type(layer).__name__.lower()}"


def parameter_entries(spec):
    """Canonical (name, shape, fan_in) walk: spec order, branches b1/b3r/b3/b5r/b5/proj."""
    entries = []
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        name = _layer_name(i, layer)
        if isinstance(layer, Conv):
            cin = shape[0]
            k = layer.kernel
            entries.append((f"{name}.w", (layer.out_channels, cin, k, k), cin * k * k))
            entries.append((f"{name}.b", (layer.out_channels,), None))
        elif isinstance(layer, Inception):
            cin = shape[0]
            s = layer.spec
            for tag, cout, bcin, k in (("b1", s.c1, cin, 1), ("b3r", s.r3, cin, 1),
                                       ("b3", s.c3, s.r3, 3), ("b5r", s.r5, cin, 1),
                                       ("b5", s.c5, s.r5, 5), ("proj", s.pp, cin, 1)):
                entries.append((f"{name}.{tag}.w", (cout, bcin, k, k), bcin * k * k))
                entries.append((f"{name}.{tag}.b", (cout,), None))
        elif isinstance(layer, FullyConnected):
            d = int(np.prod(shape))
            entries.append((f"{name}.w", (layer.out_features, d), d))
            entries.append((f"{name}.b", (layer.out_features,), None))
        shape = _layer_output_shape(layer, shape, i)
    return entries


class ParamStore:
    """Named parameter tensors plus per-tensor optimizer velocity."""

    def __init__(self, tensors):
        self.tensors = tensors
        self.velocity = {}

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def keys(self):
        return self.tensors.keys()

    def total_count(self):
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype):
        return ParamStore({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self.tensors.items()})


def init_weights(spec, seed):
    """He-normal weights (variance 2/fan_in), zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in parameter_entries(spec):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=tc.FLOAT)
        else:
            std = math.sqrt(2.0 / fan_in)
            tensors[name] = (rng.standard_normal(shape) * std).astype(tc.FLOAT)
    return ParamStore(tensors)


def count_parameters(spec):
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_entries(spec))


def count_layers(spec, convention="weighted"):
    """Depth under a counting convention.

    weighted: layers owning parameters; an inception module counts as 2
    (its longest branch: reduction plus convolution). weighted+pooling+io
    adds standalone pooling layers (max and global-average), the input
    layer and the softmax output; concat layers are never counted.
    """
    weighted = 0
    pooling = 0
    for layer in spec.layers:
        if isinstance(layer, (Conv, FullyConnected)):
            weighted += 1
        elif isinstance(layer, Inception):
            weighted += 2
        elif isinstance(layer, (MaxPool, GlobalAvgPool)):
            pooling += 1
    if convention == "weighted":
        return weighted
    if convention == "weighted+pooling+io":
        return weighted + pooling + 2
    raise ValueError(f"unknown counting convention {convention!r}")


def count_inception_modules(spec):
    return sum(isinstance(l, Inception) for l in spec.layers)


# ---------------------------------------------------------------------------
# reference topologies

GOOGLENET_FULL_INCEPTIONS = (
    InceptionSpec(64, 96, 128, 16, 32, 32),
    InceptionSpec(128, 128, 192, 32, 96, 64),
    InceptionSpec(192, 96, 208, 16, 48, 64),
    InceptionSpec(160, 112, 224, 24, 64, 64),
)
GOOGLENET_FULL_STEM = (64, 64, 192)
GOOGLENET_FULL_TAIL = (272, 256)

ALEXNET_FULL_CONVS = (96, 256, 384, 384, 256)
ALEXNET_FULL_FC = (1024, 1024)

SMALL_DIVISOR = 8


def build_hccr_googlenet(scale="reference-full", *, class_count=None, in_channels=1,
                         input_size=None, inception_widths=None, head="flatten",
                         dropout_rate=0.5):
    """Inception network: conv stem, 4 inception modules, 3 interleaved pools.

    reference-full takes 120x120 input and lands near 7.26M parameters at
    3755 classes; reference-small divides every width by 8 and takes 32x32
    input for desk-scale training. Pass inception_widths (4 InceptionSpec)
    to override the module widths at either scale.
    """
    if scale == "reference-full":
        stem, tail = GOOGLENET_FULL_STEM, GOOGLENET_FULL_TAIL
        incs = GOOGLENET_FULL_INCEPTIONS
        input_size = input_size or 120
        class_count = class_count or 3755
    elif scale == "reference-small":
        stem = tuple(max(1, math.ceil(v / SMALL_DIVISOR)) for v in GOOGLENET_FULL_STEM)
        tail = tuple(max(1, math.ceil(v / SMALL_DIVISOR)) for v in GOOGLENET_FULL_TAIL)
        incs = tuple(s.scaled(SMALL_DIVISOR) for s in GOOGLENET_FULL_INCEPTIONS)
        input_size = input_size or 32
        class_count = class_count or 10
    else:
        raise ValueError(f"unknown scale {scale!r}")
    if input_size < 32:
        raise ShapeError(f"input size {input_size} is below the 32-pixel minimum")
    if inception_widths is not None:
        incs = tuple(build_inception(w, 1).spec for w in inception_widths)
        if len(incs) != 4:
            raise ValueError("expected exactly 4 inception width specs")

    layers = [
        Conv(stem[0], 7, stride=2, pad=3), ReLU(), MaxPool(3, 2, 1),
        Conv(stem[1], 1), ReLU(), Conv(stem[2], 3, pad=1), ReLU(), MaxPool(3, 2, 1),
        Inception(incs[0]), Inception(incs[1]), MaxPool(3, 2, 1),
        Inception(incs[2]), Inception(incs[3]),
        Conv(tail[0], 3, stride=2, pad=1), ReLU(),
        Conv(tail[1], 3, stride=2, pad=1), ReLU(),
    ]
    if head == "gap":
        layers.append(GlobalAvgPool())
    elif head != "flatten":
        raise ValueError(f"unknown head {head!r}")
    layers += [Dropout(dropout_rate), FullyConnected(class_count), Softmax()]
    spec = NetworkSpec((in_channels, input_size, input_size), tuple(layers), class_count)
    validate_spec(spec)
    return spec


def build_hccr_alexnet(scale="reference-full", *, class_count=None, in_channels=1,
                       input_size=None, dropout_rate=0.5):
    """Eight weighted layers: five convolutional, three fully connected.

    Max pooling follows conv groups 1, 2 and 5; dropout precedes the first
    two fully-connected layers. reference-full takes 114x114 input.
    """
    if scale == "reference-full":
        convs, fcs = ALEXNET_FULL_CONVS, ALEXNET_FULL_FC
        input_size = input_size or 114
        class_count = class_count or 3755
    elif scale == "reference-small":
        convs = tuple(max(1, math.ceil(v / SMALL_DIVISOR)) for v in ALEXNET_FULL_CONVS)
        fcs = tuple(max(1, math.ceil(v / SMALL_DIVISOR)) for v in ALEXNET_FULL_FC)
        input_size = input_size or 32
        class_count = class_count or 10
    else:
        raise ValueError(f"unknown scale {scale!r}")
    if input_size < 32:
        raise ShapeError(f"input size {input_size} is below the 32-pixel minimum")

    layers = (
        Conv(convs[0], 7, stride=2, pad=3), ReLU(), MaxPool(3, 2, 1),
        Conv(convs[1], 5, pad=2), ReLU(), MaxPool(3, 2, 1),
        Conv(convs[2], 3, pad=1), ReLU(),
        Conv(convs[3], 3, pad=1), ReLU(),
        Conv(convs[4], 3, pad=1), ReLU(), MaxPool(3, 2, 1),
        Dropout(dropout_rate), FullyConnected(fcs[0]), ReLU(),
        Dropout(dropout_rate), FullyConnected(fcs[1]), ReLU(),
        FullyConnected(class_count), Softmax(),
    )
    spec = NetworkSpec((in_channels, input_size, input_size), layers, class_count)
    validate_spec(spec)
    return spec


def with_dropout_rate(spec, rate):
    """Copy of `spec` with every dropout layer set to `rate`."""
    layers = tuple(Dropout(rate) if isinstance(l, Dropout) else l for l in spec.layers)
    return replace(spec, layers=layers)


# ---------------------------------------------------------------------------
# forward execution

def _forward_inception_taped(tape, x, pget):
    b1 = tc.relu_taped(tape, tc.conv2d_taped(tape, x, *pget("b1")))
    b3 = tc.relu_taped(tape, tc.conv2d_taped(tape, x, *pget("b3r")))
    b3 = tc.relu_taped(tape, tc.conv2d_taped(tape, b3, *pget("b3"), tc.ConvParams(1, 1)))
    b5 = tc.relu_taped(tape, tc.conv2d_taped(tape, x, *pget("b5r")))
    b5 = tc.relu_taped(tape, tc.conv2d_taped(tape, b5, *pget("b5"), tc.ConvParams(1, 2)))
    pp = tc.maxpool2d_taped(tape, x, 3, 1, 1)
    pp = tc.relu_taped(tape, tc.conv2d_taped(tape, pp, *pget("proj")))
    return tc.concat_channels_taped(tape, [b1, b3, b5, pp])


def _forward_inception_plain(x, pget):
    b1 = tc.relu(tc.conv2d(x, *pget("b1")))
    b3 = tc.relu(tc.conv2d(x, *pget("b3r")))
    b3 = tc.relu(tc.conv2d(b3, *pget("b3"), tc.ConvParams(1, 1)))
    b5 = tc.relu(tc.conv2d(x, *pget("b5r")))
    b5 = tc.relu(tc.conv2d(b5, *pget("b5"), tc.ConvParams(1, 2)))
    pp = tc.relu(tc.conv2d(tc.maxpool2d(x, 3, 1, 1)[0], *pget("proj")))
    return tc.concat_channels([b1, b3, b5, pp])


def forward_net(spec, params, x, mode="infer", rng=None):
    """Run the network on a batch. Returns (probabilities, tape).

    The tape is None in infer mode (dropout inactive, nothing recorded).
    Train mode registers every parameter on the tape and needs an rng when
    any dropout layer has a positive rate.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match network input "
                         f"(N, {', '.join(map(str, spec.input_shape))})")
    tensors = params.tensors if isinstance(params, ParamStore) else params
    train = mode == "train"

    if train:
        tape = Tape()
        nodes = {k: Node(v) for k, v in tensors.items()}
        tape.params = nodes
        cur = Node(x)
    else:
        tape, nodes, cur = None, None, x

    for i, layer in enumerate(spec.layers):
        name = _layer_name(i, layer)
        try:
            if isinstance(layer, Conv):
                cp = tc.ConvParams(layer.stride, layer.pad)
                if train:
                    cur = tc.conv2d_taped(tape, cur, nodes[f"{name}.w"],
                                          nodes[f"{name}.b"], cp)
                else:
                    cur = tc.conv2d(cur, tensors[f"{name}.w"], tensors[f"{name}.b"], cp)
            elif isinstance(layer, MaxPool):
                if train:
                    cur = tc.maxpool2d_taped(tape, cur, layer.window, layer.stride,
                                             layer.pad)
                else:
                    cur = tc.maxpool2d(cur, layer.window, layer.stride, layer.pad)[0]
            elif isinstance(layer, ReLU):
                cur = tc.relu_taped(tape, cur) if train else tc.relu(cur)
            elif isinstance(layer, Dropout):
                if train and layer.rate > 0:
                    if rng is None:
                        raise ValueError("train mode with dropout needs an rng")
                    cur = tc.dropout_taped(tape, cur, layer.rate, rng)
            elif isinstance(layer, Inception):
                if train:
                    pget = lambda tag: (nodes[f"{name}.{tag}.w"], nodes[f"{name}.{tag}.b"])
                    cur = _forward_inception_taped(tape, cur, pget)
                else:
                    pget = lambda tag: (tensors[f"{name}.{tag}.w"], tensors[f"{name}.{tag}.b"])
                    cur = _forward_inception_plain(cur, pget)
            elif isinstance(layer, GlobalAvgPool):
                cur = tc.mean_pool_taped(tape, cur) if train else cur.mean(axis=(2, 3))
            elif isinstance(layer, FullyConnected):
                value = cur.value if train else cur
                if value.ndim != 2:
                    flat = (value.shape[0], int(np.prod(value.shape[1:])))
                    cur = tc.reshape_taped(tape, cur, flat) if train else value.reshape(flat)
                if train:
                    cur = tc.fully_connected_taped(tape, cur, nodes[f"{name}.w"],
                                                   nodes[f"{name}.b"])
                else:
                    cur = tc.fully_connected(cur, tensors[f"{name}.w"], tensors[f"{name}.b"])
            elif isinstance(layer, Softmax):
                cur = tc.softmax_taped(tape, cur) if train else tc.softmax(cur)
            else:
                raise ShapeError("unknown layer kind")
        except (ShapeError, ValueError) as err:
            raise type(err)(f"layer {i} ({type(layer).__name__.lower()}): {err}") from None

    probs = cur.value if train else cur
    return probs, tape


def loss_and_grads(spec, params, x, labels, rng=None):
    """One taped forward/backward pass: (loss, probabilities, gradient dict)."""
    probs, tape = forward_net(spec, params, x, mode="train", rng=rng)
    loss = tc.cross_entropy_taped(tape, tape.output, labels)
    tape.backward()
    return float(loss.value), probs, tape.param_grads()


def grad_check_network(spec, params, x, labels, epsilon=1e-5, tolerance=1e-4,
                       min_checks=100, rng=None):
    """Finite-difference audit of the whole network in float64, dropout off."""
    spec64 = with_dropout_rate(spec, 0.0)
    tensors = params.tensors if isinstance(params, ParamStore) else params
    p64 = {k: v.astype(np.float64) for k, v in tensors.items()}
    x64 = np.asarray(x, dtype=np.float64)

    def loss_fn(p):
        probs, _ = forward_net(spec64, p, x64, mode="infer")
        return tc.cross_entropy(probs, labels)

    def grads_fn(p):
        return loss_and_grads(spec64, p, x64, labels)[2]

    return tc.grad_check(loss_fn, grads_fn, p64, epsilon=epsilon,
                         tolerance=tolerance, min_checks=min_checks, rng=rng)


# ---------------------------------------------------------------------------
# spec serialization (the HCRM model format's spec block)

_KIND_TAGS = {Conv: 1, MaxPool: 2, ReLU: 3, Dropout: 4, Inception: 5,
              FullyConnected: 6, Softmax: 7, GlobalAvgPool: 8}
_RATE_SCALE = 1_000_000  # dropout rate stored as a u32 in millionths


def _layer_fields(layer):
    if isinstance(layer, Conv):
        return (layer.out_channels, layer.kernel, layer.stride, layer.pad)
    if isinstance(layer, MaxPool):
        return (layer.window, layer.stride, layer.pad)
    if isinstance(layer, Dropout):
        return (round(layer.rate * _RATE_SCALE),)
    if isinstance(layer, Inception):
        s = layer.spec
        return (s.c1, s.r3, s.c3, s.r5, s.c5, s.pp)
    if isinstance(layer, FullyConnected):
        return (layer.out_features,)
    return ()


def _layer_from_fields(tag, fields):
    if tag == 1:
        return Conv(*fields)
    if tag == 2:
        return MaxPool(*fields)
    if tag == 3:
        return ReLU()
    if tag == 4:
        return Dropout(fields[0] / _RATE_SCALE)
    if tag == 5:
        return Inception(InceptionSpec(*fields))
    if tag == 6:
        return FullyConnected(fields[0])
    if tag == 7:
        return Softmax()
    if tag == 8:
        return GlobalAvgPool()
    raise ValueError(f"unknown layer tag {tag}")


def spec_to_bytes(spec):
    out = bytearray()
    out += struct.pack("<3I", *spec.input_shape)
    out += struct.pack("<I", len(spec.layers))
    for layer in spec.layers:
        fields = _layer_fields(layer)
        out += struct.pack("<BB", _KIND_TAGS[type(layer)], len(fields))
        out += struct.pack(f"<{len(fields)}I", *fields)
    return bytes(out)


def spec_from_bytes(data, class_count):
    off = 0
    c, h, w = struct.unpack_from("<3I", data, off)
    off += 12
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    layers = []
    for _ in range(n_layers):
        tag, n_fields = struct.unpack_from("<BB", data, off)
        off += 2
        fields = struct.unpack_from(f"<{n_fields}I", data, off)
        off += 4 * n_fields
        layers.append(_layer_from_fields(tag, fields))
    if off != len(data):
        raise ValueError(f"spec block has {len(data) - off} trailing bytes")
    return NetworkSpec((c, h, w), tuple(layers), class_count)
