"""Dense tensor kernels and reverse-mode differentiation.

Everything operates on plain numpy arrays. Working precision is float32;
the same kernels run unchanged on float64 arrays, which is how gradient
checking gets its extra headroom. Layout for image tensors is NCHW,
row-major.
"""

import struct

import numpy as np

FLOAT = np.float32

DTNS_MAGIC = b"DTNS"


class ShapeError(ValueError):
    """Operands whose shapes cannot be combined."""


def as_tensor(data, dtype=FLOAT):
    return np.ascontiguousarray(data, dtype=dtype)


def conv_output_extent(size, kernel, stride, pad):
    """Output extent of a sliding window: floor((size + 2*pad - kernel)/stride) + 1."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"padding must be >= 0, got {pad}")
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"window {kernel} (stride {stride}, pad {pad}) does not fit input extent {size}"
        )
    return out


class ConvParams:
    """Stride/padding for a convolution; padding is symmetric zero-fill.

    Connectivity is always full: every output map reads every input map.
    """

    __slots__ = ("stride", "padding")

    def __init__(self, stride=1, padding=0):
        if stride < 1:
            raise ShapeError(f"stride must be >= 1, got {stride}")
        if padding < 0:
            raise ShapeError(f"padding must be >= 0, got {padding}")
        self.stride = stride
        self.padding = padding

    def __repr__(self):
        return f"ConvParams(stride={self.stride}, padding={self.padding})"


def _windows(x, kh, kw, stride, pad, fill=0.0):
    """Sliding windows of a padded NCHW tensor, shape (N, C, Ho, Wo, kh, kw).

    Returns a strided view plus the padded array it points into.
    """
    n, c, h, w = x.shape
    ho = conv_output_extent(h, kh, stride, pad)
    wo = conv_output_extent(w, kw, stride, pad)
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=fill)
    else:
        xp = x
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return view, xp


def conv2d(x, w, b, params=None):
    """Cross-correlation of x[N,C,H,W] with w[F,C,Kh,Kw] plus bias[F].

    No kernel flip; accumulation runs channel-major then kernel rows then
    columns, so results are reproducible bit for bit.
    """
    params = params or ConvParams()
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but weights expect {cw}")
    if b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} does not match {f} filters")
    view, _ = _windows(x, kh, kw, params.stride, params.padding)
    ho, wo = view.shape[2], view.shape[3]
    # one GEMM: (N*Ho*Wo, C*Kh*Kw) @ (C*Kh*Kw, F)
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, c * kh * kw).T
    out += b
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2).copy()


def _conv2d_backward(g, x, w, params):
    """Gradients of conv2d w.r.t. (input, weights, bias) given upstream g[N,F,Ho,Wo]."""
    stride, pad = params.stride, params.padding
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    view, _ = _windows(x, kh, kw, stride, pad)
    gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    dw = (gmat.T @ cols).reshape(f, c, kh, kw)
    db = gmat.sum(axis=0)
    dcols = (gmat @ w.reshape(f, c * kh * kw)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


class ArgmaxIndices:
    """Winner positions saved by maxpool2d, enough to route gradients back."""

    __slots__ = ("flat", "input_shape", "window", "stride", "pad")

    def __init__(self, flat, input_shape, window, stride, pad):
        self.flat = flat                # (N, C, Ho, Wo) indices into the padded plane
        self.input_shape = input_shape
        self.window = window
        self.stride = stride
        self.pad = pad


def maxpool2d(x, window, stride, pad=0):
    """Max over each window; ties go to the first row-major position.

    Returns (output, ArgmaxIndices). Padding cells are -inf and can never win.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-D tensor, got {x.shape}")
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    n, c, h, w = x.shape
    view, _ = _windows(x, window, window, stride, pad, fill=-np.inf)
    ho, wo = view.shape[2], view.shape[3]
    flatwin = view.reshape(n, c, ho, wo, window * window)
    arg = flatwin.argmax(axis=4)
    out = np.take_along_axis(flatwin, arg[..., None], axis=4)[..., 0]
    # convert window-local winners to positions in the padded plane
    oy = np.arange(ho)[:, None] * stride
    ox = np.arange(wo)[None, :] * stride
    wy, wx = arg // window, arg % window
    wp = w + 2 * pad
    flat = (oy[None, None] + wy) * wp + (ox[None, None] + wx)
    return np.ascontiguousarray(out), ArgmaxIndices(flat, x.shape, window, stride, pad)


def maxpool2d_backward(g, saved):
    """Scatter each upstream element onto its saved argmax position."""
    n, c, h, w = saved.input_shape
    pad = saved.pad
    hp, wp = h + 2 * pad, w + 2 * pad
    dxp = np.zeros((n, c, hp * wp), dtype=g.dtype)
    np.add.at(dxp, (np.arange(n)[:, None, None, None],
                    np.arange(c)[None, :, None, None],
                    saved.flat), g)
    dxp = dxp.reshape(n, c, hp, wp)
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


def relu(x):
    return np.maximum(x, 0)


def _relu_backward(g, x):
    # subgradient at exactly 0 is 0
    return g * (x > 0)


def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout. Returns (output, mask); mask is None in infer mode.

    Train mode zeroes each element with probability `rate` and scales
    survivors by 1/(1-rate) so the expectation is preserved.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate)
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def concat_channels(inputs):
    """Stack NCHW tensors along the channel axis, in argument order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    base = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(
                "concat_channels inputs disagree on N/H/W: "
                + ", ".join(str(t.shape) for t in inputs)
            )
    return np.concatenate(inputs, axis=1)


def fully_connected(x, w, b):
    """x[N,D] @ w[T,D]^T + b[T]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"fully_connected expects 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight width {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    return x @ w.T + b


def _fully_connected_backward(g, x, w):
    return g @ w, g.T @ x, g.sum(axis=0)


def softmax(logits):
    """Row-wise softmax with max-subtraction for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects [N,T] logits, got {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean negative log probability of the true class."""
    labels = np.asarray(labels)
    n, t = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= t:
        raise ValueError(f"labels must lie in [0, {t}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    picked = probs[np.arange(n), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """In-place momentum SGD: v <- mu*v - lr*g; p <- p + v.

    `params`, `grads`, `velocity` are dicts keyed by parameter name;
    velocity entries are created lazily. With momentum 0 this is plain SGD.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter "
                             f"{name} shape {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            velocity[name] = v
        v *= p.dtype.type(momentum)
        v -= p.dtype.type(lr) * g
        p += v
    return params


# ---------------------------------------------------------------------------
# reverse-mode tape

class Node:
    """A value produced during a taped forward pass."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None


class Tape:
    """Ordered record of forward operations, replayed in reverse for gradients.

    Single use: after backward() the tape refuses a second replay, because
    the saved auxiliaries belong to exactly one forward pass.
    """

    def __init__(self):
        self._records = []      # (op name, inputs, output node, backward fn)
        self._consumed = False
        self.params = {}        # name -> Node, registered by the network runner
        self.output = None      # terminal node of the forward pass

    def record(self, name, inputs, output, backward):
        self._records.append((name, inputs, output, backward))
        self.output = output
        return output

    def find_producer(self, node):
        for rec in reversed(self._records):
            if rec[2] is node:
                return rec
        return None

    def backward(self, seed=1.0):
        """Seed the terminal node and propagate gradients in reverse order."""
        if self._consumed:
            raise RuntimeError("tape already replayed; run a new forward pass first")
        if not self._records:
            raise RuntimeError("tape is empty; nothing was recorded")
        self._consumed = True
        out = self.output
        seed = np.asarray(seed, dtype=out.value.dtype)
        if seed.shape not in ((), out.value.shape):
            raise ShapeError(f"seed gradient shape {seed.shape} does not match "
                             f"output shape {out.value.shape}")
        out.grad = np.broadcast_to(seed, out.value.shape).astype(out.value.dtype)
        for name, inputs, output, backward in reversed(self._records):
            g = output.grad
            if g is None:
                continue
            for node, contrib in backward(g):
                if node.grad is None:
                    node.grad = contrib.copy()
                else:
                    node.grad += contrib

    def param_grads(self):
        """Gradient per registered parameter; zeros for parameters off the loss path."""
        out = {}
        for name, node in self.params.items():
            if node.grad is None:
                out[name] = np.zeros_like(node.value)
            else:
                out[name] = node.grad
        return out


def conv2d_taped(tape, x, w, b, params=None):
    params = params or ConvParams()
    out = Node(conv2d(x.value, w.value, b.value, params))

    def backward(g):
        dx, dw, db = _conv2d_backward(g, x.value, w.value, params)
        return [(x, dx), (w, dw), (b, db)]

    return tape.record("conv2d", (x, w, b), out, backward)


def maxpool2d_taped(tape, x, window, stride, pad=0):
    y, saved = maxpool2d(x.value, window, stride, pad)
    out = Node(y)

    def backward(g):
        return [(x, maxpool2d_backward(g, saved))]

    return tape.record("maxpool2d", (x,), out, backward)


def relu_taped(tape, x):
    out = Node(relu(x.value))

    def backward(g):
        return [(x, _relu_backward(g, x.value))]

    return tape.record("relu", (x,), out, backward)


def dropout_taped(tape, x, rate, rng):
    y, mask = dropout(x.value, rate, "train", rng)
    out = Node(y)

    def backward(g):
        return [(x, g if mask is None else g * mask)]

    return tape.record("dropout", (x,), out, backward)


def concat_channels_taped(tape, xs):
    out = Node(concat_channels([x.value for x in xs]))
    bounds = np.cumsum([0] + [x.value.shape[1] for x in xs])

    def backward(g):
        return [(x, g[:, bounds[i]:bounds[i + 1]]) for i, x in enumerate(xs)]

    return tape.record("concat", tuple(xs), out, backward)


def fully_connected_taped(tape, x, w, b):
    out = Node(fully_connected(x.value, w.value, b.value))

    def backward(g):
        dx, dw, db = _fully_connected_backward(g, x.value, w.value)
        return [(x, dx), (w, dw), (b, db)]

    return tape.record("fully_connected", (x, w, b), out, backward)


def reshape_taped(tape, x, shape):
    out = Node(x.value.reshape(shape))

    def backward(g):
        return [(x, g.reshape(x.value.shape))]

    return tape.record("reshape", (x,), out, backward)


def mean_pool_taped(tape, x):
    """Global average pooling: NCHW -> NC."""
    n, c, h, w = x.value.shape
    out = Node(x.value.mean(axis=(2, 3)))

    def backward(g):
        dx = np.broadcast_to(g[:, :, None, None] / g.dtype.type(h * w), x.value.shape)
        return [(x, np.ascontiguousarray(dx))]

    return tape.record("mean_pool", (x,), out, backward)


def softmax_taped(tape, x):
    p = softmax(x.value)
    out = Node(p)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return [(x, p * (g - dot))]

    return tape.record("softmax", (x,), out, backward)


def cross_entropy_taped(tape, probs, labels):
    """Scalar loss node over a probabilities node.

    When `probs` was produced by a softmax on this tape, the backward pass
    is fused onto the softmax's input, giving the exact (p - onehot)/N
    gradient on the logits.
    """
    labels = np.asarray(labels)
    loss = cross_entropy(probs.value, labels)
    out = Node(np.asarray(loss, dtype=probs.value.dtype))
    n, t = probs.value.shape
    producer = tape.find_producer(probs)

    if producer is not None and producer[0] == "softmax":
        logits_node = producer[1][0]
        p = probs.value

        def backward(g):
            d = p.copy()
            d[np.arange(n), labels] -= 1
            d *= g / p.dtype.type(n)
            return [(logits_node, d)]

        return tape.record("cross_entropy(fused)", (logits_node,), out, backward)

    def backward(g):
        p = probs.value
        dp = np.zeros_like(p)
        picked = np.maximum(p[np.arange(n), labels], np.finfo(p.dtype).tiny)
        dp[np.arange(n), labels] = -g / (p.dtype.type(n) * picked)
        return [(probs, dp)]

    return tape.record("cross_entropy", (probs,), out, backward)


# ---------------------------------------------------------------------------
# gradient checking

class GradCheckReport:
    __slots__ = ("max_rel_error", "checked", "tolerance")

    def __init__(self, max_rel_error, checked, tolerance):
        self.max_rel_error = max_rel_error
        self.checked = checked
        self.tolerance = tolerance

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def __repr__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"checked={self.checked}, tolerance={self.tolerance:g}, {verdict})")


def grad_check(loss_fn, grads_fn, params, epsilon=1e-5, tolerance=1e-4,
               min_checks=100, rng=None):
    """Compare analytic gradients against central finite differences.

    loss_fn(params) -> float; grads_fn(params) -> dict of analytic gradients.
    Checks a random subset of at least `min_checks` parameter coordinates
    (all of them when the model is smaller than that). Run this on float64
    parameters; float32 has too little headroom for epsilon = 1e-5.
    """
    rng = rng or np.random.default_rng(0)
    analytic = grads_fn(params)
    coords = []
    for name in sorted(params):
        size = params[name].size
        total = sum(params[k].size for k in params)
        want = max(1, round(min_checks * size / total))
        idx = rng.choice(size, size=min(size, want), replace=False)
        coords.extend((name, int(i)) for i in idx)
    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        keep = flat[i]
        flat[i] = keep + epsilon
        up = loss_fn(params)
        flat[i] = keep - epsilon
        down = loss_fn(params)
        flat[i] = keep
        numeric = (up - down) / (2 * epsilon)
        a = float(analytic[name].reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return GradCheckReport(worst, len(coords), tolerance)


# ---------------------------------------------------------------------------
# raw tensor dumps

def write_dtns(path, array):
    """Dump an array: magic "DTNS", u8 rank, u32 LE extents, f32 LE values."""
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim > 255:
        raise ShapeError("rank exceeds the u8 rank field")
    with open(path, "wb") as f:
        f.write(DTNS_MAGIC)
        f.write(struct.pack("<B", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def read_dtns(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DTNS_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {DTNS_MAGIC!r}")
        rank = struct.unpack("<B", f.read(1))[0]
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
        return data.reshape(shape).astype(FLOAT)
