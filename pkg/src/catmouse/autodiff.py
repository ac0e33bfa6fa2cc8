"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

The operator set is exactly what the detector, the patch pipeline, and the
loss terms need: convolution, a linear layer, pointwise nonlinearities,
elementwise arithmetic, reductions, bilinear warping under a homography,
total variation, patch compositing, and a few fused loss primitives with
hand-derived backward rules.

Recording model: a :class:`Tape` is a context manager. While a tape is
active, every operation whose inputs require gradients appends its output
to the tape in creation order, which is a topological order by
construction. ``tape.backward(root)`` walks the record in reverse and
accumulates gradients into the participating leaf tensors. Code that runs
no tape (evaluation, decoding) pays no recording cost.

Production runs use float32; gradient-check tests flip the default to
float64 via :func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32

# stack of active tapes; ops record on the innermost one
_TAPES: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense n-dimensional array with optional gradient tracking.

    ``requires_grad=True`` marks a trainable leaf. Tensors produced by
    operations inherit the flag from their inputs and carry a node id on
    the tape that recorded them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flags})"

    # sugar for the handful of binary ops used in loss code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Tape:
    """Ordered record of the operations of one forward pass.

    Node ids are positions in the record; every operation's inputs either
    are leaves or appear earlier in the list, so reverse iteration is a
    valid reverse-mode schedule.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._backwards: list[Callable[[np.ndarray, list], None]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, backward: Callable[[np.ndarray, list], None]) -> None:
        out._node_id = len(self._nodes)
        self._nodes.append(out)
        self._backwards.append(backward)

    def backward(self, root: Tensor) -> None:
        """Populate gradients of all participating leaves by reverse
        accumulation from a scalar root.

        Leaf gradients accumulate across calls until ``zero_grad``;
        per-call intermediate gradients are scratch storage local to this
        invocation.
        """
        if root.data.shape != ():
            raise ValueError(f"backward root must be a scalar, got shape {root.data.shape}")
        if root._node_id is None or root._node_id >= len(self._nodes) or self._nodes[root._node_id] is not root:
            raise ValueError("backward root was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[root._node_id] = np.ones((), dtype=root.data.dtype)
        for i in range(root._node_id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            self._backwards[i](g, grads)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _accum(t: Tensor, g: np.ndarray, grads: list) -> None:
    """Route a gradient contribution to a tape node or a leaf.

    The first contribution is copied: closures may hand the same buffer to
    several parents, and later in-place accumulation must not alias it.
    """
    if t._node_id is not None:
        if grads[t._node_id] is None:
            grads[t._node_id] = np.array(g, dtype=t.data.dtype)
        else:
            grads[t._node_id] += g
    elif t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; record it if a tape is active and any input
    participates in differentiation."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node_id = None
    tape = _active_tape()
    needs = any(t.requires_grad or t._node_id is not None for t in inputs)
    out.requires_grad = needs
    if tape is not None and needs:
        tape._record(out, backward)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} do not match")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g, grads):
        _accum(a, g, grads)
        _accum(b, g, grads)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g, grads):
        _accum(a, g, grads)
        _accum(b, -g, grads)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g, grads):
        _accum(a, g * b.data, grads)
        _accum(b, g * a.data, grads)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def backward(g, grads):
        _accum(a, g * c, grads)

    return _make(a.data * np.asarray(c, dtype=a.data.dtype), (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar constant."""

    def backward(g, grads):
        _accum(a, g, grads)

    return _make(a.data + np.asarray(c, dtype=a.data.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data >= 0

    def backward(g, grads):
        _accum(x, g * np.where(pos, 1.0, slope).astype(x.data.dtype), grads)

    return _make(np.where(pos, x.data, x.data * slope).astype(x.data.dtype, copy=False), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # stable in both tails
    z = x.data
    out = np.empty_like(z)
    p = z >= 0
    out[p] = 1.0 / (1.0 + np.exp(-z[p]))
    ez = np.exp(z[~p])
    out[~p] = ez / (1.0 + ez)

    def backward(g, grads):
        _accum(x, g * out * (1.0 - out), grads)

    return _make(out, (x,), backward)


def reduce_sum(x: Tensor) -> Tensor:
    def backward(g, grads):
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False), grads)

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ValueError("reduce_mean of an empty tensor")

    def backward(g, grads):
        _accum(x, np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=False), grads)

    return _make(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x [B,N] @ weight [M,N]^T (+ bias [M])``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            f"linear: incompatible shapes {x.data.shape} and {weight.data.shape}"
        )
    out_data = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ValueError(f"linear: bias shape {bias.data.shape} does not match {weight.data.shape[0]} outputs")
        out_data = out_data + bias.data

    def backward(g, grads):
        _accum(x, g @ weight.data, grads)
        _accum(weight, g.T @ x.data, grads)
        if bias is not None:
            _accum(bias, g.sum(axis=0), grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, inputs, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    target = tuple(shape)
    if int(np.prod(target)) != x.data.size:
        raise ValueError(f"reshape: cannot view {x.data.shape} as {target}")

    def backward(g, grads):
        _accum(x, g.reshape(x.data.shape), grads)

    return _make(x.data.reshape(target), (x,), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ValueError("stack of an empty sequence")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise ValueError(f"stack: shapes {shape} and {t.data.shape} do not match")
    ts = list(tensors)

    def backward(g, grads):
        for i, t in enumerate(ts):
            _accum(t, g[i], grads)

    return _make(np.stack([t.data for t in ts]), ts, backward)


def gather(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Pick elements of the flattened tensor; gradients scatter-add back."""
    idx = np.asarray(flat_indices, dtype=np.int64)

    def backward(g, grads):
        gx = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(gx, idx, g)
        _accum(x, gx.reshape(x.data.shape), grads)

    return _make(x.data.reshape(-1)[idx], (x,), backward)


def gather_max(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Maximum over a set of flat indices as a scalar.

    The subgradient flows into the first index attaining the maximum
    (row-major order), which keeps backward deterministic at ties.
    """
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("gather_max over an empty index set")
    flat = x.data.reshape(-1)
    vals = flat[idx]
    win = int(idx[int(np.argmax(vals))])

    def backward(g, grads):
        gx = np.zeros(x.data.size, dtype=x.data.dtype)
        gx[win] = g
        _accum(x, gx.reshape(x.data.shape), grads)

    return _make(np.asarray(vals.max(), dtype=x.data.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2d cross-correlation.

    ``x [B,Cin,H,W]``, ``kernel [Cout,Cin,kh,kw]`` -> ``[B,Cout,H',W']``
    with ``H' = (H + 2 padding - kh) // stride + 1``.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4d input and kernel, got {x.data.shape} and {kernel.data.shape}")
    B, Cin, H, W = x.data.shape
    Cout, Ck, kh, kw = kernel.data.shape
    if Ck != Cin:
        raise ValueError(f"conv2d: input has {Cin} channels but kernel expects {Ck}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    if bias is not None and bias.data.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} does not match {Cout} output channels")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    # im2col: [B, Cin, Ho, Wo, kh, kw] view, flattened for one matmul
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    wflat = kernel.data.reshape(Cout, Cin * kh * kw)
    out_flat = cols @ wflat.T
    if bias is not None:
        out_flat = out_flat + bias.data
    out_data = out_flat.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def backward(g, grads):
        g_flat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        if kernel.requires_grad or kernel._node_id is not None:
            _accum(kernel, (g_flat.T @ cols).reshape(kernel.data.shape), grads)
        if bias is not None and (bias.requires_grad or bias._node_id is not None):
            _accum(bias, g_flat.sum(axis=0), grads)
        if x.requires_grad or x._node_id is not None:
            gcols = g_flat @ wflat  # [B*Ho*Wo, Cin*kh*kw]
            gcols = gcols.reshape(B, Ho, Wo, Cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((B, Cin, H + 2 * padding, W + 2 * padding), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, :, i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + H, padding : padding + W]
            _accum(x, gxp, grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_data, inputs, backward)


# ---------------------------------------------------------------------------
# warping and compositing


def _warp_weights(homography: np.ndarray, H: int, W: int, out_h: int, out_w: int):
    """Inverse-map the output grid and precompute bilinear taps.

    Coordinates live at pixel centers: x is the column index, y the row.
    The homography maps source pixel coordinates to output coordinates, so
    sampling inverts it. Returns clipped integer taps, their weights (zero
    for taps outside the source), and the inside mask.
    """
    Hm = np.asarray(homography, dtype=np.float64)
    if Hm.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {Hm.shape}")
    det = np.linalg.det(Hm)
    if abs(det) <= 1e-9:
        raise ValueError(f"homography is singular (|det| = {abs(det):.3e})")
    inv = np.linalg.inv(Hm)

    ys, xs = np.meshgrid(np.arange(out_h, dtype=np.float64), np.arange(out_w, dtype=np.float64), indexing="ij")
    ones = np.ones_like(xs)
    src = inv @ np.stack([xs.ravel(), ys.ravel(), ones.ravel()])
    w = src[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = src[0] / w
        sy = src[1] / w
    bad = ~np.isfinite(sx) | ~np.isfinite(sy)
    sx[bad] = -1.0
    sy[bad] = -1.0

    inside = (sx >= 0.0) & (sx <= W - 1) & (sy >= 0.0) & (sy <= H - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(yi, xi, wt):
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        return np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), np.where(valid & inside, wt, 0.0)

    taps = [
        tap(y0, x0, (1 - fy) * (1 - fx)),
        tap(y0, x1, (1 - fy) * fx),
        tap(y1, x0, fy * (1 - fx)),
        tap(y1, x1, fy * fx),
    ]
    return taps, inside.reshape(out_h, out_w)


def bilinear_warp(image: Tensor, homography, out_h: int, out_w: int) -> tuple[Tensor, np.ndarray]:
    """Projective warp of ``image [C,H,W]`` by inverse-mapped bilinear
    sampling.

    Returns the warped ``[C,out_h,out_w]`` tensor and a float mask that is
    1 where the inverse-mapped sample point lies inside the source image;
    out-of-bounds samples contribute 0. Gradients flow to the image pixels
    only, never to the homography.
    """
    if image.data.ndim != 3:
        raise ValueError(f"bilinear_warp expects [C,H,W], got {image.data.shape}")
    C, H, W = image.data.shape
    taps, inside = _warp_weights(homography, H, W, out_h, out_w)
    dt = image.data.dtype
    img = image.data
    out = np.zeros((C, out_h * out_w), dtype=dt)
    for yi, xi, wt in taps:
        out += img[:, yi, xi] * wt.astype(dt)
    out_data = out.reshape(C, out_h, out_w)

    def backward(g, grads):
        gflat = g.reshape(C, out_h * out_w)
        gimg = np.zeros_like(img)
        for yi, xi, wt in taps:
            contrib = gflat * wt.astype(dt)
            for c in range(C):
                np.add.at(gimg[c], (yi, xi), contrib[c])
        _accum(image, gimg, grads)

    return _make(out_data, (image,), backward), inside.astype(dt)


def composite_patch(image: Tensor, patch: Tensor, mask: np.ndarray, top: int, left: int) -> Tensor:
    """Blend a warped patch into an image at integer pixel ``(top, left)``.

    ``image [C,H,W]``, ``patch [C,s,s]``, ``mask [s,s]`` in [0,1]; inside
    the paste rectangle the result is ``image*(1-mask) + patch*mask``. The
    rectangle is clipped to the image; fully off-image pastes are no-ops.
    Differentiable with respect to both image and patch pixels.
    """
    C, H, W = image.data.shape
    Cp, sh, sw = patch.data.shape
    if Cp != C:
        raise ValueError(f"composite_patch: channel mismatch {C} vs {Cp}")
    if mask.shape != (sh, sw):
        raise ValueError(f"composite_patch: mask shape {mask.shape} does not match patch {patch.data.shape}")

    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + sh, H), min(left + sw, W)
    if y0 >= y1 or x0 >= x1:
        def backward_noop(g, grads):
            _accum(image, g, grads)
        return _make(image.data.copy(), (image, patch), backward_noop)

    py0, px0 = y0 - top, x0 - left
    m = mask[py0 : py0 + (y1 - y0), px0 : px0 + (x1 - x0)].astype(image.data.dtype)
    out_data = image.data.copy()
    out_data[:, y0:y1, x0:x1] = image.data[:, y0:y1, x0:x1] * (1.0 - m) + patch.data[:, py0 : py0 + (y1 - y0), px0 : px0 + (x1 - x0)] * m

    def backward(g, grads):
        if image.requires_grad or image._node_id is not None:
            gi = g.copy()
            gi[:, y0:y1, x0:x1] *= 1.0 - m
            _accum(image, gi, grads)
        if patch.requires_grad or patch._node_id is not None:
            gp = np.zeros_like(patch.data)
            gp[:, py0 : py0 + (y1 - y0), px0 : px0 + (x1 - x0)] = g[:, y0:y1, x0:x1] * m
            _accum(patch, gp, grads)

    return _make(out_data, (image, patch), backward)


def total_variation(image: Tensor) -> Tensor:
    """Anisotropic total variation: mean absolute difference over all
    horizontally and vertically adjacent pixel pairs, all channels.

    Averaging over the pair count makes the scale resolution-independent.
    Ties contribute a zero subgradient.
    """
    if image.data.ndim != 3:
        raise ValueError(f"total_variation expects [C,H,W], got {image.data.shape}")
    C, H, W = image.data.shape
    n_pairs = C * (H * (W - 1) + (H - 1) * W)
    if n_pairs == 0:
        def backward_zero(g, grads):
            _accum(image, np.zeros_like(image.data), grads)
        return _make(np.asarray(0.0, dtype=image.data.dtype), (image,), backward_zero)

    dh = image.data[:, :, 1:] - image.data[:, :, :-1]
    dv = image.data[:, 1:, :] - image.data[:, :-1, :]
    tv = (np.abs(dh).sum() + np.abs(dv).sum()) / n_pairs

    def backward(g, grads):
        gi = np.zeros_like(image.data)
        sh = np.sign(dh) * (g / n_pairs)
        sv = np.sign(dv) * (g / n_pairs)
        gi[:, :, 1:] += sh
        gi[:, :, :-1] -= sh
        gi[:, 1:, :] += sv
        gi[:, :-1, :] -= sv
        _accum(image, gi.astype(image.data.dtype, copy=False), grads)

    return _make(np.asarray(tv, dtype=image.data.dtype), (image,), backward)


# ---------------------------------------------------------------------------
# fused loss primitives


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ValueError(f"bce_with_logits: target shape {y.shape} does not match logits {logits.data.shape}")
    z = logits.data
    out_data = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g, grads):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        _accum(logits, g * (p - y), grads)

    return _make(out_data, (logits,), backward)


def smooth_l1(pred: Tensor, targets: np.ndarray, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber) against constant targets."""
    t = np.asarray(targets, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise ValueError(f"smooth_l1: target shape {t.shape} does not match prediction {pred.data.shape}")
    d = pred.data - t
    ad = np.abs(d)
    out_data = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta).astype(pred.data.dtype, copy=False)

    def backward(g, grads):
        _accum(pred, g * np.clip(d / beta, -1.0, 1.0).astype(pred.data.dtype, copy=False), grads)

    return _make(out_data, (pred,), backward)


def out_of_range_sq(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Elementwise squared distance to the [lo, hi] interval."""
    below = np.minimum(x.data - lo, 0.0)
    above = np.maximum(x.data - hi, 0.0)
    out_data = below * below + above * above

    def backward(g, grads):
        _accum(x, g * 2.0 * (below + above), grads)

    return _make(out_data, (x,), backward)
