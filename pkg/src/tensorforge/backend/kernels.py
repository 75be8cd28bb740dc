"""Reference CPU kernels.

All kernels take logical numpy views (pad lanes already stripped by the caller)
and write results into ``out`` arrays supplied by the caller. Inner arithmetic
runs in float64; results are rounded once when stored.
"""

from __future__ import annotations

import numpy as np

from ..errors import ArgumentError, LabelError, ShapeError
from .base import AUTO, GENERAL_IM2COL, SMALL_FEATURE_DIRECT, ConvDescriptor

ACC = np.float64

DEFAULT_SMALL_FEATURE_THRESHOLD = 64


def _acc(a):
    return np.asarray(a, dtype=ACC)


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# gemm
# ---------------------------------------------------------------------------

def gemm(a, b, out, transpose_a=False, transpose_b=False, bias=None):
    _require(a.ndim == 2 and b.ndim == 2, "gemm operands must be 2-D")
    a2 = _acc(a).T if transpose_a else _acc(a)
    b2 = _acc(b).T if transpose_b else _acc(b)
    _require(a2.shape[1] == b2.shape[0],
             f"gemm inner dimensions differ: {a2.shape} x {b2.shape}")
    _require(out.shape == (a2.shape[0], b2.shape[1]),
             f"gemm output shape {out.shape} != {(a2.shape[0], b2.shape[1])}")
    c = a2 @ b2
    if bias is not None:
        _require(bias.shape == (c.shape[1],), "gemm bias length mismatch")
        c += _acc(bias)
    out[...] = c


# ---------------------------------------------------------------------------
# convolution (NHWC activations, [out_c, kh, kw, in_c] filters)
# ---------------------------------------------------------------------------

def conv_output_shape(x_shape, desc: ConvDescriptor):
    _require(len(x_shape) == 4, f"conv input must be NHWC 4-D, got {tuple(x_shape)}")
    _require(min(desc.kernel_h, desc.kernel_w) > 0, "conv kernel extent must be positive")
    _require(min(desc.stride_h, desc.stride_w) > 0, "conv stride must be positive")
    _require(min(desc.pad_h, desc.pad_w) >= 0, "conv padding must be non-negative")
    n, h, w, c = x_shape
    _require(c == desc.in_channels,
             f"conv input has {c} channels, descriptor expects {desc.in_channels}")
    oh, ow = desc.output_hw(h, w)
    return (n, oh, ow, desc.out_channels)


def _check_filter(w_shape, desc):
    _require(tuple(w_shape) == desc.filter_shape,
             f"conv filter shape {tuple(w_shape)} != {desc.filter_shape}")


def choose_conv_algorithm(desc: ConvDescriptor, out_hw: int, threshold: int) -> str:
    if desc.algorithm != AUTO:
        return desc.algorithm
    return SMALL_FEATURE_DIRECT if out_hw <= threshold else GENERAL_IM2COL


def _padded(x, ph, pw, channels=None):
    n, h, w, c = x.shape
    c_out = c if channels is None else channels
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c_out), dtype=ACC)
    xp[:, ph:ph + h, pw:pw + w, :c] = x
    return xp


def _window(xp, kh, kw, oh, ow, sh, sw):
    return xp[:, kh:kh + sh * (oh - 1) + 1:sh, kw:kw + sw * (ow - 1) + 1:sw, :]


def im2col(x, desc: ConvDescriptor, oh, ow):
    """Unfold patches into rows of length kh*kw*c (kh-major, channel-minor)."""
    xp = _padded(x, desc.pad_h, desc.pad_w)
    n, c = x.shape[0], x.shape[3]
    cols = np.empty((n, oh, ow, desc.kernel_h, desc.kernel_w, c), dtype=ACC)
    for i in range(desc.kernel_h):
        for j in range(desc.kernel_w):
            cols[:, :, :, i, j, :] = _window(xp, i, j, oh, ow, desc.stride_h, desc.stride_w)
    return cols.reshape(n * oh * ow, desc.kernel_h * desc.kernel_w * c)


def _conv_im2col(x, w, desc, oh, ow):
    cols = im2col(x, desc, oh, ow)
    wm = _acc(w).reshape(desc.out_channels, -1)
    return (cols @ wm.T).reshape(x.shape[0], oh, ow, desc.out_channels)


def _conv_direct(x, w, desc, oh, ow):
    # Shifted-window accumulation; channel axis padded to a multiple of 4 and innermost.
    c = x.shape[3]
    cp = -(-c // 4) * 4
    xp = _padded(x, desc.pad_h, desc.pad_w, channels=cp)
    wp = np.zeros(desc.filter_shape[:3] + (cp,), dtype=ACC)
    wp[..., :c] = w
    n = x.shape[0]
    y = np.zeros((n * oh * ow, desc.out_channels), dtype=ACC)
    for i in range(desc.kernel_h):
        for j in range(desc.kernel_w):
            patch = _window(xp, i, j, oh, ow, desc.stride_h, desc.stride_w).reshape(-1, cp)
            y += patch @ wp[:, i, j, :].T
    return y.reshape(n, oh, ow, desc.out_channels)


def conv2d_forward(x, w, desc: ConvDescriptor, out, bias=None,
                   threshold: int = DEFAULT_SMALL_FEATURE_THRESHOLD):
    oshape = conv_output_shape(x.shape, desc)
    _check_filter(w.shape, desc)
    _require(tuple(out.shape) == oshape, f"conv output shape {tuple(out.shape)} != {oshape}")
    _, oh, ow, _ = oshape
    algo = choose_conv_algorithm(desc, oh * ow, threshold)
    if algo == SMALL_FEATURE_DIRECT:
        y = _conv_direct(x, w, desc, oh, ow)
    elif algo == GENERAL_IM2COL:
        y = _conv_im2col(x, w, desc, oh, ow)
    else:
        raise ArgumentError(f"unknown conv algorithm {algo!r}")
    if bias is not None:
        _require(bias.shape == (desc.out_channels,), "conv bias length mismatch")
        y += _acc(bias)
    out[...] = y
    return algo


def conv2d_backward_data(dy, w, desc: ConvDescriptor, out):
    _require(out.ndim == 4, "conv dx must be NHWC 4-D")
    oshape = conv_output_shape(out.shape, desc)
    _check_filter(w.shape, desc)
    _require(tuple(dy.shape) == oshape, f"conv dy shape {tuple(dy.shape)} != {oshape}")
    n, h, wd, c = out.shape
    _, oh, ow, oc = oshape
    sh, sw = desc.stride_h, desc.stride_w
    dxp = np.zeros((n, h + 2 * desc.pad_h, wd + 2 * desc.pad_w, c), dtype=ACC)
    dym = _acc(dy).reshape(-1, oc)
    wa = _acc(w)
    for i in range(desc.kernel_h):
        for j in range(desc.kernel_w):
            contrib = (dym @ wa[:, i, j, :]).reshape(n, oh, ow, c)
            dxp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] += contrib
    out[...] = dxp[:, desc.pad_h:desc.pad_h + h, desc.pad_w:desc.pad_w + wd, :]


def conv2d_backward_filter(x, dy, desc: ConvDescriptor, out):
    oshape = conv_output_shape(x.shape, desc)
    _check_filter(out.shape, desc)
    _require(tuple(dy.shape) == oshape, f"conv dy shape {tuple(dy.shape)} != {oshape}")
    _, oh, ow, oc = oshape
    xp = _padded(x, desc.pad_h, desc.pad_w)
    dym = _acc(dy).reshape(-1, oc)
    c = x.shape[3]
    dw = np.empty(desc.filter_shape, dtype=ACC)
    for i in range(desc.kernel_h):
        for j in range(desc.kernel_w):
            patch = _window(xp, i, j, oh, ow, desc.stride_h, desc.stride_w).reshape(-1, c)
            dw[:, i, j, :] = dym.T @ patch
    out[...] = dw


# ---------------------------------------------------------------------------
# batch normalization (statistics over every axis except the last)
# ---------------------------------------------------------------------------

def _bn_axes(x):
    _require(x.ndim in (2, 4), f"batchnorm input must be 2-D or 4-D, got {x.ndim}-D")
    return tuple(range(x.ndim - 1))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, out,
                      saved_mean, saved_inv_std, training, eps, momentum):
    axes = _bn_axes(x)
    c = x.shape[-1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                      ("running_var", running_var), ("saved_mean", saved_mean),
                      ("saved_inv_std", saved_inv_std)):
        _require(arr.shape == (c,), f"batchnorm {name} has shape {arr.shape}, expected ({c},)")
    _require(out.shape == x.shape, "batchnorm output shape mismatch")
    if eps <= 0:
        raise ArgumentError("batchnorm eps must be positive")
    if not 0.0 <= momentum <= 1.0:
        raise ArgumentError("batchnorm momentum must lie in [0, 1]")
    xa = _acc(x)
    if training:
        mean = xa.mean(axis=axes)
        var = np.square(xa - mean).mean(axis=axes)
        running_mean[...] = (1.0 - momentum) * _acc(running_mean) + momentum * mean
        running_var[...] = (1.0 - momentum) * _acc(running_var) + momentum * var
    else:
        mean = _acc(running_mean)
        var = _acc(running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    out[...] = _acc(gamma) * (xa - mean) * inv_std + _acc(beta)
    saved_mean[...] = mean
    saved_inv_std[...] = inv_std


def batchnorm_backward(dy, x, gamma, saved_mean, saved_inv_std, dx, dgamma, dbeta):
    axes = _bn_axes(x)
    c = x.shape[-1]
    _require(dy.shape == x.shape and dx.shape == x.shape, "batchnorm backward shape mismatch")
    for arr in (gamma, saved_mean, saved_inv_std, dgamma, dbeta):
        _require(arr.shape == (c,), "batchnorm backward per-channel shape mismatch")
    m = x.size // c
    inv_std = _acc(saved_inv_std)
    xhat = (_acc(x) - _acc(saved_mean)) * inv_std
    dya = _acc(dy)
    sum_dy = dya.sum(axis=axes)
    sum_dy_xhat = (dya * xhat).sum(axis=axes)
    dx[...] = (_acc(gamma) * inv_std / m) * (m * dya - sum_dy - xhat * sum_dy_xhat)
    dgamma[...] = sum_dy_xhat
    dbeta[...] = sum_dy


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def adaptive_bounds(extent: int, target: int):
    """[floor(i*in/out), ceil((i+1)*in/out)) windows."""
    return [((i * extent) // target, -(-((i + 1) * extent) // target)) for i in range(target)]


def pool_output_hw(h, w, window, stride, pad, adaptive_target=None):
    if adaptive_target is not None:
        _require(adaptive_target >= 1, "adaptive pooling target must be positive")
        _require(adaptive_target <= min(h, w),
                 f"adaptive target {adaptive_target} exceeds input extent {h}x{w}")
        return adaptive_target, adaptive_target
    wh, ww = window
    sh, sw = stride
    _require(min(wh, ww, sh, sw) > 0, "pool window and stride must be positive")
    _require(0 <= pad < min(wh, ww), "pool padding must be smaller than the window")
    _require(h + 2 * pad >= wh and w + 2 * pad >= ww, "pool window does not fit the input")
    return (h + 2 * pad - wh) // sh + 1, (w + 2 * pad - ww) // sw + 1


def maxpool2d_forward(x, out, argmax, window=(2, 2), stride=(2, 2), pad=0, adaptive_target=None):
    _require(x.ndim == 4, "max pool input must be NHWC 4-D")
    n, h, w, c = x.shape
    oh, ow = pool_output_hw(h, w, window, stride, pad, adaptive_target)
    _require(tuple(out.shape) == (n, oh, ow, c), "max pool output shape mismatch")
    _require(tuple(argmax.shape) == (n, oh, ow, c), "max pool argmax shape mismatch")
    # flat logical NHWC index of every input element
    flat = np.arange(x.size, dtype=np.int64).reshape(x.shape)
    if adaptive_target is not None:
        ys = np.empty((n, oh, ow, c), dtype=x.dtype)
        idx = np.empty((n, oh, ow, c), dtype=np.int64)
        for i, (h0, h1) in enumerate(adaptive_bounds(h, oh)):
            for j, (w0, w1) in enumerate(adaptive_bounds(w, ow)):
                win = x[:, h0:h1, w0:w1, :].reshape(n, -1, c)
                k = np.argmax(win, axis=1)  # first occurrence on ties
                ys[:, i, j, :] = np.take_along_axis(win, k[:, None, :], axis=1)[:, 0, :]
                fwin = flat[:, h0:h1, w0:w1, :].reshape(n, -1, c)
                idx[:, i, j, :] = np.take_along_axis(fwin, k[:, None, :], axis=1)[:, 0, :]
        out[...] = ys
        argmax[...] = idx
        return
    wh, ww = window
    sh, sw = stride
    xp = np.full((n, h + 2 * pad, w + 2 * pad, c), -np.inf, dtype=ACC)
    xp[:, pad:pad + h, pad:pad + w, :] = x
    fp = np.full(xp.shape, -1, dtype=np.int64)
    fp[:, pad:pad + h, pad:pad + w, :] = flat
    best = np.full((n, oh, ow, c), -np.inf, dtype=ACC)
    best_idx = np.full((n, oh, ow, c), -1, dtype=np.int64)
    # row-major scan over the window: strict '>' keeps the lowest flat index on ties
    for i in range(wh):
        for j in range(ww):
            v = _window(xp, i, j, oh, ow, sh, sw)
            f = _window(fp, i, j, oh, ow, sh, sw)
            better = v > best
            best = np.where(better, v, best)
            best_idx = np.where(better, f, best_idx)
    out[...] = best
    argmax[...] = best_idx


def maxpool2d_backward(dy, argmax, out):
    _require(dy.shape == argmax.shape, "max pool backward: dy and argmax shapes differ")
    idx = np.asarray(argmax, dtype=np.int64).ravel()
    _require(idx.size == 0 or (idx.min() >= 0 and idx.max() < out.size),
             "max pool backward: argmax indices out of range for input shape")
    acc = np.bincount(idx, weights=_acc(dy).ravel(), minlength=out.size)
    out[...] = acc.reshape(out.shape)


# ---------------------------------------------------------------------------
# element-wise and reductions
# ---------------------------------------------------------------------------

UNARY_OPS = ("leaky_relu_fwd", "leaky_relu_bwd", "sigmoid_fwd", "sigmoid_bwd", "scale", "pix2float")


def elementwise_unary(op_code, x, out, aux=None, alpha=0.0):
    _require(out.shape == x.shape, f"{op_code}: output shape {out.shape} != input {x.shape}")
    if op_code in ("leaky_relu_bwd", "sigmoid_bwd"):
        if aux is None:
            raise ArgumentError(f"{op_code} needs the forward output as aux")
        _require(aux.shape == x.shape, f"{op_code}: aux shape mismatch")
    if op_code == "pix2float":
        if x.dtype != np.uint8:
            raise ArgumentError("pix2float expects a byte buffer")
        out[...] = x.astype(ACC) / 255.0
        return
    xa = _acc(x)
    if op_code == "leaky_relu_fwd":
        out[...] = np.where(xa > 0, xa, alpha * xa)
    elif op_code == "leaky_relu_bwd":
        # x is dy; aux is the forward output, whose sign matches the input's
        out[...] = xa * np.where(_acc(aux) > 0, 1.0, alpha)
    elif op_code == "sigmoid_fwd":
        out[...] = 0.5 * (1.0 + np.tanh(0.5 * xa))
    elif op_code == "sigmoid_bwd":
        y = _acc(aux)
        out[...] = xa * y * (1.0 - y)
    elif op_code == "scale":
        out[...] = alpha * xa
    else:
        raise ArgumentError(f"unknown unary op {op_code!r}")


def elementwise_binary(op_code, x1, x2, out):
    _require(x1.shape == x2.shape == out.shape,
             f"{op_code}: shapes differ {x1.shape}, {x2.shape} -> {out.shape}")
    if op_code == "add":
        out[...] = _acc(x1) + _acc(x2)
    elif op_code == "mul":
        out[...] = _acc(x1) * _acc(x2)
    else:
        raise ArgumentError(f"unknown binary op {op_code!r}")


def reduce_field_sum(x, out):
    _require(x.ndim in (2, 4), "reduce_field_sum expects [rows, C] or NHWC input")
    _require(out.shape == (x.shape[-1],), "reduce_field_sum output length mismatch")
    out[...] = _acc(x).reshape(-1, x.shape[-1]).sum(axis=0)


def softmax_crossentropy(logits, onehot, dlogits, check_labels=True):
    _require(logits.ndim == 2 and logits.shape == onehot.shape == dlogits.shape,
             "softmax cross-entropy expects equal [rows, C] logits, labels and gradient")
    y = _acc(onehot)
    if check_labels:
        ok = (np.count_nonzero(y, axis=1) == 1) & (y.sum(axis=1) == 1.0)
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise LabelError(f"label row {bad} is not one-hot")
    z = _acc(logits)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = z.shape[0]
    loss = float(-(y * logp).sum() / rows)
    dlogits[...] = (np.exp(logp) - y) / rows
    return loss


# ---------------------------------------------------------------------------
# optimizers and initialization
# ---------------------------------------------------------------------------

def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    _require(param.shape == grad.shape == m.shape == v.shape, "adam buffers differ in shape")
    if t < 1:
        raise ArgumentError("adam step count must be >= 1")
    g = _acc(grad)
    m_new = beta1 * _acc(m) + (1.0 - beta1) * g
    v_new = beta2 * _acc(v) + (1.0 - beta2) * g * g
    m[...] = m_new
    v[...] = v_new
    m_hat = _acc(m) / (1.0 - beta1 ** t)
    v_hat = _acc(v) / (1.0 - beta2 ** t)
    param[...] = _acc(param) - lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(param, grad, lr):
    _require(param.shape == grad.shape, "sgd buffers differ in shape")
    param[...] = _acc(param) - lr * _acc(grad)


def make_rng(seed) -> np.random.Generator:
    """Philox counter-based generator; seeds may be ints or SeedSequence children."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def uniform_fill(out, low, high, seed):
    if low > high:
        raise ArgumentError(f"uniform_fill: low {low} > high {high}")
    if low == high:
        out[...] = low
        return
    u = make_rng(seed).random(out.shape)
    vals = (low + (high - low) * u).astype(out.dtype)
    # float32 rounding can land on ``high``; keep the interval half-open
    top = np.nextafter(np.array(high, dtype=out.dtype), np.array(low, dtype=out.dtype))
    out[...] = np.minimum(vals, top)
