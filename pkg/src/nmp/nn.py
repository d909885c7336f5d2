"""Minimal dense-tensor neural network kernel with reverse-mode gradients.

Implements exactly what the transcription graph needs: 2-D convolution
(stride 1, or 3 along frequency), batch normalization, ReLU, sigmoid,
channel concatenation and an elementwise binary cross entropy loss.

Ops accept plain ndarrays or Tensor objects. When gradients are enabled and
an input requires them, the op records a tape node; Tensor.backward() then
runs reverse-mode accumulation. Under no_grad() (or with plain arrays) the
same code paths return bare ndarrays.

Convolutions run through one of two equivalent kernels: an FFT path for
stride-1 layers with large receptive fields and a shift-and-matmul path
otherwise. Both are validated against a brute-force loop reference and
finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

__all__ = [
    "Tensor", "no_grad", "conv2d", "batchnorm", "relu", "sigmoid",
    "concat_channels", "weighted_bce", "add", "conv_output_bins",
]

_GRAD_ENABLED = True

# FFT convolution pays off once the per-output-position work is large.
_FFT_MIN_KERNEL_WORK = 100
_FFT_MIN_AREA = 2048

_BCE_CLAMP = 1e-7


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """Array plus optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse-mode pass from this tensor.

        seed defaults to ones (for a scalar loss, the usual dL/dL = 1).
        Raises RuntimeError when no graph was recorded.
        """
        if self._backward is None and not self._parents:
            raise RuntimeError(
                "backward() without a recorded forward pass; run the forward "
                "computation with gradients enabled first")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, grad=%s)" % (
            self.shape, self.data.dtype, self.requires_grad)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _tracked(x):
    return isinstance(x, Tensor) and (x.requires_grad or x._parents or
                                      x._backward is not None)


def _make_node(value, inputs, backward):
    """Wrap an op result; `backward` receives the upstream gradient."""
    if not _GRAD_ENABLED or not any(_tracked(i) for i in inputs):
        return value
    out = Tensor(value)
    out._parents = tuple(i for i in inputs if isinstance(i, Tensor))
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolution

def conv_output_bins(n_bins: int, stride_f: int) -> int:
    return -(-n_bins // stride_f)


def _conv_geometry(x_shape, w_shape, stride):
    n, c, t, f = x_shape
    o, ci, kh, kw = w_shape
    if ci != c:
        raise ValueError("kernel expects %d input channels, got %d" % (ci, c))
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dims must be odd, got %dx%d" % (kh, kw))
    st, sf = stride
    if st != 1 or sf not in (1, 3):
        raise ValueError("stride must be (1,1) or (1,3), got %r" % (stride,))
    fo = conv_output_bins(f, sf)
    pt = kh // 2
    pf = kw // 2
    if sf == 1:
        off0, pad_left = 0, pf
        pad_right = pf
    else:
        # output bin j is centered on input bin 3j+1 so 264 -> 88 exactly
        pad_left = max(0, pf - 1)
        off0 = 1 - pf + pad_left
        need = (fo - 1) * sf + off0 + kw
        pad_right = max(0, need - (f + pad_left))
    return n, c, t, f, o, kh, kw, sf, fo, pt, pf, pad_left, pad_right, off0


def _conv2d_gemm(x, w, stride):
    (n, c, t, f, o, kh, kw, sf, fo, pt, pf,
     pad_left, pad_right, off0) = _conv_geometry(x.shape, w.shape, stride)
    xpad = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pad_left, pad_right)))
    acc = np.zeros((o, n * t * fo), dtype=x.dtype)
    wr = w.reshape(o, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            sl = xpad[:, :, i:i + t, off0 + j:off0 + j + sf * fo:sf]
            mat = np.ascontiguousarray(sl.transpose(1, 0, 2, 3)).reshape(c, -1)
            acc += wr[:, :, i, j] @ mat
    return acc.reshape(o, n, t, fo).transpose(1, 0, 2, 3).copy()


def _conv2d_gemm_backward(x, w, g, stride):
    (n, c, t, f, o, kh, kw, sf, fo, pt, pf,
     pad_left, pad_right, off0) = _conv_geometry(x.shape, w.shape, stride)
    xpad = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pad_left, pad_right)))
    g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
    grad_w = np.empty_like(w)
    grad_xpad = np.zeros_like(xpad)
    for i in range(kh):
        for j in range(kw):
            view = xpad[:, :, i:i + t, off0 + j:off0 + j + sf * fo:sf]
            mat = np.ascontiguousarray(view.transpose(1, 0, 2, 3)).reshape(c, -1)
            grad_w[:, :, i, j] = g_mat @ mat.T
            contrib = (w[:, :, i, j].T @ g_mat).reshape(c, n, t, fo)
            grad_xpad[:, :, i:i + t, off0 + j:off0 + j + sf * fo:sf] += \
                contrib.transpose(1, 0, 2, 3)
    grad_x = grad_xpad[:, :, pt:pt + t, pad_left:pad_left + f]
    return grad_x, grad_w


def _rfft2_sizes(t, f, kh, kw):
    return (scipy.fft.next_fast_len(t + kh - 1),
            scipy.fft.next_fast_len(f + kw - 1))


def _conv2d_fft(x, w):
    n, c, t, f = x.shape
    o, _, kh, kw = w.shape
    s1, s2 = _rfft2_sizes(t, f, kh, kw)
    xf = scipy.fft.rfft2(x, s=(s1, s2), axes=(2, 3))
    wf = scipy.fft.rfft2(w[:, :, ::-1, ::-1].astype(x.dtype),
                         s=(s1, s2), axes=(2, 3))
    yf = np.einsum("ncuv,ocuv->nouv", xf, wf)
    y = scipy.fft.irfft2(yf, s=(s1, s2), axes=(2, 3))
    pt, pf = kh // 2, kw // 2
    return np.ascontiguousarray(y[:, :, pt:pt + t, pf:pf + f]).astype(
        x.dtype, copy=False)


def _conv2d_fft_backward(x, w, g):
    n, c, t, f = x.shape
    o, _, kh, kw = w.shape
    # upstream correlated with the unflipped kernel, channels swapped
    grad_x = _conv2d_fft(g, np.ascontiguousarray(
        w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]))
    # kernel gradient: valid correlation of padded input with upstream
    pt, pf = kh // 2, kw // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf)))
    s1 = scipy.fft.next_fast_len(t + 2 * pt)
    s2 = scipy.fft.next_fast_len(f + 2 * pf)
    xf = scipy.fft.rfft2(xpad, s=(s1, s2), axes=(2, 3))
    gf = scipy.fft.rfft2(g, s=(s1, s2), axes=(2, 3))
    wf = np.einsum("ncuv,nouv->ocuv", xf, np.conj(gf))
    wfull = scipy.fft.irfft2(wf, s=(s1, s2), axes=(2, 3))
    grad_w = np.ascontiguousarray(wfull[:, :, :kh, :kw]).astype(
        w.dtype, copy=False)
    return grad_x, grad_w


def _use_fft(x_shape, w_shape, stride):
    if stride != (1, 1):
        return False
    _, c, t, f = x_shape
    _, _, kh, kw = w_shape
    return c * kh * kw >= _FFT_MIN_KERNEL_WORK and t * f >= _FFT_MIN_AREA


def conv2d(x, w, b, stride=(1, 1)):
    """Cross-correlation with zero padding.

    Stride-1 output matches the input extent; frequency-stride 3 yields
    ceil(bins/3) bins, output bin j centered on input bin 3j+1.
    """
    xv, wv, bv = _data(x), _data(w), _data(b)
    stride = tuple(stride)
    if _use_fft(xv.shape, wv.shape, stride):
        y = _conv2d_fft(xv, wv)
    else:
        y = _conv2d_gemm(xv, wv, stride)
    y += bv.reshape(1, -1, 1, 1)

    def backward(g):
        if _use_fft(xv.shape, wv.shape, stride):
            gx, gw = _conv2d_fft_backward(xv, wv, g)
        else:
            gx, gw = _conv2d_gemm_backward(xv, wv, g, stride)
        if isinstance(x, Tensor):
            x._accumulate(gx)
        if isinstance(w, Tensor):
            w._accumulate(gw)
        if isinstance(b, Tensor):
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _make_node(y, (x, w, b), backward)


# ---------------------------------------------------------------------------
# normalization and activations

def batchnorm(x, gamma, beta, running_mean, running_var, eps: float = 1e-3,
              training: bool = False, momentum: float = 0.99):
    """Per-channel normalization over (batch, time, freq).

    Inference mode normalizes with the provided running statistics and is
    pure. Training mode uses batch statistics and updates running_mean /
    running_var in place with the given momentum.
    """
    xv, gv, bv = _data(x), _data(gamma), _data(beta)
    c = xv.shape[1]
    shape = (1, c, 1, 1)

    if training:
        axes = (0, 2, 3)
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = xv.size // c
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = np.asarray(running_mean)
        var = np.asarray(running_var)
        m = None

    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean.reshape(shape)) * inv_std.reshape(shape)
    y = gv.reshape(shape) * xhat + bv.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if isinstance(gamma, Tensor):
            gamma._accumulate(dgamma)
        if isinstance(beta, Tensor):
            beta._accumulate(dbeta)
        if isinstance(x, Tensor):
            scale = (gv * inv_std).reshape(shape)
            if training:
                gx = scale * (g - dbeta.reshape(shape) / m
                              - xhat * dgamma.reshape(shape) / m)
            else:
                gx = scale * g
            x._accumulate(gx)

    return _make_node(y, (x, gamma, beta), backward)


def relu(x):
    xv = _data(x)
    y = np.maximum(xv, 0)

    def backward(g):
        if isinstance(x, Tensor):
            x._accumulate(g * (xv > 0))

    return _make_node(y, (x,), backward)


def sigmoid(x):
    """Numerically safe logistic; output strictly inside (0,1)."""
    xv = _data(x)
    y = np.empty_like(xv)
    pos = xv >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    y[~pos] = ex / (1.0 + ex)
    info = np.finfo(y.dtype)
    np.clip(y, info.tiny, 1.0 - info.epsneg, out=y)

    def backward(g):
        if isinstance(x, Tensor):
            x._accumulate(g * y * (1.0 - y))

    return _make_node(y, (x,), backward)


def concat_channels(a, b):
    av, bv = _data(a), _data(b)
    y = np.concatenate([av, bv], axis=1)
    split = av.shape[1]

    def backward(g):
        if isinstance(a, Tensor):
            a._accumulate(g[:, :split])
        if isinstance(b, Tensor):
            b._accumulate(g[:, split:])

    return _make_node(y, (a, b), backward)


def add(a, b):
    av, bv = _data(a), _data(b)
    y = av + bv

    def backward(g):
        if isinstance(a, Tensor):
            a._accumulate(g)
        if isinstance(b, Tensor):
            b._accumulate(g)

    return _make_node(y, (a, b), backward)


def weighted_bce(pred, target, w_pos: float = 1.0, w_neg: float = 1.0):
    """Class-weighted binary cross entropy, mean-reduced to a scalar.

    Predictions are clamped to [1e-7, 1-1e-7]; the gradient is zero in the
    clamped region (the loss is flat there).
    """
    pv, tv = _data(pred), _data(target)
    p = np.clip(pv, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    inside = (pv > _BCE_CLAMP) & (pv < 1.0 - _BCE_CLAMP)
    loss = -(w_pos * tv * np.log(p) + w_neg * (1.0 - tv) * np.log1p(-p))
    value = np.asarray(loss.mean(), dtype=pv.dtype)

    def backward(g):
        if isinstance(pred, Tensor):
            dp = -(w_pos * tv / p - w_neg * (1.0 - tv) / (1.0 - p)) / pv.size
            pred._accumulate(g * dp * inside)

    return _make_node(value, (pred, target), backward)
