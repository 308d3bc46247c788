"""A small reverse-mode autodiff kernel over float64 numpy arrays.

Only the layers the meta-model needs are provided. Every op accepts either a
single example or a leading batch dimension: ``conv1d`` takes ``[C, L]`` or
``[B, C, L]``, ``linear`` takes ``[..., in]``, and so on.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

GLOBAL = None  # window value for global max-pooling


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if id(p) not in seen)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def sum(self):
        out = _result(self.data.sum(), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.broadcast_to(g, self.shape))
        return out

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _result(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.shape))
            out._backward = backward
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _result(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.shape))
            out._backward = backward
        return out

    __radd__ = __add__
    __rmul__ = __mul__


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _result(data, parents):
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
    return out


def _check_ids(ids, vocab_size):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = ids[(ids < 0) | (ids >= vocab_size)][0]
        raise IndexError(f"token id {bad} outside embedding table of {vocab_size} rows")
    return ids


def embedding(table, ids):
    """Row gather ``table[ids]``; output shape ``ids.shape + (E,)``."""
    ids = _check_ids(ids, table.shape[0])
    out = _result(table.data[ids], (table,))
    if out.requires_grad:
        def backward(g):
            table._accumulate(_scatter_rows(ids.reshape(-1), g.reshape(-1, table.shape[1]), table.shape[0]))
        out._backward = backward
    return out


def _batched(x, ndim):
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


def _im2col(xt, k, l_out):
    """``[B, Lp, C]`` channel-last input -> ``[B*L_out, K*C]`` windows, tap-major."""
    b, _, c = xt.shape
    cols = np.empty((b, l_out, k * c))
    for j in range(k):
        cols[:, :, j * c:(j + 1) * c] = xt[:, j:j + l_out, :]
    return cols.reshape(b * l_out, k * c)


def _to_channels_last(data, channels_last):
    """Batched ``[B, L, C]`` view of a conv input plus an unbatch flag."""
    data, squeeze = _batched(data, 3)
    return (data if channels_last else data.transpose(0, 2, 1)), squeeze


def _from_channels_last(res, channels_last, squeeze):
    if not channels_last:
        res = np.ascontiguousarray(res.transpose(0, 2, 1))
    return res[0] if squeeze else res


def conv1d(x, weight, bias, padding=0, channels_last=False):
    """Stride-1 cross-correlation with zero padding.

    ``x``: ``[C_in, L]`` or ``[B, C_in, L]`` (``[.., L, C_in]`` with
    ``channels_last``); ``weight``: ``[C_out, C_in, K]``.
    """
    xt_view, squeeze = _to_channels_last(x.data, channels_last)
    c_out, c_in, k = weight.shape
    b, length, cx = xt_view.shape
    if cx != c_in:
        raise ValueError(f"conv1d: input has {cx} channels, kernels expect C_in={c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} does not match C_out={c_out}")
    l_out = length + 2 * padding - k + 1
    if l_out < 1:
        raise ValueError(f"conv1d: L={length} with padding {padding} shorter than K={k}")
    xt = np.zeros((b, length + 2 * padding, c_in))
    xt[:, padding:padding + length, :] = xt_view
    cols = _im2col(xt, k, l_out)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 1)).reshape(c_out, k * c_in)
    res = (cols @ wmat.T + bias.data).reshape(b, l_out, c_out)
    out = _result(_from_channels_last(res, channels_last, squeeze), (x, weight, bias))
    if out.requires_grad:
        def backward(g):
            gt, _ = _to_channels_last(g, channels_last)
            gmat = np.ascontiguousarray(gt).reshape(b * l_out, c_out)
            if weight.requires_grad:
                dw = (gmat.T @ cols).reshape(c_out, k, c_in).transpose(0, 2, 1)
                weight._accumulate(dw)
            if bias.requires_grad:
                bias._accumulate(gmat.sum(axis=0))
            if x.requires_grad:
                dcols = (gmat @ wmat).reshape(b, l_out, k * c_in)
                dxt = np.zeros_like(xt)
                for j in range(k):
                    dxt[:, j:j + l_out, :] += dcols[:, :, j * c_in:(j + 1) * c_in]
                dx = dxt[:, padding:padding + length, :]
                if not channels_last:
                    dx = dx.transpose(0, 2, 1)
                x._accumulate(dx[0] if squeeze else dx)
        out._backward = backward
    return out


def embed_conv1d(table, ids, weight, bias, padding=0, channels_last=False):
    """``conv1d(transpose(embedding(table, ids)), weight, bias)`` without materializing embeddings.

    Both steps are linear, so each kernel tap is folded into the table first
    (``[V, C_out]`` per tap) and the convolution becomes K row gathers. Cost
    scales with the vocabulary instead of the batch's token count, which pays
    off for the small vocabularies of level-1 inputs. ``ids``: ``[L]`` or ``[B, L]``.
    """
    v, e = table.shape
    c_out, c_in, k = weight.shape
    if c_in != e:
        raise ValueError(f"embed_conv1d: embedding width {e} != kernel C_in={c_in}")
    ids = _check_ids(ids, v)
    ids, squeeze = _batched(ids, 2)
    b, length = ids.shape
    l_out = length + 2 * padding - k + 1
    if l_out < 1:
        raise ValueError(f"embed_conv1d: L={length} with padding {padding} shorter than K={k}")
    # row v is an all-zero sentinel standing in for the zero padding
    ids_p = np.pad(ids, ((0, 0), (padding, padding)), constant_values=v) if padding else ids
    # contiguous per-tap kernels; strided slices defeat BLAS
    wtaps = [np.ascontiguousarray(weight.data[:, :, j]) for j in range(k)]
    taps = np.zeros((k, v + 1, c_out))
    for j in range(k):
        taps[j, :v] = table.data @ wtaps[j].T
    res = taps[0][ids_p[:, 0:l_out]]
    for j in range(1, k):
        res += taps[j][ids_p[:, j:j + l_out]]
    res += bias.data
    out = _result(_from_channels_last(res, channels_last, squeeze), (table, weight, bias))
    if out.requires_grad:
        def backward(g):
            gt, _ = _to_channels_last(g, channels_last)
            gmat = np.ascontiguousarray(gt).reshape(b * l_out, c_out)
            if bias.requires_grad:
                bias._accumulate(gmat.sum(axis=0))
            dtable = np.zeros_like(table.data) if table.requires_grad else None
            dweight = np.zeros_like(weight.data) if weight.requires_grad else None
            for j in range(k):
                dtap = _scatter_rows(ids_p[:, j:j + l_out].reshape(-1), gmat, v + 1)[:v]
                if dtable is not None:
                    dtable += dtap @ wtaps[j]
                if dweight is not None:
                    dweight[:, :, j] = dtap.T @ table.data
            if dtable is not None:
                table._accumulate(dtable)
            if dweight is not None:
                weight._accumulate(dweight)
        out._backward = backward
    return out


def _scatter_rows(index, rows, n):
    """``out[index[i]] += rows[i]`` for an ``[n, D]`` output."""
    onehot = sparse.csr_matrix(
        (np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index))
    )
    return np.asarray(onehot @ rows)


def maxpool1d(x, window=GLOBAL, axis=-1):
    """Max over non-overlapping windows along ``axis``; ``GLOBAL`` pools the whole axis.

    A trailing remainder shorter than ``window`` is dropped. Gradient goes to the
    first maximal position of each window.
    """
    axis = axis % x.data.ndim
    length = x.shape[axis]
    if window is GLOBAL:
        window = length
    if window < 1:
        raise ValueError("pooling window must be >= 1")
    if window > length:
        raise ValueError(f"pooling window {window} larger than length {length}")
    n_out = length // window
    if window == 2:
        return _maxpool2(x, n_out, axis)
    lead, trail = x.shape[:axis], x.shape[axis + 1:]
    xr = x.data[(slice(None),) * axis + (slice(0, n_out * window),)]
    xr = xr.reshape(*lead, n_out, window, *trail)
    idx = np.expand_dims(xr.argmax(axis=axis + 1), axis + 1)
    res = np.take_along_axis(xr, idx, axis=axis + 1).squeeze(axis + 1)
    out = _result(res, (x,))
    if out.requires_grad:
        def backward(g):
            gr = np.zeros_like(xr)
            np.put_along_axis(gr, idx, np.expand_dims(g, axis + 1), axis=axis + 1)
            gx = np.zeros_like(x.data)
            gx[(slice(None),) * axis + (slice(0, n_out * window),)] = gr.reshape(
                *lead, n_out * window, *trail
            )
            x._accumulate(gx)
        out._backward = backward
    return out


def _maxpool2(x, n_out, axis):
    first = (slice(None),) * axis + (slice(0, 2 * n_out, 2),)
    second_ = (slice(None),) * axis + (slice(1, 2 * n_out, 2),)
    a = x.data[first]
    b = x.data[second_]
    second = b > a  # ties go to the first position
    out = _result(np.where(second, b, a), (x,))
    if out.requires_grad:
        def backward(g):
            gx = np.zeros_like(x.data)
            gx[first] = np.where(second, 0.0, g)
            gx[second_] = np.where(second, g, 0.0)
            x._accumulate(gx)
        out._backward = backward
    return out


def linear(x, weight, bias):
    """``x @ W.T + b`` with ``W``: ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = _result(x.data @ weight.data.T + bias.data, (x, weight, bias))
    if out.requires_grad:
        def backward(g):
            g2 = g.reshape(-1, weight.shape[0])
            x2 = x.data.reshape(-1, weight.shape[1])
            if weight.requires_grad:
                weight._accumulate(g2.T @ x2)
            if bias.requires_grad:
                bias._accumulate(g2.sum(axis=0))
            if x.requires_grad:
                x._accumulate(g @ weight.data)
        out._backward = backward
    return out


def relu(x):
    mask = x.data > 0
    out = _result(x.data * mask, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * mask)
    return out


def dropout(x, p, rng, training):
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    out = _result(x.data * scale, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * scale)
    return out


def gaussian_noise(x, sigma, rng, training):
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if not training or sigma == 0.0:
        return x
    out = _result(x.data + rng.normal(0.0, sigma, size=x.shape), (x,))
    if out.requires_grad:
        out._backward = x._accumulate
    return out


def transpose(x, axes):
    inv = np.argsort(axes)
    out = _result(np.ascontiguousarray(x.data.transpose(axes)), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g.transpose(inv))
    return out


def reshape(x, shape):
    out = _result(x.data.reshape(shape), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g.reshape(x.shape))
    return out


def log_softmax(x):
    """Stable log-softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = _result(lp, (x,))
    if out.requires_grad:
        def backward(g):
            x._accumulate(g - np.exp(lp) * g.sum(axis=-1, keepdims=True))
        out._backward = backward
    return out


CONVENTIONAL = "conventional"
LITERAL = "literal"


def kl_div_loss(log_pred, target, direction=CONVENTIONAL):
    """KL divergence summed over slots and over the batch.

    ``conventional``: sum y * (ln y - log_pred), with 0 ln 0 = 0.
    ``literal``: sum p * (log_pred - ln y) where p = exp(log_pred).
    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != log_pred.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {log_pred.shape}")
    if (y < 0).any():
        raise ValueError("target has negative entries")
    sums = y.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"target rows must sum to 1 (got {np.ravel(sums)[:4]})")
    lp = log_pred.data
    if direction == CONVENTIONAL:
        pos = y > 0
        ylogy = np.where(pos, y * np.log(np.where(pos, y, 1.0)), 0.0)
        value = ylogy.sum() - (y * lp).sum()
        dlp = -y
    elif direction == LITERAL:
        if (y == 0).any():
            raise ValueError("the literal direction needs a strictly positive target")
        p = np.exp(lp)
        value = (p * (lp - np.log(y))).sum()
        dlp = p * (lp - np.log(y) + 1.0)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    out = _result(np.float64(value), (log_pred,))
    if out.requires_grad:
        out._backward = lambda g: log_pred._accumulate(g * dlp)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst: tuple  # (param index, flat coordinate)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} over {self.checked} coordinates"


def grad_check(f, params, delta=1e-5, tol=1e-4, max_coords=None, rng=None, floor=1e-6):
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps near-zero gradients from dividing round-off by round-off. With
    ``max_coords`` each parameter is sampled down to that many coordinates.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst, worst_at, checked = 0.0, (None, None), 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check needs contiguous parameter arrays")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + delta
            hi = float(f().data)
            flat[c] = orig - delta
            lo = float(f().data)
            flat[c] = orig
            num = (hi - lo) / (2 * delta)
            a = analytic[pi].reshape(-1)[c]
            err = float(abs(a - num) / max(abs(a), abs(num), floor))
            checked += 1
            if err > worst:
                worst, worst_at = err, (pi, int(c))
    for p in params:
        p.zero_grad()
    return GradCheckReport(worst, worst <= tol, checked, worst_at)
