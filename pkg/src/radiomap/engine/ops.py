"""Differentiable operations on ``(N, C, H, W)`` grids.

Every op validates shapes, computes the forward result with numpy and
registers a closure returning one gradient per input.  Convolutions use
cross-correlation (no kernel flip) and zero padding.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, make_node


def _check4(x: Tensor, what: str):
    if x.ndim != 4:
        raise ValueError(f"{what} must be rank-4 (N, C, H, W), got shape {x.shape}")


def _out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# ---------------------------------------------------------------- convolution
def _im2col(xp, k, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            r, q = i * dilation, j * dilation
            cols[:, :, i * k + j] = xp[:, :, r:r + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(dcols, shape_p, k, stride, dilation, ho, wo):
    dxp = np.zeros(shape_p, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            r, q = i * dilation, j * dilation
            dxp[:, :, r:r + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += dcols[:, :, i * k + j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation; ``weight`` is ``(C_out, C_in, K, K)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv2d input")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be (C_out, C_in, K, K), got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, k, _ = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d bias must have shape ({co},), got {bias.shape}")
    ho = _out_size(h, k, stride, padding, dilation)
    wo = _out_size(w, k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, dilation, ho, wo).reshape(n, c * k * k, ho * wo)
    w2 = weight.data.reshape(co, c * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        g2 = g.reshape(n, co, ho * wo)
        dx = dw = db = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c, k * k, ho, wo)
            dxp = _col2im(dcols, xp.shape, k, stride, dilation, ho, wo)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if weight.requires_grad:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


# ------------------------------------------------------- bilinear sampling
class _Bilinear:
    """Bilinear interpolation of fractional points as sparse matrices.

    For each batch item the sampling operator is a CSR matrix of shape
    ``(P, H*W)`` with four entries per row (the corner weights; zero for
    corners outside the grid), plus two matrices holding the weights'
    derivatives with respect to the point's row and column.  Feature maps are
    handled channels-last, ``(H*W, C)``, so gathers and scatters become
    sparse-dense products.  ``rows``/``cols`` are ``(N, P)``.
    """

    def __init__(self, rows, cols, h, w, dtype=np.float64):
        if not (np.all(np.isfinite(rows)) and np.all(np.isfinite(cols))):
            raise ValueError("sampling points must be finite")
        n, p = rows.shape
        r0 = np.floor(rows)
        c0 = np.floor(cols)
        ar = (rows - r0).astype(dtype)
        ac = (cols - c0).astype(dtype)
        r0 = r0.astype(np.int64)
        c0 = c0.astype(np.int64)
        vr0 = (r0 >= 0) & (r0 < h)
        vr1 = (r0 >= -1) & (r0 < h - 1)
        vc0 = (c0 >= 0) & (c0 < w)
        vc1 = (c0 >= -1) & (c0 < w - 1)
        base = r0 * w + c0
        br, bc = 1 - ar, 1 - ac
        self.idx = np.empty((n, p, 4), dtype=np.int64)
        self.valid = np.empty((n, p, 4), dtype=bool)
        self.wt = np.empty((n, p, 4), dtype=dtype)
        corners = ((vr0, vc0, 0, br, bc), (vr0, vc1, 1, br, ac), (vr1, vc0, w, ar, bc), (vr1, vc1, w + 1, ar, ac))
        for j, (vr, vc, shift, a, b) in enumerate(corners):
            v = vr & vc
            self.valid[..., j] = v
            self.idx[..., j] = np.where(v, base + shift, 0)
            self.wt[..., j] = a * b * v
        self.ar, self.ac = ar, ac
        self.shape = (p, h * w)
        self.indptr = np.arange(0, 4 * p + 1, 4)

    def point_derivs(self):
        """Corner-weight derivatives with respect to the point's row and column."""
        ar, ac = self.ar[..., None], self.ac[..., None]
        dwr = np.concatenate([-(1 - ac), -ac, 1 - ac, ac], axis=-1) * self.valid
        dwc = np.concatenate([-(1 - ar), 1 - ar, -ar, ar], axis=-1) * self.valid
        return dwr, dwc

    def _mat(self, data, b, dtype):
        return sp.csr_matrix((data[b].ravel().astype(dtype, copy=False), self.idx[b].ravel(), self.indptr),
                             shape=self.shape)

    def gather(self, xt):
        """``xt`` is channels-last ``(N, H*W, C)``; returns ``(N, P, C)``."""
        n, _, c = xt.shape
        out = np.empty((n, self.shape[0], c), dtype=xt.dtype)
        for b in range(n):
            out[b] = self._mat(self.wt, b, xt.dtype) @ xt[b]
        return out

    def backward(self, xt, g, need_x=True, need_pts=True):
        """``g`` is ``(N, P, C)``; returns (dxt ``(N, H*W, C)``, d row ``(N, P)``, d col ``(N, P)``)."""
        n = xt.shape[0]
        dx = drow = dcol = None
        if need_x:
            dx = np.empty(xt.shape, dtype=g.dtype)
            for b in range(n):
                dx[b] = self._mat(self.wt, b, g.dtype).T @ g[b]
        if need_pts:
            dwr, dwc = self.point_derivs()
            drow = np.empty(g.shape[:2], dtype=g.dtype)
            dcol = np.empty(g.shape[:2], dtype=g.dtype)
            for b in range(n):
                drow[b] = np.einsum("pc,pc->p", self._mat(dwr, b, xt.dtype) @ xt[b], g[b])
                dcol[b] = np.einsum("pc,pc->p", self._mat(dwc, b, xt.dtype) @ xt[b], g[b])
        return dx, drow, dcol


def bilinear_sample(x: Tensor, points: Tensor) -> Tensor:
    """Sample ``x`` at fractional ``(row, col)`` points.

    ``points`` has shape ``(N, P, 2)``; the result is ``(N, C, P)``.  Outside the
    grid the input reads as zero.  Differentiable in ``x`` and ``points``.
    """
    x, points = as_tensor(x), as_tensor(points)
    _check4(x, "bilinear_sample input")
    n, c, h, w = x.shape
    if points.ndim != 3 or points.shape[0] != n or points.shape[2] != 2:
        raise ValueError(f"points must be (N={n}, P, 2), got {points.shape}")
    bl = _Bilinear(points.data[..., 0], points.data[..., 1], h, w, dtype=x.dtype)
    xt = x.data.reshape(n, c, h * w).transpose(0, 2, 1)
    out = bl.gather(xt).transpose(0, 2, 1)

    def backward(g):
        dxt, dr, dc = bl.backward(xt, g.transpose(0, 2, 1), need_x=x.requires_grad, need_pts=points.requires_grad)
        dpts = np.stack([dr, dc], axis=-1) if points.requires_grad else None
        dx = dxt.transpose(0, 2, 1).reshape(x.shape) if dxt is not None else None
        return dx, dpts

    return make_node(out, (x, points), backward)


def deform_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, offsets: Tensor,
                  stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Deformable convolution.

    ``offsets`` is ``(N, 2*K*K, H_out, W_out)``; channel ``2k`` holds the row
    shift and ``2k+1`` the column shift of kernel tap ``k`` (row-major).  Each
    tap samples the input bilinearly at its regular position plus the offset.
    """
    x, weight, offsets = as_tensor(x), as_tensor(weight), as_tensor(offsets)
    _check4(x, "deform_conv2d input")
    _check4(offsets, "deform_conv2d offsets")
    n, c, h, w = x.shape
    co, ci, k, _ = weight.shape
    if ci != c:
        raise ValueError(f"deform_conv2d channel mismatch: input has {c}, weight expects {ci}")
    ho = _out_size(h, k, stride, padding, dilation)
    wo = _out_size(w, k, stride, padding, dilation)
    if offsets.shape[1] != 2 * k * k:
        raise ValueError(f"offsets need {2 * k * k} channels for a {k}x{k} kernel, got {offsets.shape[1]}")
    if offsets.shape != (n, 2 * k * k, ho, wo):
        raise ValueError(f"offsets shape {offsets.shape} != {(n, 2 * k * k, ho, wo)}")
    kk = k * k
    L = ho * wo

    taps = np.arange(kk)
    tap_r = (taps // k) * dilation
    tap_c = (taps % k) * dilation
    base_r = (np.arange(ho) * stride - padding)[:, None] + np.zeros((1, wo))
    base_c = np.zeros((ho, 1)) + (np.arange(wo) * stride - padding)[None, :]
    base_r = (tap_r[:, None] + base_r.reshape(1, L))  # (K*K, L)
    base_c = (tap_c[:, None] + base_c.reshape(1, L))

    # sampling points ordered (output location, tap) so gathered rows reshape
    # directly into (N, L, K*K*C) patches
    off = offsets.data.reshape(n, kk, 2, L)
    rows = (base_r[None] + off[:, :, 0]).transpose(0, 2, 1).reshape(n, L * kk)
    cols_ = (base_c[None] + off[:, :, 1]).transpose(0, 2, 1).reshape(n, L * kk)
    bl = _Bilinear(rows, cols_, h, w, dtype=x.dtype)
    xt = np.ascontiguousarray(x.data.reshape(n, c, h * w).transpose(0, 2, 1))
    patches = bl.gather(xt).reshape(n, L, kk * c)
    wk = weight.data.reshape(co, c, kk).transpose(0, 2, 1).reshape(co, kk * c)
    out = np.matmul(wk, patches.transpose(0, 2, 1))
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        g2 = g.reshape(n, co, L)
        dx = dw = db = doff = None
        if weight.requires_grad:
            dwk = np.tensordot(g2, patches, axes=([0, 2], [0, 1]))
            dw = dwk.reshape(co, kk, c).transpose(0, 2, 1).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if x.requires_grad or offsets.requires_grad:
            dpatch = np.matmul(g2.transpose(0, 2, 1), wk).reshape(n, L * kk, c)
            dxt, drow, dcol = bl.backward(xt, dpatch, need_x=x.requires_grad, need_pts=offsets.requires_grad)
            if dxt is not None:
                dx = dxt.transpose(0, 2, 1).reshape(x.shape)
            if drow is not None:
                doff = np.stack([drow.reshape(n, L, kk).transpose(0, 2, 1),
                                 dcol.reshape(n, L, kk).transpose(0, 2, 1)], axis=2).reshape(offsets.shape)
        return (dx, dw, doff) if bias is None else (dx, dw, doff, db)

    parents = (x, weight, offsets) if bias is None else (x, weight, offsets, bias)
    return make_node(out, parents, backward)


# ------------------------------------------------------------ transposed conv
def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to ``stride`` (no overlap).

    ``weight`` is ``(C_in, C_out, s, s)``; output spatial size is ``s`` times
    the input's.  This is the adjoint of ``conv2d(., weight, stride=s)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv_transpose2d input")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c:
        raise ValueError(f"conv_transpose2d weight must be ({c}, C_out, k, k), got {weight.shape}")
    _, co, k, k2 = weight.shape
    if k != stride or k2 != stride:
        raise ValueError(f"conv_transpose2d supports kernel == stride only (got kernel {k}x{k2}, stride {stride})")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv_transpose2d bias must have shape ({co},), got {bias.shape}")
    s = stride
    L = h * w
    x2 = x.data.reshape(n, c, L)
    w2 = weight.data.reshape(c, co * s * s)
    y = np.matmul(w2.T, x2).reshape(n, co, s, s, h, w)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * s, w * s)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, co, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, co * s * s, L)
        dx = dw = db = None
        if x.requires_grad:
            dx = np.matmul(w2, g2).reshape(x.shape)
        if weight.requires_grad:
            dw = np.tensordot(x2, g2, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


# ------------------------------------------------------------------ pooling
def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties go to the first element in row-major order."""
    x = as_tensor(x)
    _check4(x, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------- batchnorm
def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running estimates
    are updated in place (unbiased variance); in eval mode the running
    estimates are used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check4(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm2d expects per-channel parameters of shape ({c},)")
    g4 = gamma.data[None, :, None, None]

    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dx = g * (g4 * inv[None, :, None, None]) if x.requires_grad else None
            return dx, dgamma, dbeta

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# --------------------------------------------------------- elementwise/shape
def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_node(out, (x,), lambda g: (g * mask,))


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"add needs identical shapes, got {x.shape} and {y.shape}")
    return make_node(x.data + y.data, (x, y), lambda g: (g, g))


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check4(x, "concat input")
    _check4(y, "concat input")
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat needs matching N, H, W, got {x.shape} and {y.shape}")
    cx = x.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)
    return make_node(out, (x, y), lambda g: (g[:, :cx], g[:, cx:]))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.sum(diff * diff) / n, dtype=pred.dtype)

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return make_node(out, (pred, target), backward)


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar ``sum(x * weights)``; ``weights`` is a constant array."""
    x = as_tensor(x)
    wgt = np.asarray(weights, dtype=x.dtype)
    if wgt.shape != x.shape:
        raise ValueError(f"weights shape {wgt.shape} != {x.shape}")
    out = np.asarray(np.sum(x.data * wgt), dtype=x.dtype)
    return make_node(out, (x,), lambda g: (g * wgt,))
