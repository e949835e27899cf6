"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 array and remembers how it was produced;
calling ``backward()`` on a scalar result walks the recorded graph in
reverse topological order and accumulates gradients into every node that
requires them.  Ops are plain functions; each one installs a closure that
pushes its output gradient to its parents.

Any non-finite value appearing in an op output or a gradient is a hard
error.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solve_triangular
from scipy.special import expit

from .bayes import jittered_cholesky
from .errors import NumericsError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(self.data).all():
            raise NumericsError("non-finite value in tensor data")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, grad):
        if not np.isfinite(grad).all():
            raise NumericsError("non-finite value in gradient")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones(())
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Small operator surface so graph-building code stays readable.
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def tensor(data) -> Tensor:
    """Constant leaf (no gradient)."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(data, parents=(a, b), backward=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(data, parents=(a, b), backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(data, parents=(a, b), backward=backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return Tensor(a.data.T.copy(), parents=(a,), backward=backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return Tensor(a.data.reshape(shape).copy(), parents=(a,), backward=backward)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    data = np.where(a.data > 0, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(a.data > 0, 1.0, slope))

    return Tensor(data, parents=(a,), backward=backward)


def relu(a: Tensor) -> Tensor:
    """Clamp at zero; the gradient at exactly zero is zero."""
    return leaky_relu(a, slope=0.0)


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * expit(a.data))

    return Tensor(data, parents=(a,), backward=backward)


def mean_over(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.mean(axis=axes)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def backward(g):
        if a.requires_grad:
            g_full = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g_full / count, a.data.shape))

    return Tensor(data, parents=(a,), backward=backward)


def mean_all(a: Tensor) -> Tensor:
    return mean_over(a, tuple(range(a.data.ndim)))


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.data.shape))

    return Tensor(a.data.sum(), parents=(a,), backward=backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows (first axis) by integer index; scatter-add on backward."""
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            out = np.zeros_like(a.data)
            np.add.at(out, indices, g)
            a._accumulate(out)

    return Tensor(a.data[indices].copy(), parents=(a,), backward=backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on (batch, channels, height, width) tensors."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    batch, cin, height, width = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, weight {cin_w}")
    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ValueError("kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    wins = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(wins.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * ho * wo, cin * kh * kw
    )
    wmat = wd.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError("bias must have one entry per output channel")
        out = out + b.data
    out = out.reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(batch * ho * wo, cout)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(wd.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(batch, ho, wo, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if pad:
                dxp = dxp[:, :, pad : hp - pad, pad : wp - pad]
            x._accumulate(dxp)

    return Tensor(out, parents=parents, backward=backward)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping mean pooling with stride equal to the kernel size."""
    batch, ch, height, width = x.data.shape
    if height % kernel or width % kernel:
        raise ValueError(f"spatial dims {height}x{width} not divisible by {kernel}")
    ho, wo = height // kernel, width // kernel
    data = x.data.reshape(batch, ch, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            spread = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
            x._accumulate(spread / (kernel * kernel))

    return Tensor(data, parents=(x,), backward=backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization on (batch, channels, height, width).

    Training mode normalizes with batch statistics and updates the running
    arrays in place; eval mode uses the running statistics unchanged.
    """
    xd = x.data
    batch, ch, height, width = xd.shape
    count = batch * height * width
    gshape = (1, ch, 1, 1)
    if train:
        bmean = xd.mean(axis=(0, 2, 3))
        bvar = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * bmean
        running_var *= momentum
        running_var += (1.0 - momentum) * bvar
        std = np.sqrt(bvar + eps)
        xhat = (xd - bmean.reshape(gshape)) / std.reshape(gshape)
    else:
        std = np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(gshape)) / std.reshape(gshape)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            scale = (gamma.data / std).reshape(gshape)
            if train:
                gsum = g.sum(axis=(0, 2, 3)).reshape(gshape)
                gx = (g * xhat).sum(axis=(0, 2, 3)).reshape(gshape)
                x._accumulate(scale * (g - gsum / count - xhat * gx / count))
            else:
                x._accumulate(scale * g)

    return Tensor(out, parents=(x, gamma, beta), backward=backward)


def tril_cholesky_factor(raw: Tensor, d: int) -> Tensor:
    """Scatter (batch, d*(d+1)/2) coefficients into lower-triangular factors.

    Row-wise fill; diagonal entries pass through softplus so the factors
    have strictly positive diagonals.
    """
    n = d * (d + 1) // 2
    if raw.data.ndim != 2 or raw.data.shape[1] != n:
        raise ValueError(f"expected (batch, {n}) coefficients")
    batch = raw.data.shape[0]
    tr, tc = np.tril_indices(d)
    diag_sel = tr == tc
    vals = np.where(diag_sel, np.logaddexp(0.0, raw.data), raw.data)
    factors = np.zeros((batch, d, d))
    factors[:, tr, tc] = vals

    def backward(g):
        if raw.requires_grad:
            gtri = g[:, tr, tc]
            raw._accumulate(gtri * np.where(diag_sel, expit(raw.data), 1.0))

    return Tensor(factors, parents=(raw,), backward=backward)


def gram(factor: Tensor) -> Tensor:
    """Batched L @ L^T; the outputs are symmetric positive semi-definite."""
    ld = factor.data
    if ld.ndim != 3:
        raise ValueError("gram expects (batch, d, d)")
    data = np.einsum("bik,bjk->bij", ld, ld)

    def backward(g):
        if factor.requires_grad:
            gsym = g + g.transpose(0, 2, 1)
            factor._accumulate(np.einsum("bij,bjk->bik", gsym, ld))

    return Tensor(data, parents=(factor,), backward=backward)


def add_diagonal(mat: Tensor, vec: Tensor) -> Tensor:
    """Add per-coordinate values onto the diagonals of a (batch, d, d) stack."""
    md = mat.data
    if md.ndim != 3 or vec.data.shape != md.shape[:2]:
        raise ValueError("add_diagonal expects (batch, d, d) and (batch, d)")
    d = md.shape[1]
    idx = np.arange(d)
    data = md.copy()
    data[:, idx, idx] += vec.data

    def backward(g):
        if mat.requires_grad:
            mat._accumulate(g)
        if vec.requires_grad:
            vec._accumulate(g[:, idx, idx])

    return Tensor(data, parents=(mat, vec), backward=backward)


def gaussian_nll(mean: Tensor, cov: Tensor, y: np.ndarray) -> Tensor:
    """Per-sample Gaussian negative log likelihood, constant term omitted.

    ``mean`` is (batch, d), ``cov`` is (batch, d, d) symmetric positive
    definite, ``y`` a constant (batch, d) array.  Quadratic terms are
    evaluated through Cholesky solves; the backward pass needs the
    covariance inverse, which is assembled from the triangular factor.
    """
    y = np.asarray(y, dtype=np.float64)
    md, cd = mean.data, cov.data
    if md.shape != y.shape or cd.shape != (md.shape[0], md.shape[1], md.shape[1]):
        raise ValueError("shape mismatch in gaussian_nll")
    batch, d = md.shape
    residual = y - md
    factors = np.empty_like(cd)
    z = np.empty_like(residual)
    logdet = np.empty(batch)
    for i in range(batch):
        factor, _ = jittered_cholesky(cd[i])
        half = solve_triangular(factor, residual[i], lower=True)
        z[i] = solve_triangular(factor.T, half, lower=False)
        logdet[i] = 2.0 * np.log(np.diag(factor)).sum()
        factors[i] = factor
    out = 0.5 * np.einsum("bi,bi->b", residual, z) + 0.5 * logdet

    def backward(g):
        if mean.requires_grad:
            mean._accumulate(-g[:, None] * z)
        if cov.requires_grad:
            dcov = np.empty_like(cd)
            eye = np.eye(d)
            for i in range(batch):
                half = solve_triangular(factors[i], eye, lower=True)
                inv = half.T @ half
                dcov[i] = 0.5 * g[i] * (inv - np.outer(z[i], z[i]))
            cov._accumulate(dcov)

    return Tensor(out, parents=(mean, cov), backward=backward)


def grad_check(fn, inputs, eps: float = 1e-5, tolerance: float | None = None):
    """Compare analytic gradients of ``fn(*inputs)`` to central differences.

    ``fn`` must build a fresh scalar graph from the given leaf tensors on
    every call.  Returns a report dict with the largest relative error; if
    ``tolerance`` is given and exceeded, raises :class:`NumericsError`.

    The relative error uses ``|a - n| / max(|a| + |n|, 1)`` so tiny
    gradients are judged on an absolute scale.
    """
    out = fn(*inputs)
    for t in inputs:
        t.grad = None
    out.backward()
    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
    max_rel = 0.0
    checked = 0
    for t, ana in zip(inputs, analytic):
        flat = t.data.ravel()
        aflat = ana.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(fn(*inputs).data)
            flat[j] = orig - eps
            lo = float(fn(*inputs).data)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * eps)
            rel = abs(aflat[j] - numeric) / max(abs(aflat[j]) + abs(numeric), 1.0)
            max_rel = max(max_rel, rel)
            checked += 1
    report = {"max_rel_err": max_rel, "coords_checked": checked, "eps": eps}
    if tolerance is not None and max_rel > tolerance:
        raise NumericsError(
            f"gradient check failed: max rel err {max_rel:.3e} > {tolerance:.1e}"
        )
    return report
