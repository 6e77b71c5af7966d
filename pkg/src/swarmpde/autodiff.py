"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` is a thin wrapper around an ndarray. When any operand of a
primitive carries a :class:`Tape`, the application is recorded; replaying the
records in reverse order (:func:`backward`) yields exact gradients for every
watched leaf. This is what lets training losses differentiate through the
unrolled PDE solvers.

Everything is 64-bit: the implicit solvers and long unrolled horizons in this
package lose too much accuracy in float32. Tapes are single-use and confined
to one thread; parameter tensors may be shared read-only across concurrently
executing rollouts.

Each primitive is registered in :data:`PRIMITIVES` together with a sampler
that produces valid inputs, so the test suite can finite-difference check the
whole catalog generically.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tape", "Tensor", "backward", "primitive_set", "strict_numerics",
    "add", "sub", "mul", "div", "neg", "tanh", "relu", "exp", "sin", "cos",
    "square", "sqrt", "clamp", "tsum", "tmean", "matmul", "reshape",
    "transpose", "concat", "tslice", "gather", "scatter", "tridiag_solve",
    "adjoint_tridiagonal", "rfft", "irfft", "bilinear", "second_diff",
]


def strict_numerics():
    """Make NaN/Inf loud: invalid values, overflow and division by zero raise
    immediately instead of propagating silently."""
    np.seterr(divide="raise", over="raise", invalid="raise", under="ignore")


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Single-use: a tape that has been replayed by :func:`backward` refuses a
    second pass.
    """

    __slots__ = ("_records", "_next_id", "_watched", "consumed")

    def __init__(self):
        self._records = []          # (out_id, in_ids, pullback)
        self._next_id = 0
        self._watched = []          # leaf Tensors gradients are kept for
        self.consumed = False

    def _alloc(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, data, watch=False):
        """Place ``data`` on the tape as a leaf. Watched leaves receive a
        gradient from :func:`backward`."""
        t = Tensor(data, self, self._alloc())
        if watch:
            self._watched.append(t)
        return t

    def param(self, data):
        return self.leaf(data, watch=True)

    @property
    def watched(self):
        return list(self._watched)

    def __len__(self):
        return len(self._records)


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape=None, nid=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.nid}"
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        tp = t.tape
        if tp is None:
            continue
        if tape is None:
            tape = tp
        elif tape is not tp:
            raise ContractError("operands were recorded on different tapes")
    return tape


def _emit(data, tape, in_ids, pullback):
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape, tape._alloc())
    tape._records.append((out.nid, in_ids, pullback))
    return out


def _bshape(a, b):
    if a == b:
        return a
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a} with {b}") from exc


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape, output):
    """Replay ``tape`` in reverse and return ``{node_id: gradient}`` for every
    watched leaf. ``output`` must be a scalar recorded on ``tape``."""
    if not isinstance(output, Tensor) or output.tape is not tape:
        raise ContractError("output was not recorded on this tape")
    if output.shape != ():
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if tape.consumed:
        raise ContractError("tape is single-use: it has already been replayed")
    tape.consumed = True

    grads = {output.nid: np.ones((), dtype=np.float64)}
    owned = set()    # nids whose buffer we allocated and may accumulate into
    for out_id, in_ids, pullback in reversed(tape._records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        owned.discard(out_id)
        for nid, contrib in zip(in_ids, pullback(g)):
            if nid is None or contrib is None:
                continue
            held = grads.get(nid)
            if held is None:
                grads[nid] = contrib
            elif nid in owned:
                held += contrib
            else:
                grads[nid] = held + contrib
                owned.add(nid)
    out = {}
    for leaf in tape._watched:
        g = grads.get(leaf.nid)
        out[leaf.nid] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64)
    return out


# --------------------------------------------------------------------------
# primitive registry: name -> sampler(rng) -> (fn, [arrays], [differentiable])
# The test suite finite-difference checks every entry.

PRIMITIVES: dict[str, Callable] = {}


def _register(name):
    def deco(sampler):
        PRIMITIVES[name] = sampler
        return sampler
    return deco


register_primitive = _register


def primitive_set():
    """Catalog of differentiable primitives, each with a registered adjoint
    and an input sampler used by the gradient property tests."""
    from . import solver_kernels   # noqa: F401  (registers the fused kernels)
    return dict(PRIMITIVES)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a), _lift(b)
    _bshape(a.shape, b.shape)
    tape = _tape_of(a, b)
    data = a.data + b.data
    if tape is None:
        return Tensor(data)
    ash, bsh = a.shape, b.shape
    na, nb = a.nid is not None, b.nid is not None

    def pb(g):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(g, bsh) if nb else None)

    return _emit(data, tape, (a.nid, b.nid), pb)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _bshape(a.shape, b.shape)
    tape = _tape_of(a, b)
    data = a.data - b.data
    if tape is None:
        return Tensor(data)
    ash, bsh = a.shape, b.shape
    na, nb = a.nid is not None, b.nid is not None

    def pb(g):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(-g, bsh) if nb else None)

    return _emit(data, tape, (a.nid, b.nid), pb)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _bshape(a.shape, b.shape)
    tape = _tape_of(a, b)
    data = a.data * b.data
    if tape is None:
        return Tensor(data)
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    na, nb = a.nid is not None, b.nid is not None

    def pb(g):
        return (_unbroadcast(g * bd, ash) if na else None,
                _unbroadcast(g * ad, bsh) if nb else None)

    return _emit(data, tape, (a.nid, b.nid), pb)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _bshape(a.shape, b.shape)
    tape = _tape_of(a, b)
    data = a.data / b.data
    if tape is None:
        return Tensor(data)
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    na, nb = a.nid is not None, b.nid is not None

    def pb(g):
        return (_unbroadcast(g / bd, ash) if na else None,
                _unbroadcast(-g * ad / (bd * bd), bsh) if nb else None)

    return _emit(data, tape, (a.nid, b.nid), pb)


def neg(a):
    a = _lift(a)
    if a.tape is None:
        return Tensor(-a.data)
    return _emit(-a.data, a.tape, (a.nid,), lambda g: (-g,))


def _unary(a, fwd, dfn):
    a = _lift(a)
    data = fwd(a.data)
    if a.tape is None:
        return Tensor(data)
    ad = a.data

    def pb(g):
        return (g * dfn(ad, data),)

    return _emit(data, a.tape, (a.nid,), pb)


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(np.float64))


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; the gradient passes only strictly inside the bounds."""
    a = _lift(a)
    data = np.clip(a.data, lo, hi)
    if a.tape is None:
        return Tensor(data)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)

    def pb(g):
        return (g * mask,)

    return _emit(data, a.tape, (a.nid,), pb)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if a.tape is None:
        return Tensor(data)
    ash = a.shape

    def pb(g):
        if axis is None:
            return (np.broadcast_to(g, ash),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ash),)

    return _emit(data, a.tape, (a.nid,), pb)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if a.tape is None:
        return Tensor(data)
    ash = a.shape
    count = a.size if axis is None else np.prod([ash[ax] for ax in np.atleast_1d(axis)])

    def pb(g):
        if axis is None:
            return (np.broadcast_to(g / count, ash),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, ash),)

    return _emit(data, a.tape, (a.nid,), pb)


# ------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul supports 1D and 2D operands only")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)
    data = a.data @ b.data
    if tape is None:
        return Tensor(data)
    ad, bd = a.data, b.data
    na, nb = a.nid is not None, b.nid is not None

    def pb(g):
        ga = gb = None
        if a.ndim == 2 and b.ndim == 2:
            if na:
                ga = g @ bd.T
            if nb:
                gb = ad.T @ g
        elif a.ndim == 2 and b.ndim == 1:
            if na:
                ga = np.outer(g, bd)
            if nb:
                gb = ad.T @ g
        elif a.ndim == 1 and b.ndim == 2:
            if na:
                ga = g @ bd.T
            if nb:
                gb = np.outer(ad, g)
        else:
            if na:
                ga = g * bd
            if nb:
                gb = g * ad
        return (ga, gb)

    return _emit(data, tape, (a.nid, b.nid), pb)


# ----------------------------------------------------------------- shape ops

def reshape(a, shape):
    a = _lift(a)
    data = a.data.reshape(shape)
    if a.tape is None:
        return Tensor(data)
    ash = a.shape

    def pb(g):
        return (g.reshape(ash),)

    return _emit(data, a.tape, (a.nid,), pb)


def transpose(a, axes=None):
    a = _lift(a)
    data = np.transpose(a.data, axes)
    if a.tape is None:
        return Tensor(data)
    inv = None if axes is None else np.argsort(axes)

    def pb(g):
        return (np.transpose(g, inv),)

    return _emit(data, a.tape, (a.nid,), pb)


def concat(parts, axis=0):
    parts = [_lift(p) for p in parts]
    tape = _tape_of(*parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    if tape is None:
        return Tensor(data)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    nids = tuple(p.nid for p in parts)

    def pb(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(data, tape, nids, pb)


def tslice(a, key):
    """Basic (non-fancy) indexing; the adjoint writes into a zero array."""
    a = _lift(a)
    data = a.data[key]
    if a.tape is None:
        return Tensor(data)
    ash = a.shape

    def pb(g):
        gz = np.zeros(ash, dtype=np.float64)
        gz[key] = g
        return (gz,)

    return _emit(data, a.tape, (a.nid,), pb)


# ------------------------------------------------------------------ indexing

def gather(a, idx):
    """Pick flat indices ``idx`` (any integer-array shape) out of ``a``."""
    a = _lift(a)
    idx = np.asarray(idx)
    flat = a.data.reshape(-1)
    data = flat[idx]
    if a.tape is None:
        return Tensor(data)
    ash, size = a.shape, a.size

    def pb(g):
        acc = np.bincount(idx.reshape(-1), weights=np.asarray(g, dtype=np.float64).reshape(-1),
                          minlength=size)
        return (acc.reshape(ash),)

    return _emit(data, a.tape, (a.nid,), pb)


def scatter(values, idx, size):
    """Sum ``values`` into a zero vector of length ``size`` at flat indices
    ``idx`` (duplicates accumulate)."""
    values = _lift(values)
    idx = np.asarray(idx)
    if idx.shape != values.shape:
        raise ShapeError("scatter needs idx with the same shape as values")
    data = np.bincount(idx.reshape(-1), weights=values.data.reshape(-1), minlength=size)
    if values.tape is None:
        return Tensor(data)
    vsh = values.shape

    def pb(g):
        return (g[idx].reshape(vsh),)

    return _emit(data, values.tape, (values.nid,), pb)


# ----------------------------------------------------------- tridiagonal solve

def _banded(dl, d, du):
    n = d.shape[0]
    ab = np.zeros((3, n), dtype=np.float64)
    ab[0, 1:] = du
    ab[1, :] = d
    ab[2, :-1] = dl
    return ab


try:
    from scipy.linalg.lapack import dgtsv as _dgtsv
except ImportError:          # pragma: no cover - very old scipy
    _dgtsv = None


def adjoint_tridiagonal(dl, d, du, x, gbar):
    """Adjoint of ``x = solve(A, b)`` for a tridiagonal ``A``.

    Returns ``(grad_b, grad_dl, grad_d, grad_du)`` where ``grad_b`` solves
    the transposed system ``A^T y = gbar`` and the band gradients are
    assembled from ``y`` and ``x``.
    """
    dl = np.asarray(dl, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    du = np.asarray(du, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    gbar = np.asarray(gbar, dtype=np.float64)
    y = _tridiag_solve_arrays(du, d, dl, gbar)   # swapped bands = A^T
    xx = x if x.ndim == 2 else x[:, None]
    yy = y if y.ndim == 2 else y[:, None]
    grad_d = -(yy * xx).sum(axis=1)
    grad_du = -(yy[:-1] * xx[1:]).sum(axis=1)
    grad_dl = -(yy[1:] * xx[:-1]).sum(axis=1)
    return y, grad_dl, grad_d, grad_du


def _tridiag_solve_arrays(dl, d, du, b):
    if _dgtsv is not None:
        _, _, _, x, info = _dgtsv(dl, d, du, b)   # copies inputs by default
        if info != 0:
            raise NumericError(f"tridiagonal solve failed (LAPACK info={info}: "
                               "singular or badly conditioned system)")
    else:
        try:
            x = solve_banded((1, 1), _banded(dl, d, du), b, check_finite=False)
        except Exception as exc:
            raise NumericError(f"tridiagonal solve failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericError("tridiagonal solve produced non-finite values "
                           "(singular or badly conditioned system)")
    return x


def tridiag_solve(dl, d, du, b):
    """Solve ``A x = b`` with ``A`` tridiagonal (sub/main/super diagonals
    ``dl``/``d``/``du``). ``b`` may be ``(n,)`` or ``(n, k)`` for stacked
    right-hand sides.
    """
    dl, d, du, b = _lift(dl), _lift(d), _lift(du), _lift(b)
    n = d.shape[0]
    if dl.shape != (n - 1,) or du.shape != (n - 1,):
        raise ShapeError("off-diagonals must have length n-1")
    if b.shape[0] != n:
        raise ShapeError("right-hand side does not match the system size")
    tape = _tape_of(dl, d, du, b)
    x = _tridiag_solve_arrays(dl.data, d.data, du.data, b.data)
    if tape is None:
        return Tensor(x)
    dld, dd, dud = dl.data, d.data, du.data
    needs = (dl.nid is not None, d.nid is not None, du.nid is not None, b.nid is not None)

    def pb(g):
        gb, gdl, gd, gdu = adjoint_tridiagonal(dld, dd, dud, x, g)
        return (gdl if needs[0] else None,
                gd if needs[1] else None,
                gdu if needs[2] else None,
                gb if needs[3] else None)

    return _emit(x, tape, (dl.nid, d.nid, du.nid, b.nid), pb)


# ------------------------------------------------------------------- 1D FFT
# Spectra are carried as stacked real tensors of shape (2, n//2 + 1):
# row 0 the real part, row 1 the imaginary part. Convention: forward
# unnormalized, inverse scaled by 1/n (numpy's default). The adjoint of the
# linear map rfft is a rescaled irfft and vice versa; bins duplicated by the
# half-spectrum storage carry weight 2.

def _spectral_weights(n):
    nf = n // 2 + 1
    w = np.full(nf, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def rfft(a):
    """Real-to-complex FFT of a 1D signal, returned as stacked (2, n//2+1)."""
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError("rfft expects a 1D signal")
    n = a.shape[0]
    spec = np.fft.rfft(a.data)
    data = np.stack([spec.real, spec.imag])
    if a.tape is None:
        return Tensor(data)
    w = _spectral_weights(n)

    def pb(g):
        gc = (g[0] + 1j * g[1]) / w
        return (n * np.fft.irfft(gc, n=n),)

    return _emit(data, a.tape, (a.nid,), pb)


def irfft(spec, n):
    """Inverse of :func:`rfft` for stacked spectra; output length ``n``.

    The imaginary parts of the structurally real bins (k = 0 and, for even
    ``n``, the Nyquist bin) are ignored.
    """
    spec = _lift(spec)
    nf = n // 2 + 1
    if spec.shape != (2, nf):
        raise ShapeError(f"stacked spectrum must have shape (2, {nf}) for n={n}")
    sd = spec.data.copy()
    sd[1, 0] = 0.0
    if n % 2 == 0:
        sd[1, -1] = 0.0
    data = np.fft.irfft(sd[0] + 1j * sd[1], n=n)
    if spec.tape is None:
        return Tensor(data)
    w = _spectral_weights(n)

    def pb(g):
        gc = np.fft.rfft(np.asarray(g, dtype=np.float64)) * (w / n)
        return (np.stack([gc.real, gc.imag]),)

    return _emit(data, spec.tape, (spec.nid,), pb)


# ------------------------------------------------------- bilinear interpolation

def bilinear(field, ci, cj):
    """Sample a 2D field at fractional index coordinates ``(ci, cj)``.

    Coordinates are clamped to the grid; the coordinate gradient vanishes on
    the clamped boundary. Gradients flow to the field values and to both
    coordinate arrays.
    """
    field, ci, cj = _lift(field), _lift(ci), _lift(cj)
    if field.ndim != 2:
        raise ShapeError("bilinear expects a 2D field")
    if ci.shape != cj.shape:
        raise ShapeError("coordinate arrays must share a shape")
    nx, ny = field.shape
    f = field.data
    cid = np.clip(ci.data, 0.0, nx - 1.0)
    cjd = np.clip(cj.data, 0.0, ny - 1.0)
    i0 = np.minimum(cid.astype(np.int64), nx - 2)
    j0 = np.minimum(cjd.astype(np.int64), ny - 2)
    fi = cid - i0
    fj = cjd - j0
    z00 = f[i0, j0]
    z10 = f[i0 + 1, j0]
    z01 = f[i0, j0 + 1]
    z11 = f[i0 + 1, j0 + 1]
    data = (z00 * (1 - fi) * (1 - fj) + z10 * fi * (1 - fj)
            + z01 * (1 - fi) * fj + z11 * fi * fj)
    tape = _tape_of(field, ci, cj)
    if tape is None:
        return Tensor(data)
    mask_i = ((ci.data > 0.0) & (ci.data < nx - 1.0)).astype(np.float64)
    mask_j = ((cj.data > 0.0) & (cj.data < ny - 1.0)).astype(np.float64)
    needs = (field.nid is not None, ci.nid is not None, cj.nid is not None)

    def pb(g):
        g = np.asarray(g, dtype=np.float64)
        gf = gi = gj = None
        if needs[0]:
            base = i0 * ny + j0
            idx = np.concatenate([base.reshape(-1), (base + ny).reshape(-1),
                                  (base + 1).reshape(-1), (base + ny + 1).reshape(-1)])
            wts = np.concatenate([(g * (1 - fi) * (1 - fj)).reshape(-1),
                                  (g * fi * (1 - fj)).reshape(-1),
                                  (g * (1 - fi) * fj).reshape(-1),
                                  (g * fi * fj).reshape(-1)])
            gf = np.bincount(idx, weights=wts, minlength=nx * ny).reshape(nx, ny)
        if needs[1]:
            gi = g * ((z10 - z00) * (1 - fj) + (z11 - z01) * fj) * mask_i
        if needs[2]:
            gj = g * ((z01 - z00) * (1 - fi) + (z11 - z10) * fi) * mask_j
        return (gf, gi, gj)

    return _emit(data, tape, (field.nid, ci.nid, cj.nid), pb)


# ------------------------------------------------------------- stencil helper

def _second_diff_arr(z, axis):
    out = -2.0 * z
    if z.ndim == 1:
        out[:-1] += z[1:]
        out[1:] += z[:-1]
        return out
    head = (slice(None),) * (axis % z.ndim)
    lo, hi = head + (slice(None, -1),), head + (slice(1, None),)
    out[lo] += z[hi]
    out[hi] += z[lo]
    return out


def second_diff(a, axis=0):
    """Unscaled [1, -2, 1] stencil along ``axis`` with symmetric truncation at
    the ends (so the operator is self-adjoint). Callers scale by 1/h^2 and
    mask boundary rows as their boundary conditions require."""
    a = _lift(a)
    data = _second_diff_arr(a.data, axis)
    if a.tape is None:
        return Tensor(data)

    def pb(g):
        return (_second_diff_arr(np.asarray(g, dtype=np.float64), axis),)

    return _emit(data, a.tape, (a.nid,), pb)


# ---------------------------------------------------------- primitive samplers
# Each sampler returns (fn, args, differentiable_flags); fn consumes lifted
# tensors in the order of args. Inputs are kept away from kinks/singularities
# so central finite differences are valid.

@_register("add")
def _case_add(rng):
    return add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], [True, True]


@_register("sub")
def _case_sub(rng):
    return sub, [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))], [True, True]


@_register("mul")
def _case_mul(rng):
    return mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))], [True, True]


@_register("div")
def _case_div(rng):
    den = rng.uniform(0.5, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    return div, [rng.standard_normal((3, 4)), den], [True, True]


@_register("neg")
def _case_neg(rng):
    return neg, [rng.standard_normal(5)], [True]


@_register("tanh")
def _case_tanh(rng):
    return tanh, [rng.standard_normal(6)], [True]


@_register("relu")
def _case_relu(rng):
    x = rng.standard_normal(6)
    x[np.abs(x) < 0.05] = 0.1
    return relu, [x], [True]


@_register("exp")
def _case_exp(rng):
    return exp, [rng.uniform(-1.5, 1.5, 6)], [True]


@_register("sin")
def _case_sin(rng):
    return sin, [rng.standard_normal(6)], [True]


@_register("cos")
def _case_cos(rng):
    return cos, [rng.standard_normal(6)], [True]


@_register("square")
def _case_square(rng):
    return square, [rng.standard_normal(6)], [True]


@_register("sqrt")
def _case_sqrt(rng):
    return sqrt, [rng.uniform(0.5, 2.0, 6)], [True]


@_register("clamp")
def _case_clamp(rng):
    x = rng.uniform(-1.0, 1.0, 8)
    x[np.abs(np.abs(x) - 0.6) < 0.03] = 0.0
    return (lambda t: clamp(t, -0.6, 0.6)), [x], [True]


@_register("tsum")
def _case_tsum(rng):
    return (lambda t: tsum(t, axis=1)), [rng.standard_normal((4, 3))], [True]


@_register("tmean")
def _case_tmean(rng):
    return (lambda t: tmean(t, axis=0)), [rng.standard_normal((4, 3))], [True]


@_register("matmul")
def _case_matmul(rng):
    return matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], [True, True]


@_register("reshape")
def _case_reshape(rng):
    return (lambda t: reshape(t, (3, 4))), [rng.standard_normal((2, 6))], [True]


@_register("transpose")
def _case_transpose(rng):
    return (lambda t: transpose(t, (2, 0, 1))), [rng.standard_normal((2, 3, 4))], [True]


@_register("concat")
def _case_concat(rng):
    return (lambda a, b: concat([a, b], axis=1)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))], [True, True]


@_register("tslice")
def _case_tslice(rng):
    return (lambda t: tslice(t, (slice(1, 4), slice(None, None, 2)))), [rng.standard_normal((5, 6))], [True]


@_register("gather")
def _case_gather(rng):
    idx = rng.integers(0, 7, (4, 3))
    return (lambda t: gather(t, idx)), [rng.standard_normal(7)], [True]


@_register("scatter")
def _case_scatter(rng):
    idx = rng.integers(0, 9, 5)
    return (lambda v: scatter(v, idx, 9)), [rng.standard_normal(5)], [True]


@_register("tridiag_solve")
def _case_tridiag(rng):
    n = 6
    d = rng.uniform(3.0, 4.0, n)
    dl = rng.uniform(-1.0, 1.0, n - 1)
    du = rng.uniform(-1.0, 1.0, n - 1)
    b = rng.standard_normal((n, 2))
    return tridiag_solve, [dl, d, du, b], [True, True, True, True]


@_register("rfft")
def _case_rfft(rng):
    return rfft, [rng.standard_normal(8)], [True]


@_register("irfft")
def _case_irfft(rng):
    spec = rng.standard_normal((2, 5))
    spec[1, 0] = 0.0
    spec[1, -1] = 0.0
    return (lambda s: irfft(s, 8)), [spec], [True]


@_register("bilinear")
def _case_bilinear(rng):
    f = rng.standard_normal((5, 6))
    ci = rng.uniform(0.55, 3.45, 7)
    cj = rng.uniform(0.55, 4.45, 7)
    for c in (ci, cj):
        frac = c - np.floor(c)
        c[frac < 0.05] += 0.1
        c[frac > 0.95] -= 0.1
    return bilinear, [f, ci, cj], [True, True, True]


@_register("second_diff")
def _case_second_diff(rng):
    return (lambda t: second_diff(t, axis=1)), [rng.standard_normal((4, 5))], [True]
