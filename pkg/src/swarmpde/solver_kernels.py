"""Fused multi-substep solver kernels.

Unrolling an implicit scheme one tape node per numpy op makes the tape the
bottleneck, so each kernel here advances k solver substeps (action held
constant) inside a single node with a hand-derived adjoint. The arithmetic
matches the composed per-substep path bitwise; the primitive registry tests
finite-difference check these adjoints like any other primitive.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _emit, _lift, _second_diff_arr, _tape_of, \
    _tridiag_solve_arrays, register_primitive
from .errors import NumericError


def _pad1(x):
    out = np.zeros(x.shape[0] + 2)
    out[1:-1] = x
    return out


def cn_dirichlet_multistep(z, f, r, off, diag, dt, k):
    """k Crank-Nicolson substeps of 1D Dirichlet diffusion with held forcing:
    (I - rT) z' = ((I + rT) z)[interior] + dt f[interior], boundary pinned 0.
    """
    z, f = _lift(z), _lift(f)
    tape = _tape_of(z, f)
    zd = z.data
    fint = dt * f.data[1:-1]
    for _ in range(k):
        rhs = zd + r * _second_diff_arr(zd, 0)
        x = _tridiag_solve_arrays(off, diag, off, rhs[1:-1] + fint)
        zd = np.concatenate((np.zeros(1), x, np.zeros(1)))
    if tape is None:
        return Tensor(zd)
    nz, nf = z.nid is not None, f.nid is not None

    def pb(g):
        gz = np.asarray(g, dtype=np.float64)
        gf = np.zeros_like(g)
        for _ in range(k):
            y = _pad1(_tridiag_solve_arrays(off, diag, off, gz[1:-1]))
            gf[1:-1] += dt * y[1:-1]
            gz = y + r * _second_diff_arr(y, 0)
        return (gz if nz else None, gf if nf else None)

    return _emit(zd, tape, (z.nid, f.nid), pb)


def reaction_diffusion_multistep(z, f, rho, off, diag, dt, k):
    """k operator-splitting substeps: explicit Euler for the logistic reaction
    rho z (1 - z) plus held forcing, then fully implicit diffusion
    (I - qT) z' = z*[interior], boundary pinned 0."""
    z, f = _lift(z), _lift(f)
    tape = _tape_of(z, f)
    zd = z.data
    fd = f.data
    saved = []
    for _ in range(k):
        saved.append(zd)
        zstar = zd + dt * (rho * zd * (1.0 - zd) + fd)
        x = _tridiag_solve_arrays(off, diag, off, zstar[1:-1])
        zd = np.concatenate((np.zeros(1), x, np.zeros(1)))
        # the logistic term has a finite-time singularity below z=0; bail out
        # while the state is still far from float overflow so the caller can
        # truncate the episode and keep the informative prefix
        if np.max(np.abs(x)) > 1e8:
            raise NumericError("reaction runaway: |z| exceeded 1e8")
    if tape is None:
        return Tensor(zd)
    nz, nf = z.nid is not None, f.nid is not None

    def pb(g):
        gz = np.asarray(g, dtype=np.float64)
        gf = np.zeros_like(g)
        for zprev in reversed(saved):
            y = _pad1(_tridiag_solve_arrays(off, diag, off, gz[1:-1]))
            gf += dt * y
            gz = y * (1.0 + dt * rho * (1.0 - 2.0 * zprev))
        return (gz if nz else None, gf if nf else None)

    return _emit(zd, tape, (z.nid, f.nid), pb)


def ks_semi_implicit_multistep(z, f, kd, amp, den, dt, k):
    """k semi-implicit Crank-Nicolson substeps of the KS equation with held
    forcing. The linear symbol is treated trapezoidally through ``amp``/``den``
    and the advection enters in conservation form -0.5 d/dx(z^2) (so the mean
    mode is exactly conserved under zero-mean forcing).

    Adjoint note: for a diagonal spectral multiplier c, the adjoint of
    irfft(c * rfft(.)) is irfft(conj(c) * rfft(.)): the half-spectrum
    duplication weights cancel, so the backward pass is three such filters
    plus the pointwise chain rule of z^2.
    """
    z, f = _lift(z), _lift(f)
    tape = _tape_of(z, f)
    n = z.shape[0]
    zd = z.data
    fh = np.fft.rfft(f.data)
    nonlin = -0.5j * kd
    saved = []
    for _ in range(k):
        saved.append(zd)
        zh = np.fft.rfft(zd)
        s2 = np.fft.rfft(zd * zd)
        num = zh * amp + dt * (nonlin * s2 + fh)
        zd = np.fft.irfft(num / den, n)
    if tape is None:
        return Tensor(zd)
    nz, nf = z.nid is not None, f.nid is not None

    def pb(g):
        gz = np.asarray(g, dtype=np.float64)
        gf = np.zeros(n)
        for zprev in reversed(saved):
            gh = np.fft.rfft(gz) / den
            gf += dt * np.fft.irfft(gh, n)
            lin = np.fft.irfft(gh * amp, n)
            quad = np.fft.irfft(np.conj(nonlin) * dt * gh, n)
            gz = lin + 2.0 * zprev * quad
        return (gz if nz else None, gf if nf else None)

    return _emit(zd, tape, (z.nid, f.nid), pb)


def gaussian_kernels(xi, axes, sigma, normalized=True):
    """Gaussian actuation slabs b(x, xi_i) over the grid, one per agent:
    (2 pi s^2)^(-d/2) exp(-|x - xi|^2 / (2 s^2)), shape (M, *extents), or the
    peak-1 envelope exp(-|x - xi|^2 / (2 s^2)) when ``normalized`` is off.
    Differentiable in the agent coordinates via db/dxi = b (x - xi) / s^2."""
    xi = _lift(xi)
    m, d = xi.shape
    if d != len(axes):
        raise ad.ShapeError("coordinate dimension does not match the grid")
    norm = (2.0 * np.pi * sigma * sigma) ** (-0.5 * d) if normalized else 1.0
    xid = xi.data
    diffs = []
    d2 = 0.0
    for a, ax in enumerate(axes):
        shape = (m,) + (1,) * a + (-1,) + (1,) * (d - 1 - a)
        diff = ax.reshape(shape[1:]) - xid[:, a].reshape((m,) + (1,) * d)
        diffs.append(diff)
        d2 = d2 + diff * diff
    b = norm * np.exp(-d2 / (2.0 * sigma * sigma))
    if xi.tape is None:
        return Tensor(b)

    def pb(g):
        gb = np.asarray(g, dtype=np.float64) * b / (sigma * sigma)
        gxi = np.empty((m, d))
        for a in range(d):
            gxi[:, a] = (gb * diffs[a]).reshape(m, -1).sum(axis=1)
        return (gxi,)

    return _emit(b, xi.tape, (xi.nid,), pb)


def _bands(n, r):
    return np.full(n - 3, -r), np.full(n - 2, 1.0 + 2.0 * r)


@register_primitive("cn_dirichlet_multistep")
def _case_cn_multistep(rng):
    n, k = 9, 3
    r = float(rng.uniform(0.05, 0.5))
    dt = 0.01
    off, diag = _bands(n, r)
    z = rng.standard_normal(n)
    z[0] = z[-1] = 0.0
    f = rng.standard_normal(n)
    return (lambda zz, ff: cn_dirichlet_multistep(zz, ff, r, off, diag, dt, k)), [z, f], [True, True]


@register_primitive("reaction_diffusion_multistep")
def _case_rd_multistep(rng):
    n, k = 9, 3
    q = float(rng.uniform(0.05, 0.5))
    dt = 0.01
    off, diag = _bands(n, q)
    z = rng.uniform(0.0, 1.0, n)
    z[0] = z[-1] = 0.0
    f = rng.standard_normal(n)
    return (lambda zz, ff: reaction_diffusion_multistep(zz, ff, 3.0, off, diag, dt, k)), [z, f], [True, True]


@register_primitive("gaussian_kernels")
def _case_gaussian_kernels(rng):
    axes = [np.linspace(0.0, 1.0, 9), np.linspace(0.0, 1.25, 7)]
    xi = rng.uniform(0.2, 0.8, (3, 2))
    return (lambda x: gaussian_kernels(x, axes, 0.3)), [xi], [True]


@register_primitive("ks_semi_implicit_multistep")
def _case_ks_multistep(rng):
    n, k = 16, 2
    L = 22.0
    wav = 2.0 * np.pi * np.arange(n // 2 + 1) / L
    lam = wav ** 2 - wav ** 4
    dt = 0.05
    kd = wav.copy()
    kd[-1] = 0.0
    amp = 1.0 + 0.5 * dt * lam
    den = 1.0 - 0.5 * dt * lam
    z = 0.5 * rng.standard_normal(n)
    f = 0.5 * rng.standard_normal(n)
    return (lambda zz, ff: ks_semi_implicit_multistep(zz, ff, kd, amp, den, dt, k)), [z, f], [True, True]
