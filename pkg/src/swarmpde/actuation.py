"""Gaussian actuation kernels, the per-agent observation operator, and agent
kinematics.

Conventions fixed here and relied on everywhere else:

* Kernel evaluation is continuous in the agent coordinate, so position
  gradients flow through the forcing. Observation windows snap to the nearest
  grid node and are treated as constant w.r.t. the position (stop-gradient):
  the window index arithmetic is integer and would not be differentiable
  anyway.
* Non-periodic windows clamp (replicate the edge index); periodic windows
  wrap. Patch channels are [error, d(error)/dx(, d(error)/dy)] with central
  differences on the mesh.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError


@dataclass
class AgentSwarm:
    """Positions/velocities for M agents. During a differentiable rollout the
    arrays are ad.Tensors; at rest they are plain ndarrays."""

    positions: object            # (M, dim)
    velocities: object           # (M, dim) or None for static swarms
    kinetic: bool

    @property
    def M(self):
        return _data(self.positions).shape[0]

    def positions_array(self):
        return _data(self.positions)


@dataclass(frozen=True)
class ActuationConfig:
    sigma: float
    u_max: float
    v_max: float
    control_substeps: int = 1

    def validate(self, grid):
        h = max(grid.spacing)
        if self.sigma < 2.0 * h:
            raise ConfigError(
                f"kernel width {self.sigma} is below the hard floor of 2 grid spacings ({2*h:.4g})")
        if self.sigma < 3.0 * h:
            warnings.warn(f"kernel width {self.sigma} spans fewer than 3 grid points",
                          stacklevel=2)


@dataclass(frozen=True)
class ObservationSpec:
    """Window of ``window_points`` nodes per axis centered at the agent;
    ``None`` means the full field is observed. Full-field observations may
    subsample at ``stride`` (the role the pooling stages of a convolutional
    encoder would play for a flattened-input branch network)."""

    window_points: int | None = 20
    stride: int = 1

    @property
    def full_field(self):
        return self.window_points is None

    def strided_extents(self, grid):
        return tuple(len(range(0, n, self.stride)) for n in grid.extents)

    def n_features(self, grid):
        if self.full_field:
            return (grid.dim + 1) * int(np.prod(self.strided_extents(grid)))
        return (grid.dim + 1) * self.window_points ** grid.dim


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _lift(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


# ------------------------------------------------------------------- kernels

def kernel_field(grid, xi, sigma):
    """Gaussian actuation footprint b(x, xi) = (2 pi s^2)^(-d/2)
    exp(-|x - xi|^2 / (2 s^2)) at the grid nodes, one slab per agent.

    ``xi`` has shape (M, dim); the result has shape (M, *extents) and is
    differentiable in ``xi`` (continuous coordinates, never snapped).
    """
    from .solver_kernels import gaussian_kernels
    xi = _lift(xi)
    if xi.ndim != 2:
        raise ContractError("agent coordinates must have shape (M, dim)")
    return gaussian_kernels(xi, grid.coords(), sigma)


def total_forcing(grid, xi, u, sigma):
    """Unnormalized superposition sum_i u_i b(x, xi_i); linear in u."""
    b = kernel_field(grid, xi, sigma)
    u = _lift(u)
    shape = (-1,) + (1,) * grid.dim
    return ad.tsum(ad.mul(ad.reshape(u, shape), b), axis=0)


# --------------------------------------------------------------- observation

def _shift_index(idx, delta, n, periodic):
    if periodic:
        return (idx + delta) % n
    return np.clip(idx + delta, 0, n - 1)


def _window_indices(grid, centers, w):
    """Per-agent node indices of a w-wide window per axis. Periodic axes
    wrap; non-periodic axes clamp every window index at the boundary."""
    offs = np.arange(w) - w // 2
    out = []
    for axis in range(grid.dim):
        n = grid.extents[axis]
        idx = centers[:, axis][:, None] + offs[None, :]
        out.append(_shift_index(idx, 0, n, grid.periodic))
    return out


def nearest_node(grid, xi_data):
    """Nearest grid node multi-index for each agent position (stop-gradient)."""
    centers = np.empty(xi_data.shape, dtype=np.int64)
    for axis in range(grid.dim):
        h = grid.spacing[axis]
        n = grid.extents[axis]
        c = np.rint(xi_data[:, axis] / h).astype(np.int64)
        centers[:, axis] = c % n if grid.periodic else np.clip(c, 0, n - 1)
    return centers


def observe(z, z_target, xi, spec, grid):
    """Per-agent error patch with mesh-gradient channels.

    Returns a Tensor of shape (M, C, w) in 1D or (M, C, w, w) in 2D with
    channels [e, de/dx(, de/dy)], e = z - z_target. A full-field spec returns
    one shared patch of shape (1, C, *extents) regardless of M.
    """
    z = _lift(z)
    e = ad.sub(z, _lift(z_target))
    if spec.full_field:
        return _full_field_patch(e, grid, spec.stride)
    w = spec.window_points
    if any(w > n for n in grid.extents):
        raise ConfigError(f"observation window {w} exceeds the grid {grid.extents}")
    centers = nearest_node(grid, _data(xi))
    axis_idx = _window_indices(grid, centers, w)
    if grid.dim == 1:
        n = grid.extents[0]
        h = grid.spacing[0]
        idx = axis_idx[0]
        ip = _shift_index(idx, +1, n, grid.periodic)
        im = _shift_index(idx, -1, n, grid.periodic)
        ep = ad.gather(e, idx)
        de = ad.mul(ad.sub(ad.gather(e, ip), ad.gather(e, im)), 1.0 / (2.0 * h))
        m = idx.shape[0]
        return ad.concat([ad.reshape(ep, (m, 1, w)), ad.reshape(de, (m, 1, w))], axis=1)
    nx, ny = grid.extents
    hx, hy = grid.spacing
    ix = axis_idx[0][:, :, None]          # (M, w, 1)
    iy = axis_idx[1][:, None, :]          # (M, 1, w)
    flat = ix * ny + iy
    flat_xp = _shift_index(ix, +1, nx, grid.periodic) * ny + iy
    flat_xm = _shift_index(ix, -1, nx, grid.periodic) * ny + iy
    flat_yp = ix * ny + _shift_index(iy, +1, ny, grid.periodic)
    flat_ym = ix * ny + _shift_index(iy, -1, ny, grid.periodic)
    ep = ad.gather(e, flat)
    dex = ad.mul(ad.sub(ad.gather(e, flat_xp), ad.gather(e, flat_xm)), 1.0 / (2.0 * hx))
    dey = ad.mul(ad.sub(ad.gather(e, flat_yp), ad.gather(e, flat_ym)), 1.0 / (2.0 * hy))
    m = flat.shape[0]
    parts = [ad.reshape(t, (m, 1, w, w)) for t in (ep, dex, dey)]
    return ad.concat(parts, axis=1)


def _full_field_patch(e, grid, stride=1):
    if grid.dim == 1:
        n = grid.extents[0]
        h = grid.spacing[0]
        idx = np.arange(0, n, stride)
        ip = _shift_index(idx, +1, n, grid.periodic)
        im = _shift_index(idx, -1, n, grid.periodic)
        ep = ad.gather(e, idx)
        de = ad.mul(ad.sub(ad.gather(e, ip), ad.gather(e, im)), 1.0 / (2.0 * h))
        m = idx.size
        return ad.concat([ad.reshape(ep, (1, 1, m)), ad.reshape(de, (1, 1, m))], axis=1)
    nx, ny = grid.extents
    hx, hy = grid.spacing
    ix = np.arange(0, nx, stride)[:, None]
    iy = np.arange(0, ny, stride)[None, :]
    flat = ix * ny + iy
    xp = _shift_index(ix, +1, nx, grid.periodic) * ny + iy
    xm = _shift_index(ix, -1, nx, grid.periodic) * ny + iy
    yp = ix * ny + _shift_index(iy, +1, ny, grid.periodic)
    ym = ix * ny + _shift_index(iy, -1, ny, grid.periodic)
    ep = ad.gather(e, flat)
    dex = ad.mul(ad.sub(ad.gather(e, xp), ad.gather(e, xm)), 1.0 / (2.0 * hx))
    dey = ad.mul(ad.sub(ad.gather(e, yp), ad.gather(e, ym)), 1.0 / (2.0 * hy))
    mx, my = ix.size, iy.size
    parts = [ad.reshape(t, (1, 1, mx, my)) for t in (ep, dex, dey)]
    return ad.concat(parts, axis=1)


# ---------------------------------------------------------------- kinematics

def update_positions(swarm, v, dt, grid, gain=1.0):
    """Euler position update, clamped to the domain.

    Returns ``(new_swarm, excursion)`` where ``excursion`` is the per-agent
    squared pre-clamp overshoot distance: clamping itself kills the gradient,
    so the boundary penalty must see the raw step.
    """
    if not swarm.kinetic:
        return swarm, ad.Tensor(np.zeros(swarm.M))
    raw = ad.add(_lift(swarm.positions), ad.mul(_lift(v), gain * dt))
    hi = np.asarray(grid.lengths, dtype=np.float64)[None, :]
    over = ad.relu(ad.sub(raw, hi))
    under = ad.relu(ad.neg(raw))
    excursion = ad.tsum(ad.add(ad.square(over), ad.square(under)), axis=1)
    clamped = ad.clamp(raw, 0.0, hi)
    return AgentSwarm(clamped, v, kinetic=True), excursion


def lattice_positions(grid, M):
    """Deterministic deployment rule for M agents.

    1D non-periodic: uniform lattice with both margins, spacing L/(M+1).
    1D periodic: spacing L/M starting at 0.
    2D: ceil(sqrt(M))-per-axis lattice (same margin rule per axis), first M
    sites in row-major order.
    """
    if grid.dim == 1:
        L = grid.lengths[0]
        if grid.periodic:
            pts = np.arange(M) * (L / M)
        else:
            pts = np.arange(1, M + 1) * (L / (M + 1))
        return pts[:, None]
    side = int(np.ceil(np.sqrt(M)))
    axes = []
    for a in range(2):
        L = grid.lengths[a]
        if grid.periodic:
            axes.append(np.arange(side) * (L / side))
        else:
            axes.append(np.arange(1, side + 1) * (L / (side + 1)))
    xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    return pts[:M]
