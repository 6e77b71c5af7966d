"""Grids, fields, and problem-instance building blocks.

Everything here is a pure function of (seed, arguments): instance generation
must be reproducible across runs and safe to call from concurrent workers
with distinct seeds.
"""
from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError, NumericError

BC_CODES = {"dirichlet": 0, "periodic": 1, "neumann": 2}
_BC_NAMES = {v: k for k, v in BC_CODES.items()}


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product grid.

    Spacing is length/(points-1) for non-periodic axes (nodes include both
    ends) and length/points for periodic axes.
    """

    extents: tuple
    lengths: tuple
    bc: str = "dirichlet"

    def __post_init__(self):
        if self.bc not in BC_CODES:
            raise ConfigError(f"unknown boundary condition {self.bc!r}")
        if len(self.extents) != len(self.lengths):
            raise ConfigError("extents and lengths must have equal rank")

    @property
    def dim(self):
        return len(self.extents)

    @property
    def periodic(self):
        return self.bc == "periodic"

    @property
    def spacing(self):
        if self.periodic:
            return tuple(L / n for L, n in zip(self.lengths, self.extents))
        return tuple(L / (n - 1) for L, n in zip(self.lengths, self.extents))

    def axis_coords(self, axis):
        n, h = self.extents[axis], self.spacing[axis]
        if self.periodic:
            return np.arange(n) * h
        return np.linspace(0.0, self.lengths[axis], n)

    def coords(self):
        return [self.axis_coords(a) for a in range(self.dim)]

    def quad_weights(self):
        """Trapezoid quadrature weights (rectangle rule on periodic axes)."""
        ws = []
        for a in range(self.dim):
            h = self.spacing[a]
            w = np.full(self.extents[a], h)
            if not self.periodic:
                w[0] = w[-1] = h / 2.0
            ws.append(w)
        out = ws[0]
        for w in ws[1:]:
            out = np.multiply.outer(out, w)
        return out


@dataclass
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != tuple(self.grid.extents):
            raise ContractError(
                f"field values {self.values.shape} do not match grid {self.grid.extents}")

    def copy(self):
        return Field(self.grid, self.values.copy())


@dataclass
class ProblemInstance:
    z0: Field
    z_target: Field
    obstacles: list = dc_field(default_factory=list)   # [(center tuple, radius)]
    seed: int = 0

    def __post_init__(self):
        if self.z0.grid != self.z_target.grid:
            raise ContractError("initial and target fields must share a grid")
        for center, _radius in self.obstacles:
            for c, L in zip(center, self.z0.grid.lengths):
                if not (0.0 <= c <= L):
                    raise ContractError(f"obstacle center {center} outside the domain")


# ------------------------------------------------------------------ sampling

@lru_cache(maxsize=32)
def _grf_cholesky(extents, lengths, bc, length_scale):
    """Cholesky factor of the RBF Gram matrix over the grid nodes, with a
    1e-8 jitter on the diagonal. Cached: grids here stay <= ~1024 nodes."""
    grid = Grid(extents, lengths, bc)
    axes = grid.coords()
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-d2 / (2.0 * length_scale ** 2))
    K[np.diag_indices_from(K)] += 1e-8
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise NumericError("GRF covariance is not positive definite") from exc


def sample_grf(grid, length_scale, seed):
    """Zero-mean Gaussian random field with RBF covariance
    exp(-|x-x'|^2 / (2 l^2)) and unit marginal variance."""
    if length_scale <= 0:
        raise ConfigError("GRF length scale must be positive")
    L = _grf_cholesky(tuple(grid.extents), tuple(grid.lengths), grid.bc, float(length_scale))
    rng = np.random.default_rng(seed)
    z = L @ rng.standard_normal(L.shape[0])
    return Field(grid, z.reshape(grid.extents))


def bridge_correct(field):
    """Subtract the linear (1D) or bilinear-edge (2D) interpolant of the
    boundary values so the result is exactly zero on every boundary node."""
    grid = field.grid
    if grid.periodic:
        raise ContractError("bridge correction is undefined on periodic grids")
    v = field.values
    if grid.dim == 1:
        u = grid.axis_coords(0) / grid.lengths[0]
        out = v - ((1.0 - u) * v[0] + u * v[-1])
        out[0] = 0.0
        out[-1] = 0.0
    elif grid.dim == 2:
        u = (grid.axis_coords(0) / grid.lengths[0])[:, None]
        w = (grid.axis_coords(1) / grid.lengths[1])[None, :]
        edges = ((1.0 - u) * v[0, :][None, :] + u * v[-1, :][None, :]
                 + (1.0 - w) * v[:, 0][:, None] + w * v[:, -1][:, None])
        corners = ((1.0 - u) * (1.0 - w) * v[0, 0] + u * (1.0 - w) * v[-1, 0]
                   + (1.0 - u) * w * v[0, -1] + u * w * v[-1, -1])
        out = v - (edges - corners)
        out[0, :] = 0.0
        out[-1, :] = 0.0
        out[:, 0] = 0.0
        out[:, -1] = 0.0
    else:
        raise ContractError("bridge correction supports 1D and 2D fields")
    return Field(grid, out)


def fkpp_transform(latent):
    """Map a latent 1D field g to exp(g) * sin^2(pi x), rescaled so the
    maximum is 1: values lie in [0, 1] and the endpoints are exactly zero."""
    grid = latent.grid
    if grid.dim != 1 or grid.periodic:
        raise ContractError("the positivity transform expects a 1D non-periodic field")
    x = grid.axis_coords(0) / grid.lengths[0]
    z = np.exp(latent.values) * np.sin(np.pi * x) ** 2
    z[0] = 0.0
    z[-1] = 0.0
    peak = z.max()
    if peak > 0:
        z = z / peak
    return Field(grid, z)


def spin_up(env, t_warm, seed, noise_std=0.01):
    """Evolve a small random perturbation without control for ``t_warm`` time
    units, projecting the state onto the system's attractor.

    ``env`` must expose ``grid``, ``solver_dt`` and
    ``uncontrolled_step(values) -> values``.
    """
    rng = np.random.default_rng(seed)
    z = noise_std * rng.standard_normal(env.grid.extents)
    z = z - z.mean()
    steps = int(round(t_warm / env.solver_dt))
    for _ in range(steps):
        z = env.uncontrolled_step(z)
        if not np.all(np.isfinite(z)):
            raise NumericError("solver blew up during spin-up")
    return Field(env.grid, z)


def gaussian_blob(grid, center, width, mass=1.0):
    """Discretized Gaussian bump normalized so its trapezoid-quadrature
    integral equals ``mass`` exactly."""
    if width < 2.0 * max(grid.spacing):
        warnings.warn(f"blob width {width} spans fewer than 2 grid cells; under-resolved",
                      stacklevel=2)
    axes = grid.coords()
    mesh = np.meshgrid(*axes, indexing="ij")
    d2 = sum((m - c) ** 2 for m, c in zip(mesh, center))
    g = np.exp(-d2 / (2.0 * width ** 2))
    integral = float((g * grid.quad_weights()).sum())
    return Field(grid, g * (mass / integral))


# ------------------------------------------------------------- serialization

_MAGIC = b"SPF0"


def field_to_bytes(field):
    grid = field.grid
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<BB", grid.dim, BC_CODES[grid.bc]))
    for n in grid.extents:
        buf.write(struct.pack("<I", n))
    for L in grid.lengths:
        buf.write(struct.pack("<d", L))
    buf.write(np.ascontiguousarray(field.values).tobytes())
    return buf.getvalue()


def field_from_bytes(blob):
    buf = io.BytesIO(blob)
    if buf.read(4) != _MAGIC:
        raise ContractError("not a serialized field")
    dim, bc_code = struct.unpack("<BB", buf.read(2))
    extents = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(dim))
    lengths = tuple(struct.unpack("<d", buf.read(8))[0] for _ in range(dim))
    grid = Grid(extents, lengths, _BC_NAMES[bc_code])
    count = int(np.prod(extents))
    values = np.frombuffer(buf.read(count * 8), dtype=np.float64).reshape(extents)
    return Field(grid, values.copy())


def save_field(field, path):
    with open(path, "wb") as fh:
        fh.write(field_to_bytes(field))


def load_field(path):
    with open(path, "rb") as fh:
        return field_from_bytes(fh.read())


def field_to_csv(field, path):
    grid = field.grid
    with open(path, "w") as fh:
        if grid.dim == 1:
            fh.write("x,value\n")
            for x, v in zip(grid.axis_coords(0), field.values):
                fh.write(f"{x!r},{v!r}\n")
        else:
            fh.write("x,y,value\n")
            xs, ys = grid.coords()
            for i, x in enumerate(xs):
                for j, y in enumerate(ys):
                    fh.write(f"{x!r},{y!r},{field.values[i, j]!r}\n")
