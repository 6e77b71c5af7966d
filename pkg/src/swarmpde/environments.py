"""Differentiable transition operators for the in-scope PDEs.

Each environment advances (field, swarm) by one control step of
``control_substeps`` solver substeps with the action held constant, entirely
on the tape, so losses differentiate through the unrolled physics.

Schemes:

* heat 1D: Crank-Nicolson, tridiagonal interior solve, Dirichlet.
* Fisher-KPP 1D: operator splitting, explicit Euler for reaction + forcing,
  fully implicit diffusion, Dirichlet.
* KS 1D: pseudo-spectral semi-implicit Crank-Nicolson on a periodic grid,
  linear symbol k^2 - k^4 treated trapezoidally, advection in conservation
  form -0.5 d/dx(z^2) evaluated in real space.
* heat 2D: Peaceman-Rachford ADI, forcing split evenly across half-steps,
  Dirichlet. Obstacles only enter the losses, never the PDE.
* density 2D: semi-Lagrangian backward trace with bilinear interpolation,
  then dimension-split implicit diffusion in flux form (Neumann, exactly
  mass-conserving), agents steer the velocity field.

Forcing in the implicit schemes enters explicitly (evaluated at t).
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import solver_kernels as sk
from .actuation import (ActuationConfig, AgentSwarm, ObservationSpec,
                        lattice_positions, total_forcing, update_positions)
from .errors import ConfigError, NumericError
from .fields import Field, Grid, ProblemInstance, bridge_correct, fkpp_transform, \
    gaussian_blob, sample_grf


@dataclass(frozen=True)
class PhysicsParams:
    nu: float = 0.0
    rho: float = 0.0
    dt: float = 1e-3
    control_substeps: int = 1
    horizon: int = 100
    forcing_scale: float = 1.0     # 1/M for the normalized mean-field variant
    qnat: tuple = (0.0, 0.0)
    alpha: float = 1.0             # position gain in the density environment
    t_warm: float = 0.0
    bank_size: int = 512
    bank_stride: float = 20.0
    ell_init: float = 0.2
    ell_target: float = 0.4
    blob_width: float = 0.06
    blob_mass: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("solver step must be positive")
        if self.control_substeps < 1:
            raise ConfigError("action repeat must be >= 1")


@dataclass
class EnvState:
    field: object          # ad.Tensor over grid extents
    swarm: AgentSwarm
    t: float


@dataclass
class StepInfo:
    forcing: object = None       # total forcing field for this control step
    excursion: object = None     # per-agent squared pre-clamp overshoot


def _seeds(seed, n, salt):
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFF, salt])
    return [int(s) for s in ss.generate_state(n)]


def _check_finite(values, kind):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{kind}: solver state is no longer finite (blow-up)")


def _lift(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


class Environment:
    """Shared rollout plumbing; subclasses provide the physics."""

    kind = "base"
    static = False
    emits_u = True
    emits_v = True
    _salt = 0

    def __init__(self, grid, params, act, obs, r_safe=0.0, obstacles=()):
        self.grid = grid
        self.params = params
        self.act = act
        self.obs = obs
        self.r_safe = r_safe
        self.obstacles = list(obstacles)
        act.validate(grid)

    @property
    def solver_dt(self):
        return self.params.dt

    @property
    def control_dt(self):
        return self.params.dt * self.params.control_substeps

    def initial_positions(self, M):
        return lattice_positions(self.grid, M)

    def initial_state(self, instance, M, positions=None):
        pos = self.initial_positions(M) if positions is None else np.asarray(positions, float)
        vel = None if self.static else ad.Tensor(np.zeros_like(pos))
        swarm = AgentSwarm(ad.Tensor(pos), vel, kinetic=not self.static)
        return EnvState(ad.Tensor(instance.z0.values), swarm, 0.0)

    def forcing(self, state, u):
        f = total_forcing(self.grid, state.swarm.positions, u, self.act.sigma)
        if self.params.forcing_scale != 1.0:
            f = ad.mul(f, self.params.forcing_scale)
        return f

    def step(self, state, u=None, v=None, k=None):
        """One control step: build the forcing once, hold it for k solver
        substeps, then advance the positions with the control timestep."""
        k = self.params.control_substeps if k is None else k
        f = self.forcing(state, u) if self.emits_u else None
        z = self.advance(state.field, f, k, state)
        _check_finite(z.data, self.kind)
        excursion = ad.Tensor(np.zeros(state.swarm.M))
        swarm = state.swarm
        if not self.static and v is not None:
            swarm, excursion = update_positions(
                state.swarm, v, self.control_dt, self.grid, gain=self.params.alpha)
        new = EnvState(z, swarm, state.t + self.control_dt * 1.0)
        return new, StepInfo(forcing=f, excursion=excursion)

    def advance(self, z, f, k, state):
        for _ in range(k):
            z = self.solver_substep(z, f, state)
        return z

    def solver_substep(self, z, f, state):
        raise NotImplementedError

    def uncontrolled_step(self, values):
        """Plain-numpy solver substep with zero forcing (spin-up fast path)."""
        zero = ad.Tensor(np.zeros_like(values))
        return self.solver_substep(ad.Tensor(values), zero, None).data

    def make_instance(self, seed):
        raise NotImplementedError


def step_with_action_repeat(env, state, u, v, k):
    """Hold the action constant across ``k`` solver substeps."""
    if k < 1:
        raise ConfigError("action repeat must be >= 1")
    return env.step(state, u, v, k=k)


# ------------------------------------------------------------------ 1D heat

class Heat1D(Environment):
    kind = "heat1d"
    static = False
    _salt = 11

    def __init__(self, grid, params, act, obs, r_safe=0.0, obstacles=()):
        super().__init__(grid, params, act, obs, r_safe, obstacles)
        n = grid.extents[0]
        h = grid.spacing[0]
        self._r = params.nu * params.dt / (2.0 * h * h)
        m = n - 2
        self._diag = np.full(m, 1.0 + 2.0 * self._r)
        self._off = np.full(m - 1, -self._r)

    def advance(self, z, f, k, state):
        return sk.cn_dirichlet_multistep(z, f, self._r, self._off, self._diag,
                                         self.params.dt, k)

    def solver_substep(self, z, f, state):
        rhs = ad.add(z, ad.mul(ad.second_diff(z, 0), self._r))
        rhs_int = ad.add(rhs[1:-1], ad.mul(f[1:-1], self.params.dt))
        z_int = ad.tridiag_solve(self._off, self._diag, self._off, rhs_int)
        zero = ad.Tensor(np.zeros(1))
        return ad.concat([zero, z_int, zero], axis=0)

    def make_instance(self, seed):
        s0, s1 = _seeds(seed, 2, self._salt)
        z0 = bridge_correct(sample_grf(self.grid, self.params.ell_init, s0))
        zt = bridge_correct(sample_grf(self.grid, self.params.ell_target, s1))
        return ProblemInstance(z0, zt, [], seed)


class Fkpp1D(Heat1D):
    kind = "fkpp1d"
    _salt = 13

    def __init__(self, grid, params, act, obs, r_safe=0.0, obstacles=()):
        super().__init__(grid, params, act, obs, r_safe, obstacles)
        n = grid.extents[0]
        h = grid.spacing[0]
        q = params.nu * params.dt / (h * h)
        m = n - 2
        self._diag = np.full(m, 1.0 + 2.0 * q)
        self._off = np.full(m - 1, -q)

    def advance(self, z, f, k, state):
        return sk.reaction_diffusion_multistep(z, f, self.params.rho, self._off,
                                               self._diag, self.params.dt, k)

    def solver_substep(self, z, f, state):
        react = ad.mul(ad.mul(z, ad.sub(1.0, z)), self.params.rho)
        zstar = ad.add(z, ad.mul(ad.add(react, f), self.params.dt))
        z_int = ad.tridiag_solve(self._off, self._diag, self._off, zstar[1:-1])
        zero = ad.Tensor(np.zeros(1))
        return ad.concat([zero, z_int, zero], axis=0)

    def make_instance(self, seed):
        s0, s1 = _seeds(seed, 2, self._salt)
        z0 = fkpp_transform(sample_grf(self.grid, self.params.ell_init, s0))
        zt = fkpp_transform(sample_grf(self.grid, self.params.ell_target, s1))
        return ProblemInstance(z0, zt, [], seed)


# -------------------------------------------------------------------- KS 1D

class Ks1D(Environment):
    kind = "ks1d"
    static = True
    emits_v = False
    _salt = 17

    def __init__(self, grid, params, act, obs, r_safe=0.0, obstacles=()):
        super().__init__(grid, params, act, obs, r_safe, obstacles)
        if not grid.periodic:
            raise ConfigError("the KS solver needs a periodic grid")
        n = grid.extents[0]
        L = grid.lengths[0]
        k = 2.0 * np.pi * np.arange(n // 2 + 1) / L
        lam = k ** 2 - k ** 4
        self._num = 1.0 + 0.5 * params.dt * lam
        self._den = 1.0 - 0.5 * params.dt * lam
        kd = k.copy()
        if n % 2 == 0:
            kd[-1] = 0.0          # the Nyquist mode has no representable derivative
        self._kd = kd
        self._bank = {}

    def advance(self, z, f, k, state):
        return sk.ks_semi_implicit_multistep(z, f, self._kd, self._num, self._den,
                                             self.params.dt, k)

    def solver_substep(self, z, f, state):
        dt = self.params.dt
        zh = ad.rfft(z)
        s2 = ad.rfft(ad.square(z))
        # N = -0.5 d/dx(z^2): spectrum -0.5 * i k * s2
        n_re = ad.mul(s2[1:2, :], 0.5 * self._kd)
        n_im = ad.mul(s2[0:1, :], -0.5 * self._kd)
        nhat = ad.concat([n_re, n_im], axis=0)
        fh = ad.rfft(f)
        num = ad.add(ad.mul(zh, self._num), ad.mul(ad.add(nhat, fh), dt))
        return ad.irfft(ad.div(num, self._den), self.grid.extents[0])

    def uncontrolled_step(self, values):
        dt = self.params.dt
        zh = np.fft.rfft(values)
        s2 = np.fft.rfft(values * values)
        nhat = -0.5j * self._kd * s2
        out = np.fft.irfft((zh * self._num + dt * nhat) / self._den, self.grid.extents[0])
        return out

    def _attractor_bank(self, seed):
        key = int(seed)
        if key not in self._bank:
            rng = np.random.default_rng(np.random.SeedSequence([key, self._salt]))
            z = 0.01 * rng.standard_normal(self.grid.extents)
            z -= z.mean()
            warm_steps = int(round(self.params.t_warm / self.params.dt))
            stride_steps = max(1, int(round(self.params.bank_stride / self.params.dt)))
            for _ in range(warm_steps):
                z = self.uncontrolled_step(z)
            _check_finite(z, self.kind)
            bank = np.empty((self.params.bank_size,) + tuple(self.grid.extents))
            for i in range(self.params.bank_size):
                bank[i] = z
                for _ in range(stride_steps):
                    z = self.uncontrolled_step(z)
            _check_finite(z, self.kind)
            self._bank.clear()             # one bank per (env, seed) is plenty
            self._bank[key] = bank
        return self._bank[key]

    def make_instance(self, seed):
        # Desk-scale stand-in for a per-instance 5000-unit spin-up: one long
        # warmed trajectory per bank seed, snapshots taken every bank_stride
        # time units, sampled by the instance seed.
        s_bank, s_pick = _seeds(seed, 2, self._salt)
        bank = self._attractor_bank(0)
        idx = int(np.random.default_rng(s_pick).integers(len(bank)))
        z0 = Field(self.grid, bank[idx].copy())
        zt = Field(self.grid, np.zeros(self.grid.extents))
        return ProblemInstance(z0, zt, [], seed)


# ------------------------------------------------------------------ 2D heat

class Heat2D(Environment):
    kind = "heat2d"
    static = False
    _salt = 19

    def __init__(self, grid, params, act, obs, r_safe=0.0, obstacles=()):
        super().__init__(grid, params, act, obs, r_safe, obstacles)
        nx, ny = grid.extents
        hx, hy = grid.spacing
        self._rx = params.nu * params.dt / (2.0 * hx * hx)
        self._ry = params.nu * params.dt / (2.0 * hy * hy)
        self._dx = np.full(nx - 2, 1.0 + 2.0 * self._rx)
        self._ox = np.full(nx - 3, -self._rx)
        self._dy = np.full(ny - 2, 1.0 + 2.0 * self._ry)
        self._oy = np.full(ny - 3, -self._ry)

    def _pad(self, z_int):
        nx, ny = self.grid.extents
        row = ad.Tensor(np.zeros((1, ny - 2)))
        z = ad.concat([row, z_int, row], axis=0)
        col = ad.Tensor(np.zeros((nx, 1)))
        return ad.concat([col, z, col], axis=1)

    def solver_substep(self, z, f, state):
        half = 0.5 * self.params.dt
        # implicit in x, explicit in y
        rhs = ad.add(ad.add(z, ad.mul(ad.second_diff(z, 1), self._ry)), ad.mul(f, half))
        z_int = ad.tridiag_solve(self._ox, self._dx, self._ox, rhs[1:-1, 1:-1])
        zs = self._pad(z_int)
        # implicit in y, explicit in x
        rhs2 = ad.add(ad.add(zs, ad.mul(ad.second_diff(zs, 0), self._rx)), ad.mul(f, half))
        rhs2_t = ad.transpose(rhs2[1:-1, 1:-1], (1, 0))
        z2_t = ad.tridiag_solve(self._oy, self._dy, self._oy, rhs2_t)
        return self._pad(ad.transpose(z2_t, (1, 0)))

    def make_instance(self, seed):
        s0, s1 = _seeds(seed, 2, self._salt)
        z0 = bridge_correct(sample_grf(self.grid, self.params.ell_init, s0))
        zt = bridge_correct(sample_grf(self.grid, self.params.ell_target, s1))
        return ProblemInstance(z0, zt, list(self.obstacles), seed)


# ------------------------------------------------------------ 2D density

class Density2D(Environment):
    kind = "density2d"
    static = False
    emits_u = False
    _salt = 23

    def __init__(self, grid, params, act, obs, r_safe=0.0, obstacles=()):
        super().__init__(grid, params, act, obs, r_safe, obstacles)
        if grid.bc != "neumann":
            raise ConfigError("the density environment needs zero-flux boundaries")
        nx, ny = grid.extents
        # diffusion acts in grid-cell units (the advection-dominated "mild
        # smoothing" regime): with a physical reading of nu the field flattens
        # completely within the horizon and, since the backward-trace scheme
        # obeys a maximum principle, no control could ever re-sharpen it
        cx = params.nu * params.dt
        cy = params.nu * params.dt
        # mirror-ghost Neumann rows ([-2, 2] at the walls): the implicit solve
        # then conserves the trapezoid-quadrature mass exactly, matching the
        # convention every mass metric in this package uses
        self._dx = np.full(nx, 1.0 + 2.0 * cx)
        self._oxl = np.full(nx - 1, -cx)
        self._oxl[-1] = -2.0 * cx
        self._oxu = np.full(nx - 1, -cx)
        self._oxu[0] = -2.0 * cx
        self._dy = np.full(ny, 1.0 + 2.0 * cy)
        self._oyl = np.full(ny - 1, -cy)
        self._oyl[-1] = -2.0 * cy
        self._oyu = np.full(ny - 1, -cy)
        self._oyu[0] = -2.0 * cy
        self._ix = np.broadcast_to(np.arange(nx, dtype=np.float64)[:, None], (nx, ny))
        self._iy = np.broadcast_to(np.arange(ny, dtype=np.float64)[None, :], (nx, ny))

    def velocity_field(self, state, v):
        # peak-1 envelopes: each agent injects at most |v_i| of local speed,
        # which is what "maximum intensity v_max" means for a velocity source
        b = sk.gaussian_kernels(_lift(state.swarm.positions), self.grid.coords(),
                                self.act.sigma, normalized=False)
        m = state.swarm.M
        vx = ad.reshape(_lift(v)[:, 0:1], (m, 1, 1))
        vy = ad.reshape(_lift(v)[:, 1:2], (m, 1, 1))
        qx = ad.add(ad.tsum(ad.mul(vx, b), axis=0), self.params.qnat[0])
        qy = ad.add(ad.tsum(ad.mul(vy, b), axis=0), self.params.qnat[1])
        return qx, qy

    def advect_diffuse(self, rho, qx, qy):
        dt = self.params.dt
        hx, hy = self.grid.spacing
        ci = ad.sub(self._ix, ad.mul(qx, dt / hx))
        cj = ad.sub(self._iy, ad.mul(qy, dt / hy))
        rho_adv = ad.bilinear(rho, ci, cj)
        z = ad.tridiag_solve(self._oxl, self._dx, self._oxu, rho_adv)
        z_t = ad.tridiag_solve(self._oyl, self._dy, self._oyu, ad.transpose(z, (1, 0)))
        return ad.transpose(z_t, (1, 0))

    def step(self, state, u=None, v=None, k=None):
        k = self.params.control_substeps if k is None else k
        qx, qy = self.velocity_field(state, v)
        z = state.field
        for _ in range(k):
            z = self.advect_diffuse(z, qx, qy)
        _check_finite(z.data, self.kind)
        swarm, excursion = update_positions(
            state.swarm, v, self.control_dt, self.grid, gain=self.params.alpha)
        new = EnvState(z, swarm, state.t + self.control_dt)
        return new, StepInfo(forcing=None, excursion=excursion)

    def uncontrolled_step(self, values):
        zero = ad.Tensor(np.zeros_like(values))
        return self.advect_diffuse(ad.Tensor(values), zero, zero).data

    def make_instance(self, seed):
        s0, s1 = _seeds(seed, 2, self._salt)
        rng0 = np.random.default_rng(s0)
        rng1 = np.random.default_rng(s1)
        lx, ly = self.grid.lengths

        def draw(rng):
            return (rng.uniform(0.2 * lx, 0.8 * lx), rng.uniform(0.2 * ly, 0.8 * ly))

        w, m0 = self.params.blob_width, self.params.blob_mass
        z0 = gaussian_blob(self.grid, draw(rng0), w, m0)
        zt = gaussian_blob(self.grid, draw(rng1), w, m0)
        return ProblemInstance(z0, zt, [], seed)


ENV_KINDS = {
    "heat1d": Heat1D,
    "fkpp1d": Fkpp1D,
    "ks1d": Ks1D,
    "heat2d": Heat2D,
    "heat2d_obstacles": Heat2D,
    "density2d": Density2D,
}


def build_environment(kind, grid, params, act, obs, r_safe=0.0, obstacles=()):
    if kind not in ENV_KINDS:
        raise ConfigError(f"unknown environment kind {kind!r}; known: {sorted(ENV_KINDS)}")
    env = ENV_KINDS[kind](grid, params, act, obs, r_safe=r_safe, obstacles=obstacles)
    env.kind = kind
    return env
