"""Differentiable loss terms and their per-episode composition.

Terms are accumulated unweighted while a rollout runs; the episode objective
applies the configured weights. The reported tracking "MSE" convention used
everywhere in this package: grid-mean squared error, time-averaged over the
final 20% of the control horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field, fields as dc_fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError

_EPS = 1e-12

TERM_ORDER = ("track", "effort", "safe", "coll", "coll_obs", "bound", "mass",
              "smooth", "moment_terminal")


@dataclass(frozen=True)
class LossWeights:
    lambda_track: float = 5.0
    lambda_effort: float = 0.001
    lambda_v: float = 0.1
    lambda_a: float = 0.1
    lambda_safe: float = 0.0
    lambda_bound: float = 100.0
    lambda_coll: float = 1.0
    lambda_coll_obs: float = 0.0
    lambda_w: float = 0.0
    lambda_m: float = 0.0
    lambda_var: float = 0.5
    lambda_smooth: float = 0.0

    def __post_init__(self):
        for f in dc_fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")

    def for_term(self, term):
        return {
            "track": self.lambda_track, "effort": self.lambda_effort,
            "safe": self.lambda_safe, "coll": self.lambda_coll,
            "coll_obs": self.lambda_coll_obs, "bound": self.lambda_bound,
            "mass": self.lambda_m, "smooth": self.lambda_smooth,
            "moment_terminal": self.lambda_w,
        }[term]


@dataclass
class LossBreakdown:
    """Unweighted per-term sums over an episode plus the weighted total."""
    terms: dict = dc_field(default_factory=dict)
    total: float = 0.0
    per_step: dict = dc_field(default_factory=dict)
    truncated_at: int = None     # control step at which the solver blew up

    def weighted_total(self, weights):
        return sum(weights.for_term(t) * v for t, v in self.terms.items())


def _lift(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


# ------------------------------------------------------------------ the terms

def tracking_loss(z, z_target):
    """Grid-mean squared error; the quadrature weight is absorbed so the
    reported number matches the grid-mean MSE convention."""
    return ad.tmean(ad.square(ad.sub(_lift(z), _lift(z_target))))


def effort_loss(u, v, v_prev, dt, weights):
    """Mean over agents of u^2 + lambda_v |v|^2 + lambda_a |dv/dt|^2.

    An empty swarm spends no effort (defined as 0).
    """
    parts = []
    m = None
    if u is not None:
        u = _lift(u)
        m = u.shape[0]
        parts.append(ad.tsum(ad.square(u)))
    if v is not None:
        v = _lift(v)
        m = v.shape[0]
        parts.append(ad.mul(ad.tsum(ad.square(v)), weights.lambda_v))
        if v_prev is not None and weights.lambda_a > 0:
            acc = ad.mul(ad.sub(v, _lift(v_prev)), 1.0 / dt)
            parts.append(ad.mul(ad.tsum(ad.square(acc)), weights.lambda_a))
    if m in (None, 0):
        return ad.Tensor(0.0)
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.mul(total, 1.0 / m)


def forcing_magnitude_loss(forcing):
    """Grid-mean of the squared total forcing field (resolution independent)."""
    if forcing is None:
        return ad.Tensor(0.0)
    return ad.tmean(ad.square(forcing))


def collision_loss(positions, r_safe):
    """Mean over agents of sum_{j != i} ReLU(R_safe - |xi_i - xi_j|)^2."""
    positions = _lift(positions)
    m = positions.shape[0]
    if m < 2 or r_safe <= 0:
        return ad.Tensor(0.0)
    d = positions.shape[1]
    diff = ad.sub(ad.reshape(positions, (m, 1, d)), ad.reshape(positions, (1, m, d)))
    d2 = ad.tsum(ad.square(diff), axis=2)
    # diagonal pushed far outside the safe radius; the epsilon keeps the
    # sqrt adjoint finite when clamping makes two agents exactly coincide
    dist = ad.sqrt(ad.add(d2, np.eye(m) * (4.0 * r_safe ** 2 + 1.0) + _EPS))
    pair = ad.square(ad.relu(ad.sub(r_safe, dist)))
    return ad.mul(ad.tsum(pair), 1.0 / m)


def obstacle_loss(positions, obstacles, r_safe):
    """Mean over agents of sum_k ReLU(R_safe + r_k - |xi_i - c_k|)^2."""
    positions = _lift(positions)
    m = positions.shape[0]
    if m == 0 or not obstacles:
        return ad.Tensor(0.0)
    total = None
    for center, radius in obstacles:
        c = np.asarray(center, dtype=np.float64)[None, :]
        d2 = ad.tsum(ad.square(ad.sub(positions, c)), axis=1)
        dist = ad.sqrt(ad.add(d2, _EPS))
        term = ad.tsum(ad.square(ad.relu(ad.sub(r_safe + radius, dist))))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / m)


def boundary_loss(excursion):
    """Mean over agents of the squared pre-clamp domain excursion."""
    if excursion is None or excursion.shape[0] == 0:
        return ad.Tensor(0.0)
    return ad.tmean(excursion)


def smoothness_loss(v, v_prev):
    """Mean squared temporal difference of agent velocities. The defining
    formula is not pinned anywhere authoritative; off by default."""
    if v is None or v_prev is None:
        return ad.Tensor(0.0)
    m = v.shape[0]
    if m == 0:
        return ad.Tensor(0.0)
    return ad.mul(ad.tsum(ad.square(ad.sub(v, _lift(v_prev)))), 1.0 / m)


def _moments(rho, grid):
    w = grid.quad_weights()
    mass = ad.tsum(ad.mul(rho, w))
    if float(mass.data) <= 0.0:
        raise ContractError("moment matching needs a positive-mass density")
    axes = grid.coords()
    mesh = np.meshgrid(*axes, indexing="ij")
    mus = [ad.div(ad.tsum(ad.mul(rho, w * m)), mass) for m in mesh]
    spread2 = None
    for m, mu in zip(mesh, mus):
        part = ad.div(ad.tsum(ad.mul(rho, ad.mul(ad.square(ad.sub(m, mu)), w))), mass)
        spread2 = part if spread2 is None else ad.add(spread2, part)
    return mus, ad.sqrt(ad.add(spread2, _EPS)), mass


def moment_matching_loss(rho, rho_star, lam_var, grid):
    """Centroid distance plus lam_var times the spread difference, both of the
    mass-normalized densities (so rescaling either density changes nothing)."""
    rho, rho_star = _lift(rho), _lift(rho_star)
    mus, sigma, _ = _moments(rho, grid)
    mus_s, sigma_s, _ = _moments(rho_star, grid)
    d2 = None
    for mu, mu_s in zip(mus, mus_s):
        part = ad.square(ad.sub(mu, mu_s))
        d2 = part if d2 is None else ad.add(d2, part)
    centroid = ad.sqrt(ad.add(d2, _EPS))
    dsig = ad.sub(sigma, sigma_s)
    spread = ad.add(ad.relu(dsig), ad.relu(ad.neg(dsig)))   # |.| with zero subgradient at 0
    return ad.add(centroid, ad.mul(spread, lam_var))


def mass_loss(rho, m0, grid):
    """Squared deviation of the trapezoid-quadrature mass from its t=0 value."""
    mass = ad.tsum(ad.mul(_lift(rho), grid.quad_weights()))
    return ad.square(ad.sub(mass, m0))


# -------------------------------------------------------------- episode level

def episode_objective(trace, env_kind, weights):
    """Weighted sum of the per-step terms accumulated in ``trace`` (plus the
    terminal moment term for the density task).

    Returns ``(total tensor, LossBreakdown)``; the breakdown stores the
    unweighted per-term sums, so ``breakdown.weighted_total(weights)`` equals
    the total.
    """
    totals = {}
    total = None
    for term, series in trace.term_tensors.items():
        if not series:
            continue
        s = series[0]
        for t in series[1:]:
            s = ad.add(s, t)
        totals[term] = s
    for term, s in totals.items():
        wterm = ad.mul(s, weights.for_term(term))
        total = wterm if total is None else ad.add(total, wterm)
    if total is None:
        total = ad.Tensor(0.0)
    breakdown = LossBreakdown(
        terms={t: float(s.data) for t, s in totals.items()},
        total=float(total.data),
        per_step=dict(trace.term_series),
        truncated_at=getattr(trace, "truncated_at", None),
    )
    return total, breakdown
