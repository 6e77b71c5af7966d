"""Reproduction harness: headline metrics with paired uncontrolled baselines,
zero-shot cardinality sweeps, steady-state effort scaling, agent-failure
robustness, noise/FOV/physics ablations, and the numerical check that
finite-swarm policy gradients settle toward a swarm-size-independent limit.

All evaluations are seed-deterministic, and the controlled/uncontrolled pair
always shares instance seeds so relative numbers are exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .actuation import lattice_positions
from .errors import ConfigError
from .objectives import LossWeights
from .training import episode_seed, rollout

STABILITY_THRESHOLD_PCT = 250.0


@dataclass
class EvalResult:
    metric_mean: float
    metric_std: float
    per_episode: list
    uncontrolled_mean: float
    uncontrolled_std: float
    uncontrolled_per_episode: list

    @property
    def ratio(self):
        return self.metric_mean / self.uncontrolled_mean if self.uncontrolled_mean else np.inf


@dataclass
class SweepResult:
    m_values: list
    metric: list
    relative_pct: list
    m_train: int
    stable: list          # relative <= 250% of the training baseline

    def rows(self):
        return list(zip(self.m_values, self.metric, self.relative_pct, self.stable))


@dataclass
class SlopeScan:
    m_values: list
    effort: list          # steady-state mean of sum_i u_i^2 per swarm size
    slope: float


@dataclass
class GradSeries:
    m_values: list
    gradients: dict = dc_field(default_factory=dict)   # M -> flat gradient
    distances: list = dc_field(default_factory=list)   # d_M for consecutive pairs

    @property
    def monotone_decreasing(self):
        return all(a > b for a, b in zip(self.distances, self.distances[1:]))


def headline_metric(env, trace):
    """Per-env headline number: final-20%-window mean tracking MSE (target 0
    for the stabilization task, so it is the mean energy), or the terminal
    moment-matching loss for density transport."""
    if env.kind == "density2d":
        return trace.moment_terminal
    tail = max(1, len(trace.track_series) // 5)
    return float(np.mean(trace.track_series[-tail:]))


def _zero_controller(arch, m):
    zeros = np.zeros((m, arch.action.action_dim))
    return lambda state, t: ad.Tensor(zeros)


def run_episode(env, instance, params, weights, M, noise=pol.NoiseConfig(),
                noise_rng=None, controller=None, kill_mask=None, action_mask=None,
                positions=None):
    _, _, trace, _ = rollout(env, instance, params, weights, M=M, noise=noise,
                             noise_rng=noise_rng, with_tape=False, controller=controller,
                             kill_mask=kill_mask, action_mask=action_mask,
                             positions=positions)
    return trace


def _paired_episode(params, env, weights, m, seed, i, noise, kill_mask=None):
    inst = env.make_instance(episode_seed(seed, 0, i, 7))
    nrng = np.random.default_rng(episode_seed(seed, 0, i, 8))
    trace = run_episode(env, inst, params, weights, m,
                        noise=noise, noise_rng=nrng, kill_mask=kill_mask)
    base = run_episode(env, inst, params, weights, m,
                       controller=_zero_controller(params.arch, m))
    return headline_metric(env, trace), headline_metric(env, base)


def evaluate(params, env, M_test, n_episodes, seed, weights=None,
             noise=pol.NoiseConfig(), kill_mask=None):
    """Mean +/- std of the headline metric over fresh instances, plus the
    uncontrolled baseline on the same instances (zero actions)."""
    if n_episodes < 1:
        raise ConfigError("evaluation needs at least one episode")
    weights = weights or LossWeights()
    controlled, uncontrolled = [], []
    for i in range(n_episodes):
        c, u = _paired_episode(params, env, weights, M_test, seed, i, noise, kill_mask)
        controlled.append(c)
        uncontrolled.append(u)
    c, u = np.asarray(controlled), np.asarray(uncontrolled)
    return EvalResult(float(c.mean()), float(c.std()), controlled,
                      float(u.mean()), float(u.std()), uncontrolled)


def cardinality_sweep(params, env, M_list, m_train, episodes, seed, weights=None):
    """Zero-shot deployment at each swarm size, normalized by the result at
    the training size on identical instance seeds (so M_train reads 100%)."""
    if m_train not in M_list:
        raise ConfigError("the sweep list must contain the training swarm size")
    weights = weights or LossWeights()
    metric = {m: evaluate(params, env, m, episodes, seed, weights).metric_mean
              for m in M_list}
    baseline = metric[m_train]
    relative = [100.0 * metric[m] / baseline for m in M_list]
    stable = [r <= STABILITY_THRESHOLD_PCT for r in relative]
    return SweepResult(list(M_list), [metric[m] for m in M_list], relative, m_train, stable)


def failure_robustness(params, env, M, kill_fraction, episodes, seed, weights=None):
    """Deactivate a random subset of agents at t=0 (zero actions, frozen
    positions) and evaluate against the paired uncontrolled baseline."""
    if not 0.0 <= kill_fraction < 1.0:
        raise ConfigError("kill fraction must lie in [0, 1)")
    weights = weights or LossWeights()
    n_kill = int(round(kill_fraction * M))
    controlled, uncontrolled = [], []
    for i in range(episodes):
        mask = np.ones(M)
        if n_kill:
            rng = np.random.default_rng(episode_seed(seed, 0, i, 9))
            mask[rng.choice(M, size=n_kill, replace=False)] = 0.0
        c, u = _paired_episode(params, env, weights, M, seed, i,
                               pol.NoiseConfig(), kill_mask=mask)
        controlled.append(c)
        uncontrolled.append(u)
    c, u = np.asarray(controlled), np.asarray(uncontrolled)
    return EvalResult(float(c.mean()), float(c.std()), controlled,
                      float(u.mean()), float(u.std()), uncontrolled)


def self_normalization_scan(params, env, M_list, episodes, seed, weights=None,
                            window_fraction=0.7, controller_factory=None):
    """Steady-state total squared forcing intensity per swarm size and its
    log-log slope (O(1/M) self-normalization shows up as slope -1)."""
    if len(M_list) < 3:
        raise ConfigError("the effort scan needs at least 3 swarm sizes")
    weights = weights or LossWeights()
    efforts = []
    for m in M_list:
        vals = []
        for i in range(episodes):
            inst = env.make_instance(episode_seed(seed, 0, i, 7))
            controller = controller_factory(m) if controller_factory else None
            trace = run_episode(env, inst, params, weights, m, controller=controller)
            series = np.asarray(trace.u_sq_series)
            start = int(len(series) * (1.0 - window_fraction))
            vals.append(float(series[start:].mean()))
        efforts.append(float(np.mean(vals)))
    slope = float(np.polyfit(np.log(np.asarray(M_list, float)),
                             np.log(np.maximum(efforts, 1e-300)), 1)[0])
    return SlopeScan(list(M_list), efforts, slope)


# ------------------------------------------------- mean-field gradient check

def gradient_consistency_check(params, env_builder, M_list, seed, weights=None,
                               episodes=1):
    """Policy gradient at a fixed parameter vector for a ladder of swarm
    sizes, agents pinned to a uniform lattice (velocity outputs masked), on
    the normalized-forcing variant built by ``env_builder(m)`` (forcing scale
    1/m). Reports d_M = |g_M - g_2M| / |g_2M| for consecutive ladder entries;
    identical instance seeds are used at every swarm size.
    """
    weights = weights or LossWeights(
        lambda_track=1.0, lambda_effort=0.001, lambda_v=0.0, lambda_a=0.0,
        lambda_safe=0.0, lambda_bound=0.0, lambda_coll=0.0)
    series = GradSeries(list(M_list))
    for m in M_list:
        env = env_builder(m)
        acc = None
        for i in range(episodes):
            inst = env.make_instance(episode_seed(seed, 0, i, 7))
            g = lattice_gradient(env, inst, params, weights, m)
            acc = g if acc is None else acc + g
        series.gradients[m] = acc / episodes
    for a, b in zip(M_list, M_list[1:]):
        num = np.linalg.norm(series.gradients[a] - series.gradients[b])
        den = np.linalg.norm(series.gradients[b])
        series.distances.append(float(num / den))
    return series


def lattice_gradient(env, inst, params, weights, m, positions=None):
    """Flat policy gradient of the episode objective with agents held on a
    lattice (or at explicit ``positions``) and velocity outputs masked."""
    arch = params.arch
    action_mask = np.ones(arch.action.action_dim)
    if arch.action.emits_v:
        action_mask[1 if arch.action.emits_u else 0:] = 0.0
    total, _, _, tape = rollout(
        env, inst, params, weights, M=m, with_tape=True, action_mask=action_mask,
        positions=lattice_positions(env.grid, m) if positions is None else positions)
    grads = ad.backward(tape, total)
    return np.concatenate([grads[leaf.nid].reshape(-1) for leaf in tape.watched])


# -------------------------------------------------------------------- ablations

def noise_ablation(named_params, env, noise_grid, episodes, seed, weights=None):
    """{trained variant} x {evaluation noise} table."""
    rows = []
    for label, params in named_params.items():
        for sz, su in noise_grid:
            res = evaluate(params, env, env_default_m(env), episodes, seed, weights,
                           noise=pol.NoiseConfig(sz, su))
            rows.append({"variant": label, "sigma_z": sz, "sigma_u": su,
                         "metric": res.metric_mean, "uncontrolled": res.uncontrolled_mean})
    return rows


def fov_ablation(cases, M_list, episodes, seed, weights=None):
    """{FOV variant} x {swarm size} table; each case supplies the policy and
    the environment whose observation spec it was trained with."""
    rows = []
    for label, (params, env) in cases.items():
        for m in M_list:
            res = evaluate(params, env, m, episodes, seed, weights)
            rows.append({"variant": label, "m": m, "metric": res.metric_mean,
                         "uncontrolled": res.uncontrolled_mean})
    return rows


def physics_ablation(params, env_builder, overrides, episodes, seed, weights=None):
    """Evaluate one fixed policy on perturbed physics; ``env_builder`` maps an
    override dict (e.g. {"nu": 0.0}) to a rebuilt environment."""
    rows = []
    for ov in overrides:
        env = env_builder(ov)
        res = evaluate(params, env, env_default_m(env), episodes, seed, weights)
        row = {"metric": res.metric_mean, "uncontrolled": res.uncontrolled_mean}
        row.update(ov)
        rows.append(row)
    return rows


def env_default_m(env):
    if getattr(env, "default_m", None):
        return env.default_m
    raise ConfigError("environment has no default swarm size attached")


# ------------------------------------------------------------------ CSV export

def sweep_to_csv(result, path):
    with open(path, "w") as fh:
        fh.write("m,metric,relative_pct,stable\n")
        for m, metric, rel, ok in result.rows():
            fh.write(f"{m},{metric!r},{rel!r},{int(ok)}\n")


def gradseries_to_csv(series, path):
    with open(path, "w") as fh:
        fh.write("m,m_next,distance\n")
        for (a, b), d in zip(zip(series.m_values, series.m_values[1:]), series.distances):
            fh.write(f"{a},{b},{d!r}\n")


def scan_to_csv(scan, path):
    with open(path, "w") as fh:
        fh.write("m,steady_state_effort,slope\n")
        for m, e in zip(scan.m_values, scan.effort):
            fh.write(f"{m},{e!r},{scan.slope!r}\n")


def ablation_to_csv(rows, path):
    if not rows:
        raise ConfigError("nothing to write")
    cols = sorted({k for row in rows for k in row})
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(repr(row.get(c, "")) for c in cols) + "\n")
