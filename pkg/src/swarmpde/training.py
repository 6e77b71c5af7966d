"""Self-supervised policy training: sample instances, roll out the shared
policy, backpropagate the episode objective through the solver, update with
Adam under gradient clipping and a learning-rate schedule.

Determinism contract: (config, seed) fully determines every instance seed,
noise draw, and reduction order, so reruns produce byte-identical metrics and
a mid-training checkpoint resume reproduces the uninterrupted run exactly.
One epoch = one optimizer step on one fresh batch of instances.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from . import policy as pol
from .errors import CheckpointError, ConfigError, NumericError

METRIC_COLUMNS = ("epoch", "lr", "grad_norm", "total") + obj.TERM_ORDER

_DIVERGENCE_PATIENCE = 10   # consecutive epochs with |loss| > 1e6 before aborting


@dataclass
class RolloutTrace:
    """Everything one episode produces: per-step loss-term tensors (for the
    objective), float series (for metrics), and optional state snapshots."""

    term_tensors: dict = dc_field(default_factory=dict)
    term_series: dict = dc_field(default_factory=dict)
    track_series: list = dc_field(default_factory=list)
    u_sq_series: list = dc_field(default_factory=list)
    positions: list = dc_field(default_factory=list)
    actions: list = dc_field(default_factory=list)
    fields: list = dc_field(default_factory=list)
    final_field: np.ndarray = None
    moment_terminal: float = None
    truncated_at: int = None

    def add(self, term, tensor):
        self.term_tensors.setdefault(term, []).append(tensor)
        self.term_series.setdefault(term, []).append(float(tensor.data))

    def to_csv(self, path):
        terms = sorted(self.term_series)
        with open(path, "w") as fh:
            fh.write("step,term,value\n")
            for term in terms:
                for step, value in enumerate(self.term_series[term]):
                    fh.write(f"{step},{term},{value!r}\n")


def episode_seed(seed, epoch, index, stream):
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFF, int(epoch), int(index), stream])
    return int(ss.generate_state(1)[0])


def rollout(env, instance, params, weights, M=None, noise=pol.NoiseConfig(),
            noise_rng=None, with_tape=True, controller=None, kill_mask=None,
            action_mask=None, positions=None, record_fields=0, horizon=None):
    """Unroll one episode and assemble its objective.

    Returns ``(total, breakdown, trace, tape)``; with ``with_tape=False`` the
    same code path runs tape-free (evaluation mode). ``controller`` overrides
    the policy (used by diagnostics that drive fixed action sequences);
    ``kill_mask`` zeroes the actions of failed agents and freezes them;
    ``action_mask`` zeroes action components across the whole swarm (e.g.
    pinning velocities for lattice diagnostics).
    """
    arch = params.arch
    M = M if M is not None else (positions.shape[0] if positions is not None else None)
    if M is None:
        raise ConfigError("rollout needs an explicit agent count")
    tape = ad.Tape() if with_tape else None
    params_t = (pol.lift_params(params, tape) if tape is not None
                else {k: ad.Tensor(v) for k, v in params.tensors.items()})
    state = env.initial_state(instance, M, positions=positions)
    z_target = instance.z_target.values
    horizon = env.params.horizon if horizon is None else horizon
    density = env.kind == "density2d"
    m0 = float((instance.z0.values * env.grid.quad_weights()).sum()) if density else None
    mask = None
    if kill_mask is not None:
        mask = np.asarray(kill_mask, dtype=np.float64).reshape(M, 1)
    trace = RolloutTrace()
    v_prev = None
    for t in range(horizon):
        if controller is not None:
            actions = controller(state, t)
        else:
            actions = pol.act_swarm(params_t, arch, state, z_target, env,
                                    noise=noise, rng=noise_rng)
        if mask is not None:
            actions = ad.mul(actions, mask)
        if action_mask is not None:
            actions = ad.mul(actions, np.asarray(action_mask, dtype=np.float64)[None, :])
        u, v = arch.action.split(actions)
        try:
            state, info = env.step(state, u, v)
        except NumericError:
            # blow-up mid-episode: keep the prefix, whose loss already carries
            # the gradient signal that steers away from the singularity
            if t == 0:
                raise
            trace.truncated_at = t
            break

        if density:
            trace.add("track", obj.moment_matching_loss(
                state.field, z_target, weights.lambda_var, env.grid))
            trace.add("mass", obj.mass_loss(state.field, m0, env.grid))
        else:
            trace.add("track", obj.tracking_loss(state.field, z_target))
        trace.add("effort", obj.effort_loss(u, v, v_prev, env.control_dt, weights))
        if weights.lambda_safe > 0:
            trace.add("safe", obj.forcing_magnitude_loss(info.forcing))
        if weights.lambda_coll > 0 and env.r_safe > 0:
            trace.add("coll", obj.collision_loss(state.swarm.positions, env.r_safe))
        if weights.lambda_coll_obs > 0 and env.obstacles:
            trace.add("coll_obs", obj.obstacle_loss(
                state.swarm.positions, env.obstacles, env.r_safe))
        if not env.static:
            trace.add("bound", obj.boundary_loss(info.excursion))
        if weights.lambda_smooth > 0 and v is not None and v_prev is not None:
            trace.add("smooth", obj.smoothness_loss(v, v_prev))

        trace.track_series.append(trace.term_series["track"][-1])
        if u is not None:
            trace.u_sq_series.append(float(np.sum(u.data ** 2)))
        trace.positions.append(state.swarm.positions_array().copy())
        trace.actions.append(actions.data.copy())
        if record_fields and (t % record_fields == 0 or t == horizon - 1):
            trace.fields.append(state.field.data.copy())
        v_prev = v
    if density:
        trace.add("moment_terminal", obj.moment_matching_loss(
            state.field, z_target, weights.lambda_var, env.grid))
        trace.moment_terminal = trace.term_series["moment_terminal"][-1]
    trace.final_field = state.field.data.copy()
    total, breakdown = obj.episode_objective(trace, env.kind, weights)
    return total, breakdown, trace, tape


def episode_gradients(env, instance, params, weights, noise, noise_rng, M):
    """Forward + backward for one episode; returns (grads dict, breakdown)."""
    total, breakdown, _, tape = rollout(
        env, instance, params, weights, M=M, noise=noise, noise_rng=noise_rng)
    grads_by_nid = ad.backward(tape, total)
    grads = {}
    for name, leaf in zip(params.tensors, tape.watched):
        grads[name] = grads_by_nid[leaf.nid]
    return grads, breakdown


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def like(params):
        return AdamState({k: np.zeros_like(a) for k, a in params.tensors.items()},
                         {k: np.zeros_like(a) for k, a in params.tensors.items()}, 0)


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam step; returns new PolicyParams and advances the state."""
    state.step += 1
    t = state.step
    new = {}
    for k, w in params.tensors.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = state.m[k] / (1 - beta1 ** t)
        vhat = state.v[k] / (1 - beta2 ** t)
        new[k] = w - lr * mhat / (np.sqrt(vhat) + eps)
    return pol.PolicyParams(params.arch, new)


def clip_global_norm(grads, c):
    """Rescale so the global l2 norm is at most ``c``; direction preserved."""
    if c <= 0:
        raise ConfigError("clip bound must be positive")
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    norm = math.sqrt(sq)
    if norm <= c:
        return grads, norm
    scale = c / norm
    return {k: g * scale for k, g in grads.items()}, norm


def exponential_lr(step, eta0, gamma=0.5, decay_steps=2000):
    return eta0 * gamma ** (step / decay_steps)


def warmup_cosine(step, warmup_steps, peak, final, total, init=0.0):
    """Linear ramp from ``init`` to ``peak`` over ``warmup_steps``, then a
    half cosine from ``peak`` down to ``final`` at ``total``."""
    if not 0 <= step <= total:
        raise ConfigError("schedule step outside [0, total]")
    if step < warmup_steps:
        return init + (peak - init) * step / warmup_steps
    if total == warmup_steps:
        return final
    frac = (step - warmup_steps) / (total - warmup_steps)
    return final + 0.5 * (peak - final) * (1 + math.cos(math.pi * frac))


def lr_at(train_cfg, step):
    if train_cfg.lr_schedule == "exp":
        lr = exponential_lr(step, train_cfg.lr, train_cfg.lr_gamma, train_cfg.lr_decay_steps)
        # optional linear ramp: right after a zero-information init, clipped
        # Adam takes near-sign steps whose aggregate size can kick stiff
        # reaction terms into blow-up before the policy has any shape
        if train_cfg.lr_warmup_steps > 0 and step < train_cfg.lr_warmup_steps:
            lr *= (step + 1) / train_cfg.lr_warmup_steps
        return lr
    if train_cfg.lr_schedule == "warmup_cosine":
        return warmup_cosine(step, train_cfg.lr_warmup_steps, train_cfg.lr_peak,
                             train_cfg.lr_final, train_cfg.epochs, init=train_cfg.lr)
    raise ConfigError(f"unknown lr schedule {train_cfg.lr_schedule!r}")


# -------------------------------------------------------------- checkpointing

def save_train_checkpoint(path, params, adam, epoch, cfg_hash, env_kind, seed):
    pol.save_checkpoint(
        path, params,
        manifest_extra={"env_kind": env_kind, "config_hash": cfg_hash,
                        "seed": seed, "epoch": epoch, "adam_step": adam.step},
        extra_blocks={"adam_m": adam.m, "adam_v": adam.v})


def load_train_checkpoint(path, expect_env=None, expect_hash=None):
    params, manifest, extra = pol.load_checkpoint(
        path, expect_env=expect_env, expect_hash=expect_hash)
    if "adam_m" not in extra or "adam_v" not in extra:
        raise CheckpointError(f"{path}: no optimizer state; cannot resume training")
    adam = AdamState(extra["adam_m"], extra["adam_v"], int(manifest["adam_step"]))
    return params, adam, int(manifest["epoch"])


# -------------------------------------------------------------------- training

def format_metrics_row(values):
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def train(cfg, out_dir, workers=1, resume=None, log=None):
    """Run Algorithm-style training per the resolved experiment config.

    Writes ``metrics.csv``, periodic and final checkpoints into ``out_dir``
    and returns ``(params, metrics_rows)``. NaN or exploding losses abort
    with the last good checkpoint on disk.
    """
    from .config import config_hash, make_arch, make_env   # deferred: config imports envs

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ad.strict_numerics()
    env = make_env(cfg)
    arch = make_arch(cfg)
    tc = cfg.train
    cfg_hash = config_hash(cfg)
    noise = pol.NoiseConfig(tc.sigma_z, tc.sigma_u)
    if resume is not None:
        params, adam, start_epoch = load_train_checkpoint(
            resume, expect_env=cfg.env.kind, expect_hash=cfg_hash)
        if params.arch != arch:
            raise CheckpointError("checkpoint architecture does not match the config")
    else:
        params, adam, start_epoch = init_params_for(cfg), None, 0
        adam = AdamState.like(params)
    M = cfg.swarm.m
    rows = []

    def one_episode(epoch, i):
        inst = env.make_instance(episode_seed(tc.seed, epoch, i, 1))
        nrng = np.random.default_rng(episode_seed(tc.seed, epoch, i, 2))
        return episode_gradients(env, inst, params, cfg.loss, noise, nrng, M)

    last_good = out_dir / "checkpoint.bin"
    huge_streak = 0
    for epoch in range(start_epoch, tc.epochs):
        lr = lr_at(tc, epoch)
        try:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(lambda i: one_episode(epoch, i),
                                            range(tc.batch_size)))
            else:
                results = [one_episode(epoch, i) for i in range(tc.batch_size)]
        except (NumericError, FloatingPointError) as exc:
            save_train_checkpoint(out_dir / "diverged-last-good.bin", params, adam,
                                  epoch, cfg_hash, cfg.env.kind, tc.seed)
            raise NumericError(f"training diverged at epoch {epoch}: {exc}; "
                               f"last good parameters saved") from exc
        # order-fixed reduction keeps the run bitwise reproducible
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        batch_total = 0.0
        term_sums = {t: 0.0 for t in obj.TERM_ORDER}
        for g, breakdown in results:
            for k in grads:
                grads[k] += g[k]
            batch_total += breakdown.total
            for t, v in breakdown.terms.items():
                term_sums[t] += v
        inv = 1.0 / tc.batch_size
        grads = {k: g * inv for k, g in grads.items()}
        mean_total = batch_total * inv
        all_truncated = all(b.truncated_at is not None for _, b in results)
        if not np.isfinite(mean_total):
            huge_streak = _DIVERGENCE_PATIENCE
        elif abs(mean_total) > 1e6 or all_truncated:
            huge_streak += 1
        else:
            huge_streak = 0
        if huge_streak >= _DIVERGENCE_PATIENCE:
            save_train_checkpoint(out_dir / "diverged-last-good.bin", params, adam,
                                  epoch, cfg_hash, cfg.env.kind, tc.seed)
            raise NumericError(
                f"training diverged at epoch {epoch} (loss {mean_total}); "
                f"last good parameters saved")
        grads, grad_norm = clip_global_norm(grads, tc.grad_clip)
        params = adam_update(params, grads, adam, lr)
        row = [epoch, lr, grad_norm, mean_total] + [term_sums[t] * inv for t in obj.TERM_ORDER]
        rows.append(row)
        if log is not None and (epoch % max(1, tc.epochs // 20) == 0 or epoch == tc.epochs - 1):
            log(f"epoch {epoch}: loss {mean_total:.6g} lr {lr:.3g} |g| {grad_norm:.3g}")
        if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            save_train_checkpoint(out_dir / f"checkpoint-{epoch + 1}.bin", params, adam,
                                  epoch + 1, cfg_hash, cfg.env.kind, tc.seed)
    save_train_checkpoint(last_good, params, adam, tc.epochs, cfg_hash, cfg.env.kind, tc.seed)
    with open(out_dir / "metrics.csv", "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(format_metrics_row(row) + "\n")
    return params, rows


def init_params_for(cfg):
    from .config import make_arch
    return pol.init_params(make_arch(cfg), episode_seed(cfg.train.seed, 0, 0, 0))
