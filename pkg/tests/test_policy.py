import numpy as np
import pytest

from swarmpde import autodiff as ad
from swarmpde import policy as pol
from swarmpde.config import default_config, make_arch, make_env
from swarmpde.errors import CheckpointError, ConfigError

from fdcheck import rel_err


def small_arch(emits_u=True, emits_v=True, coord_dim=1, in_features=40):
    action = pol.ActionSpec(emits_u, emits_v, u_max=40.0, v_max=2.0, coord_dim=coord_dim)
    return pol.PolicyArch(in_features=in_features, coord_dim=coord_dim, action=action)


# ------------------------------------------------------------------- fourier

def test_fourier_features_at_zero():
    f = pol.fourier_features(np.zeros((1, 1))).data[0]
    assert np.allclose(f[:4], 0.0)     # sines
    assert np.allclose(f[4:], 1.0)     # cosines


def test_fourier_features_at_half():
    f = pol.fourier_features(np.array([[0.5]])).data[0]
    # k=1: sin(pi)=0, cos(pi)=-1
    assert abs(f[0]) < 1e-12
    assert f[4] == pytest.approx(-1.0)


def test_fourier_features_periodic():
    xi = np.random.default_rng(0).uniform(0, 1, (5, 2))
    a = pol.fourier_features(xi).data
    b = pol.fourier_features(xi + 1.0).data
    assert np.allclose(a, b, atol=1e-9)
    assert a.shape == (5, 16)


# ------------------------------------------------------------------- forward

def test_actions_respect_saturation(rng):
    arch = small_arch()
    params = pol.init_params(arch, 0)
    params_t = {k: ad.Tensor(v * 50) for k, v in params.tensors.items()}  # push into saturation
    patch = ad.Tensor(rng.standard_normal((6, 2, 20)) * 10)
    out = pol.forward(params_t, arch, patch, ad.Tensor(rng.uniform(0, 1, (6, 1)))).data
    assert np.all(np.abs(out[:, 0]) <= 40.0)
    assert np.all(np.abs(out[:, 1]) <= 2.0)


def test_identical_inputs_identical_actions(rng):
    arch = small_arch()
    params = pol.init_params(arch, 1)
    params_t = {k: ad.Tensor(v) for k, v in params.tensors.items()}
    patch_row = rng.standard_normal((1, 2, 20))
    patch = ad.Tensor(np.repeat(patch_row, 4, axis=0))
    xi = ad.Tensor(np.full((4, 1), 0.37))
    out = pol.forward(params_t, arch, patch, xi).data
    assert np.allclose(out, out[0][None, :], atol=0)


def test_forward_shapes_never_read_m(rng):
    arch = small_arch()
    params = pol.init_params(arch, 2)
    params_t = {k: ad.Tensor(v) for k, v in params.tensors.items()}
    for m in (1, 3, 17):
        out = pol.forward(params_t, arch, ad.Tensor(rng.standard_normal((m, 2, 20))),
                          ad.Tensor(rng.uniform(0, 1, (m, 1))))
        assert out.shape == (m, 2)


def test_forward_gradients_every_parameter_matrix(rng):
    arch = small_arch()
    params = pol.init_params(arch, 3)
    patch = rng.standard_normal((2, 2, 20))
    xi = rng.uniform(0.1, 0.9, (2, 1))

    def mean_action(params_arrays):
        params_t = {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v)
                    for k, v in params_arrays.items()}
        return ad.tmean(pol.forward(params_t, arch, ad.Tensor(patch), ad.Tensor(xi)))

    tape = ad.Tape()
    lifted = pol.lift_params(params, tape)
    grads = ad.backward(tape, mean_action(lifted))
    h = 1e-6
    for name, leaf in zip(params.tensors, tape.watched):
        if name == "log_std":
            continue
        base = params.tensors[name]
        fd = np.zeros_like(base)
        for j in range(base.size):
            vals = []
            for sgn in (1.0, -1.0):
                arrs = {k: v.copy() for k, v in params.tensors.items()}
                arrs[name].reshape(-1)[j] += sgn * h
                vals.append(mean_action(arrs).item())
            fd.reshape(-1)[j] = (vals[0] - vals[1]) / (2 * h)
        assert rel_err(grads[leaf.nid], fd) < 1e-5, name


def test_action_spec_requires_an_output():
    with pytest.raises(ConfigError):
        pol.ActionSpec(False, False, 1.0, 1.0, 1)


# ------------------------------------------------------------------ act_swarm

def make_heat_setup(m=5, seed=0):
    cfg = default_config("heat1d")
    env = make_env(cfg)
    arch = make_arch(cfg)
    params = pol.init_params(arch, seed)
    inst = env.make_instance(seed)
    state = env.initial_state(inst, m)
    return env, arch, params, inst, state


def test_act_swarm_zero_noise_equals_forward():
    env, arch, params, inst, state = make_heat_setup()
    params_t = {k: ad.Tensor(v) for k, v in params.tensors.items()}
    acts = pol.act_swarm(params_t, arch, state, inst.z_target.values, env)
    from swarmpde.actuation import observe
    patch = observe(state.field, inst.z_target.values, state.swarm.positions_array(),
                    env.obs, env.grid)
    xi_norm = ad.div(state.swarm.positions, np.asarray(env.grid.lengths)[None, :])
    direct = pol.forward(params_t, arch, patch, xi_norm)
    assert np.array_equal(acts.data, direct.data)


def test_act_swarm_empty_swarm():
    env, arch, params, inst, state = make_heat_setup(m=0)
    params_t = {k: ad.Tensor(v) for k, v in params.tensors.items()}
    acts = pol.act_swarm(params_t, arch, state, inst.z_target.values, env)
    assert acts.shape == (0, 2)
    from swarmpde.actuation import total_forcing
    f = total_forcing(env.grid, state.swarm.positions, ad.Tensor(np.zeros(0)), 0.1)
    assert np.allclose(f.data, 0.0)


def test_act_swarm_permutation_equivariance(rng):
    env, arch, params, inst, state = make_heat_setup(m=6)
    params_t = {k: ad.Tensor(v) for k, v in params.tensors.items()}
    from swarmpde.actuation import AgentSwarm
    from swarmpde.environments import EnvState
    pos = rng.uniform(0.1, 0.9, (6, 1))
    perm = rng.permutation(6)

    def acts_for(p):
        st = EnvState(ad.Tensor(inst.z0.values),
                      AgentSwarm(ad.Tensor(p), ad.Tensor(np.zeros_like(p)), True), 0.0)
        return pol.act_swarm(params_t, arch, st, inst.z_target.values, env).data

    assert np.allclose(acts_for(pos)[perm], acts_for(pos[perm]), atol=1e-12)


def test_act_swarm_noise_respects_bounds_and_determinism():
    env, arch, params, inst, state = make_heat_setup(m=4)
    params_t = {k: ad.Tensor(v) for k, v in params.tensors.items()}
    noise = pol.NoiseConfig(sigma_z=0.5, sigma_u=50.0)

    def run(seed):
        return pol.act_swarm(params_t, arch, state, inst.z_target.values, env,
                             noise=noise, rng=np.random.default_rng(seed)).data

    a, b = run(7), run(7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, run(8))
    assert np.all(np.abs(a[:, 0]) <= 40.0) and np.all(np.abs(a[:, 1]) <= 2.0)


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    arch = small_arch()
    params = pol.init_params(arch, 5)
    path = tmp_path / "p.bin"
    pol.save_checkpoint(path, params, {"env_kind": "heat1d", "config_hash": "abc",
                                       "seed": 5, "epoch": 12})
    loaded, manifest, extra = pol.load_checkpoint(path, expect_env="heat1d")
    assert manifest["epoch"] == 12
    assert loaded.arch == arch
    for k in params.tensors:
        assert np.array_equal(loaded.tensors[k], params.tensors[k])
    assert extra == {}


def test_checkpoint_rejects_wrong_env(tmp_path):
    params = pol.init_params(small_arch(), 0)
    path = tmp_path / "p.bin"
    pol.save_checkpoint(path, params, {"env_kind": "heat1d"})
    with pytest.raises(CheckpointError):
        pol.load_checkpoint(path, expect_env="ks1d")


def test_checkpoint_rejects_wrong_arch(tmp_path):
    params = pol.init_params(small_arch(), 0)
    path = tmp_path / "p.bin"
    pol.save_checkpoint(path, params, {"env_kind": "heat1d"})
    other = small_arch(in_features=60)
    with pytest.raises(CheckpointError):
        pol.load_checkpoint(path, expect_arch=other)


def test_checkpoint_detects_corruption(tmp_path):
    params = pol.init_params(small_arch(), 0)
    path = tmp_path / "p.bin"
    pol.save_checkpoint(path, params, {})
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        pol.load_checkpoint(path)
