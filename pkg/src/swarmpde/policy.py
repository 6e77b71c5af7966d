"""Shared branch/trunk operator policy.

One parameter record drives any number of agents: the branch net encodes the
local error patch, the trunk net encodes the (normalized) agent coordinate
through Fourier features, the two latents merge by elementwise product and a
small head maps the merged latent to tanh-saturated actions. Nothing in the
forward pass reads the swarm size, which is what makes zero-shot cardinality
transfer possible.

Checkpoints are a manifest (architecture, env id, config hash, seed) plus a
flat float64 block with a CRC; loading refuses mismatched architectures.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .actuation import observe
from .errors import CheckpointError, ConfigError, ContractError

FOURIER_BANDS = (1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class ActionSpec:
    emits_u: bool
    emits_v: bool
    u_max: float
    v_max: float
    coord_dim: int

    def __post_init__(self):
        if not (self.emits_u or self.emits_v):
            raise ConfigError("a policy must emit forcing, velocity, or both")

    @property
    def action_dim(self):
        return (1 if self.emits_u else 0) + (self.coord_dim if self.emits_v else 0)

    def bounds(self):
        out = []
        if self.emits_u:
            out.append(self.u_max)
        if self.emits_v:
            out.extend([self.v_max] * self.coord_dim)
        return np.asarray(out, dtype=np.float64)

    def split(self, actions):
        """Split a (M, action_dim) action tensor into (u, v)."""
        u = v = None
        if self.emits_u:
            u = ad.reshape(actions[:, 0:1], (-1,))
            if self.emits_v:
                v = actions[:, 1:]
        else:
            v = actions
        return u, v


@dataclass(frozen=True)
class PolicyArch:
    in_features: int
    coord_dim: int
    branch_hidden: tuple = (64, 64)
    trunk_hidden: tuple = (32, 32)
    latent: int = 32
    head_hidden: int = 32
    action: ActionSpec = None

    def to_dict(self):
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["action"] = ActionSpec(**d["action"])
        d["branch_hidden"] = tuple(d["branch_hidden"])
        d["trunk_hidden"] = tuple(d["trunk_hidden"])
        return PolicyArch(**d)

    def layer_sizes(self):
        n_fourier = 2 * len(FOURIER_BANDS) * self.coord_dim
        branch = [self.in_features, *self.branch_hidden, self.latent]
        trunk = [n_fourier, *self.trunk_hidden, self.latent]
        head = [self.latent, self.head_hidden, self.action.action_dim]
        return branch, trunk, head


@dataclass
class PolicyParams:
    arch: PolicyArch
    tensors: dict = dc_field(default_factory=dict)   # name -> ndarray, fixed order

    @property
    def names(self):
        return list(self.tensors)

    def n_parameters(self):
        return sum(int(v.size) for v in self.tensors.values())

    def flatten(self):
        return np.concatenate([self.tensors[k].reshape(-1) for k in self.tensors])

    def copy(self):
        return PolicyParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def assert_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise ContractError(f"policy parameter {k!r} is not finite")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_z: float = 0.0
    sigma_u: float = 0.0


def _xavier(rng, n_in, n_out):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, (n_in, n_out))


def init_params(arch, seed):
    """Xavier-uniform weights and zero biases, except the last head layer,
    which starts at zero so the initial policy acts like the uncontrolled
    system. Saturation-scale random actions at t=0 put long-horizon BPTT in
    a violently nonlinear regime that short desk-scale runs never leave.
    Also carries a reserved exploration log-std that the self-supervised
    training never reads."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for group, sizes in zip(("branch", "trunk", "head"), arch.layer_sizes()):
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            tensors[f"{group}.w{i}"] = _xavier(rng, n_in, n_out)
            tensors[f"{group}.b{i}"] = np.zeros(n_out)
    tensors["head.w1"] = np.zeros_like(tensors["head.w1"])
    tensors["log_std"] = np.zeros(arch.action.action_dim)
    return PolicyParams(arch, tensors)


def lift_params(params, tape):
    """Place every parameter array on a tape as a watched leaf."""
    return {k: tape.param(v) for k, v in params.tensors.items()}


def fourier_features(xi_norm):
    """[sin(2 pi k x), cos(2 pi k x)] for k in {1, 2, 4, 8}, per axis.

    ``xi_norm`` has shape (M, d) with coordinates normalized to [0, 1]; the
    output has shape (M, 8 d) and is 1-periodic in every coordinate.
    """
    xi_norm = xi_norm if isinstance(xi_norm, ad.Tensor) else ad.Tensor(xi_norm)
    m, d = xi_norm.shape
    freqs = 2.0 * np.pi * np.asarray(FOURIER_BANDS)[None, None, :]
    s = ad.mul(ad.reshape(xi_norm, (m, d, 1)), freqs)
    feats = ad.concat([ad.sin(s), ad.cos(s)], axis=2)
    return ad.reshape(feats, (m, 2 * len(FOURIER_BANDS) * d))


def _mlp(x, params_t, group, n_layers, final_activation=None):
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params_t[f"{group}.w{i}"]), params_t[f"{group}.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
        elif final_activation is not None:
            h = final_activation(h)
    return h


def forward(params_t, arch, patch, xi_norm):
    """Map (patch, coordinate) to saturated actions for a batch of agents.

    ``patch`` is (M, C, ...) from the observation operator (or (1, C, ...)
    for a shared full-field observation, broadcast over agents); ``xi_norm``
    is (M, d). Output is (M, action_dim), tanh-bounded by the action spec.
    """
    branch_sizes, trunk_sizes, _ = arch.layer_sizes()
    mp = patch.shape[0]
    flat = ad.reshape(patch, (mp, -1))
    if flat.shape[1] != arch.in_features:
        raise ContractError(
            f"patch provides {flat.shape[1]} features, architecture expects {arch.in_features}")
    p = _mlp(flat, params_t, "branch", len(branch_sizes) - 1)
    q = _mlp(fourier_features(xi_norm), params_t, "trunk", len(trunk_sizes) - 1)
    merged = ad.mul(p, q)
    h = ad.relu(ad.add(ad.matmul(merged, params_t["head.w0"]), params_t["head.b0"]))
    raw = ad.add(ad.matmul(h, params_t["head.w1"]), params_t["head.b1"])
    return ad.mul(ad.tanh(raw), arch.action.bounds()[None, :])


def act_swarm(params_t, arch, state, z_target, env, noise=NoiseConfig(), rng=None):
    """Query the shared policy once per agent.

    Optionally injects Gaussian sensor noise on the patch and actuator noise
    on the saturated action (re-clamped to the bounds afterwards). With zero
    noise this is deterministic and equal to per-agent :func:`forward`.
    """
    m = state.swarm.M
    if m == 0:
        return ad.Tensor(np.zeros((0, arch.action.action_dim)))
    patch = observe(state.field, z_target, state.swarm.positions_array(), env.obs, env.grid)
    if noise.sigma_z > 0.0:
        if rng is None:
            raise ContractError("noise injection needs an RNG stream")
        patch = ad.add(patch, noise.sigma_z * rng.standard_normal(patch.shape))
    lengths = np.asarray(env.grid.lengths)[None, :]
    xi = state.swarm.positions
    xi = xi if isinstance(xi, ad.Tensor) else ad.Tensor(xi)
    actions = forward(params_t, arch, patch, ad.div(xi, lengths))
    if noise.sigma_u > 0.0:
        if rng is None:
            raise ContractError("noise injection needs an RNG stream")
        bounds = arch.action.bounds()[None, :]
        noisy = ad.add(actions, noise.sigma_u * rng.standard_normal((m, arch.action.action_dim)))
        actions = ad.clamp(noisy, -bounds, bounds)
    return actions


# ------------------------------------------------------------- checkpointing

_MAGIC = b"SPCK"
_VERSION = 1


def save_checkpoint(path, params, manifest_extra=None, extra_blocks=None):
    """Manifest + flat float64 parameter block (+ named extra blocks, e.g.
    optimizer state), CRC-protected."""
    blocks = [("params." + k, v) for k, v in params.tensors.items()]
    for group, tensors in (extra_blocks or {}).items():
        blocks.extend((f"{group}.{k}", v) for k, v in tensors.items())
    manifest = {
        "arch": params.arch.to_dict(),
        "blocks": [{"name": n, "shape": list(np.shape(v))} for n, v in blocks],
    }
    manifest.update(manifest_extra or {})
    head = json.dumps(manifest, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype=np.float64).tobytes() for _, v in blocks)
    crc = zlib.crc32(head + payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path, expect_env=None, expect_arch=None, expect_hash=None):
    """Returns (PolicyParams, manifest, extra_blocks). Refuses corrupted files
    and mismatched architecture / environment / config hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    version, head_len = struct.unpack("<IQ", raw[4:16])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    head = raw[16:16 + head_len]
    payload = raw[16 + head_len:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(head + payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted checkpoint)")
    manifest = json.loads(head.decode())
    arch = PolicyArch.from_dict(manifest["arch"])
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError("checkpoint architecture does not match the requested one")
    if expect_env is not None and manifest.get("env_kind") != expect_env:
        raise CheckpointError(
            f"checkpoint was trained on {manifest.get('env_kind')!r}, not {expect_env!r}")
    if expect_hash is not None and manifest.get("config_hash") != expect_hash:
        raise CheckpointError("checkpoint config hash does not match the resolved config")
    offset = 0
    arrays = {}
    for block in manifest["blocks"]:
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        arr = np.frombuffer(payload, dtype=np.float64, count=count, offset=offset)
        arrays[block["name"]] = arr.reshape(block["shape"]).copy()
        offset += count * 8
    tensors = {k[len("params."):]: v for k, v in arrays.items() if k.startswith("params.")}
    extra = {}
    for k, v in arrays.items():
        if k.startswith("params."):
            continue
        group, name = k.split(".", 1)
        extra.setdefault(group, {})[name] = v
    return PolicyParams(arch, tensors), manifest, extra
