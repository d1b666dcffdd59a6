"""Discretized rotation action space and the policy network.

The policy body is three 256-unit fully connected blocks (dropout + ReLU),
with four heads: per-axis 32-way action logits (yaw/pitch/roll), a scalar
value estimate, and a direct rotation regression used as an auxiliary
supervised signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core3d import EulerAngles, _wrap180
from .errors import ShapeMismatch
from .nn import dropout, dropout_backward, fc, fc_backward, relu, relu_backward, softmax

AXES = ("yaw", "pitch", "roll")


@dataclass(frozen=True)
class ActionSpace:
    """Uniform per-axis rotation bins. An action is a triple of bin indices."""

    bins_per_axis: int = 32
    yaw_range: tuple = (-180.0, 180.0)
    pitch_range: tuple = (-90.0, 90.0)
    roll_range: tuple = (-10.0, 10.0)

    def range_for(self, axis: int):
        return (self.yaw_range, self.pitch_range, self.roll_range)[axis]

    def bin_centers(self, axis: int) -> np.ndarray:
        lo, hi = self.range_for(axis)
        w = (hi - lo) / self.bins_per_axis
        return lo + (np.arange(self.bins_per_axis) + 0.5) * w

    def bin_width(self, axis: int) -> float:
        lo, hi = self.range_for(axis)
        return (hi - lo) / self.bins_per_axis

    def action_to_euler(self, action) -> EulerAngles:
        vals = [self.bin_centers(i)[action[i]] for i in range(3)]
        return EulerAngles(*[float(v) for v in vals])

    def euler_to_action(self, angles: EulerAngles):
        """Nearest bin per axis (yaw wraps, pitch/roll clamp)."""
        angles = angles.normalized()
        out = []
        for axis, v in enumerate(angles.as_array()):
            lo, hi = self.range_for(axis)
            w = (hi - lo) / self.bins_per_axis
            if axis == 0:
                i = int(np.floor((v - lo) / w)) % self.bins_per_axis
            else:
                i = int(np.clip(np.floor((v - lo) / w), 0,
                                self.bins_per_axis - 1))
            out.append(i)
        return tuple(out)

    def to_dict(self):
        return {
            "bins_per_axis": self.bins_per_axis,
            "yaw_range": list(self.yaw_range),
            "pitch_range": list(self.pitch_range),
            "roll_range": list(self.roll_range),
        }

    @staticmethod
    def from_dict(d):
        return ActionSpace(d["bins_per_axis"], tuple(d["yaw_range"]),
                           tuple(d["pitch_range"]), tuple(d["roll_range"]))


@dataclass(frozen=True)
class PolicyConfig:
    state_dim: int
    hidden: int = 256
    dropout_rate: float = 0.2
    bins_per_axis: int = 32

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self):
        return {"state_dim": self.state_dim, "hidden": self.hidden,
                "dropout_rate": self.dropout_rate,
                "bins_per_axis": self.bins_per_axis}

    @staticmethod
    def from_dict(d):
        return PolicyConfig(d["state_dim"], d["hidden"], d["dropout_rate"],
                            d["bins_per_axis"])


@dataclass
class PolicyParams:
    config: PolicyConfig
    arrays: dict = field(default_factory=dict)


@dataclass
class PolicyOutput:
    action_logits: np.ndarray          # (3, bins)
    value: float
    rotation: EulerAngles              # regressed rotation

    def probs(self) -> np.ndarray:
        return softmax(self.action_logits, axis=1)

    def log_probs(self) -> np.ndarray:
        from .nn import log_softmax
        return log_softmax(self.action_logits, axis=1)


def init_policy(config: PolicyConfig, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    dims = [config.state_dim, config.hidden, config.hidden, config.hidden]
    for i in range(3):
        arrays[f"fc{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / dims[i]),
                                        (dims[i + 1], dims[i]))
        arrays[f"fc{i}_b"] = np.zeros(dims[i + 1])
    h = config.hidden
    for axis in AXES:
        arrays[f"{axis}_w"] = rng.normal(0.0, 0.01, (config.bins_per_axis, h))
        arrays[f"{axis}_b"] = np.zeros(config.bins_per_axis)
    arrays["value_w"] = rng.normal(0.0, 0.01, (1, h))
    arrays["value_b"] = np.zeros(1)
    arrays["rot_w"] = rng.normal(0.0, 0.01, (3, h))
    arrays["rot_b"] = np.zeros(3)
    return PolicyParams(config, arrays)


def policy_forward(state: np.ndarray, params: PolicyParams, mode: str = "eval",
                   rng: np.random.Generator | None = None,
                   want_cache: bool = False, masks=None):
    """Run the policy on a state vector. mode 'train' applies dropout; pass
    `masks` (from a previous forward cache) to replay fixed dropout masks,
    e.g. for gradient checking."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = params.config
    state = np.asarray(state, dtype=float).reshape(-1)
    if state.shape != (cfg.state_dim,):
        raise ShapeMismatch(f"state dim {state.shape} != {cfg.state_dim}")
    a = params.arrays
    train = mode == "train"
    x = state
    cache = {"state": state, "inputs": [], "drop": [], "masks": []}
    for i in range(3):
        cache["inputs"].append(x)
        z = fc(x, a[f"fc{i}_w"], a[f"fc{i}_b"])
        if masks is not None:
            mask = masks[i]
            d = z if mask is None else z * mask / (1.0 - cfg.dropout_rate)
        else:
            d, mask = dropout(z, cfg.dropout_rate, rng, train)
        cache["drop"].append(d)
        cache["masks"].append(mask)
        x = relu(d)
    cache["feat"] = x
    logits = np.stack([fc(x, a[f"{axis}_w"], a[f"{axis}_b"]) for axis in AXES])
    value = float(fc(x, a["value_w"], a["value_b"])[0])
    rot = fc(x, a["rot_w"], a["rot_b"])
    out = PolicyOutput(logits, value, EulerAngles(*[float(v) for v in rot]))
    if want_cache:
        return out, cache
    return out


def policy_backward(d_logits: np.ndarray, d_value: float, d_rot: np.ndarray,
                    params: PolicyParams, cache) -> dict:
    """Parameter gradients given head gradients; dropout masks come frozen
    from the forward cache."""
    a = params.arrays
    cfg = params.config
    grads = {}
    x = cache["feat"]
    d_x = np.zeros_like(x)
    for axis_i, axis in enumerate(AXES):
        dxa, grads[f"{axis}_w"], grads[f"{axis}_b"] = fc_backward(
            d_logits[axis_i], x, a[f"{axis}_w"])
        d_x += dxa
    dxv, grads["value_w"], grads["value_b"] = fc_backward(
        np.array([d_value], dtype=float), x, a["value_w"])
    d_x += dxv
    dxr, grads["rot_w"], grads["rot_b"] = fc_backward(
        np.asarray(d_rot, dtype=float), x, a["rot_w"])
    d_x += dxr
    for i in reversed(range(3)):
        d_d = relu_backward(d_x, cache["drop"][i])
        d_z = dropout_backward(d_d, cache["masks"][i], cfg.dropout_rate)
        d_x, grads[f"fc{i}_w"], grads[f"fc{i}_b"] = fc_backward(
            d_z, cache["inputs"][i], a[f"fc{i}_w"])
    return grads


def sample_action(out: PolicyOutput, epsilon: float,
                  rng: np.random.Generator):
    """Epsilon-greedy stochastic action: uniform with prob epsilon, otherwise
    a draw from each axis's softmax distribution."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    bins = out.action_logits.shape[1]
    probs = out.probs()
    action = []
    for axis in range(3):
        if rng.random() < epsilon:
            action.append(int(rng.integers(bins)))
        else:
            action.append(int(rng.choice(bins, p=probs[axis])))
    return tuple(action)


def argmax_action(out: PolicyOutput):
    return tuple(int(i) for i in out.action_logits.argmax(axis=1))


def top_joint_actions(out: PolicyOutput, k: int, per_axis: int = 5):
    """Top-k actions by factored joint probability, searched over the top
    `per_axis` bins of each axis."""
    probs = out.probs()
    tops = [np.argsort(p)[::-1][:per_axis] for p in probs]
    cands = []
    for iy in tops[0]:
        for ip in tops[1]:
            for ir in tops[2]:
                joint = probs[0][iy] * probs[1][ip] * probs[2][ir]
                cands.append(((int(iy), int(ip), int(ir)), float(joint)))
    cands.sort(key=lambda c: (-c[1], c[0]))
    return cands[:k]


def wrap_angle_diff(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Angle difference wrapped to [-180, 180) before squaring."""
    return _wrap180(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
