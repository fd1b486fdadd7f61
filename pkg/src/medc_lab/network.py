"""Actor-critic network: spec, parameters, forward passes and losses."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from medc_lab import autodiff as ad
from medc_lab.autodiff import Tensor


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"


@dataclass(frozen=True)
class DenseLayer:
    units: int
    activation: str = "relu"


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    height: int
    width: int
    layers: tuple = (ConvLayer(8, 3, 1), ConvLayer(16, 3, 2), DenseLayer(64))
    n_actions: int = 9

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def input_shape(self) -> tuple:
        return (self.in_channels, self.height, self.width)

    def param_shapes(self) -> list[tuple[str, tuple]]:
        """Names and shapes of every learnable tensor, in canonical order."""
        if min(self.in_channels, self.height, self.width, self.n_actions) < 1:
            raise NetworkError(f"non-positive extent in {self}")
        shapes = []
        c, h, w = self.in_channels, self.height, self.width
        flat = None
        for i, layer in enumerate(self.layers):
            if layer.activation not in ("relu", "linear"):
                raise NetworkError(f"layer {i}: unknown activation {layer.activation!r}")
            if isinstance(layer, ConvLayer):
                if flat is not None:
                    raise NetworkError(f"layer {i}: conv layer after a dense layer")
                if layer.filters < 1 or layer.kernel < 1 or layer.stride < 1:
                    raise NetworkError(f"layer {i}: conv parameters must be positive")
                if layer.kernel > h or layer.kernel > w:
                    raise NetworkError(
                        f"layer {i}: kernel {layer.kernel} larger than input {h}x{w}")
                shapes.append((f"trunk.{i}.weight", (layer.filters, c, layer.kernel, layer.kernel)))
                shapes.append((f"trunk.{i}.bias", (layer.filters,)))
                c = layer.filters
                h = (h - layer.kernel) // layer.stride + 1
                w = (w - layer.kernel) // layer.stride + 1
            elif isinstance(layer, DenseLayer):
                if layer.units < 1:
                    raise NetworkError(f"layer {i}: dense units must be positive")
                fan_in = c * h * w if flat is None else flat
                shapes.append((f"trunk.{i}.weight", (fan_in, layer.units)))
                shapes.append((f"trunk.{i}.bias", (layer.units,)))
                flat = layer.units
            else:
                raise NetworkError(f"layer {i}: unknown layer descriptor {layer!r}")
        fan_in = c * h * w if flat is None else flat
        shapes += [
            ("policy.weight", (fan_in, self.n_actions)),
            ("policy.bias", (self.n_actions,)),
            ("value.weight", (fan_in, 1)),
            ("value.bias", (1,)),
        ]
        return shapes

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                layers.append({"type": "conv", "filters": layer.filters, "kernel": layer.kernel,
                               "stride": layer.stride, "activation": layer.activation})
            else:
                layers.append({"type": "dense", "units": layer.units, "activation": layer.activation})
        return {"in_channels": self.in_channels, "height": self.height, "width": self.width,
                "layers": layers, "n_actions": self.n_actions}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for item in d["layers"]:
            item = dict(item)
            kind = item.pop("type")
            if kind == "conv":
                layers.append(ConvLayer(**item))
            elif kind == "dense":
                layers.append(DenseLayer(**item))
            else:
                raise NetworkError(f"unknown layer type {kind!r}")
        return cls(d["in_channels"], d["height"], d["width"], tuple(layers), d["n_actions"])


def default_spec(height: int = 10, width: int = 10, channels: int = 5, n_actions: int = 9) -> NetworkSpec:
    return NetworkSpec(channels, height, width, n_actions=n_actions)


@dataclass
class ParamSet:
    """Ordered named parameter arrays. ``version`` counts optimizer updates."""

    names: tuple
    arrays: list
    version: int = 0

    def __post_init__(self):
        self.names = tuple(self.names)
        if len(self.names) != len(self.arrays):
            raise NetworkError("names/arrays length mismatch")

    def __iter__(self):
        return iter(zip(self.names, self.arrays))

    def __len__(self) -> int:
        return len(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[self.names.index(name)]

    @property
    def size(self) -> int:
        return int(np.sum([a.size for a in self.arrays]))

    def copy(self) -> "ParamSet":
        return ParamSet(self.names, [a.copy() for a in self.arrays], self.version)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        out, pos = [], 0
        for a in self.arrays:
            out.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        return ParamSet(self.names, out, self.version)

    def shapes(self) -> list[tuple]:
        return [a.shape for a in self.arrays]

    def equals(self, other: "ParamSet") -> bool:
        return (self.names == other.names
                and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                        for a, b in zip(self.arrays, other.arrays)))


def param_count(spec: NetworkSpec) -> int:
    return int(sum(np.prod(shape) for _, shape in spec.param_shapes()))


def build_network(spec: NetworkSpec, seed: int, policy_gain: float = 0.01) -> ParamSet:
    """Biases zero; weights U(-b, b) with b = sqrt(6 / fan_in) (sqrt(3 / fan_in) on heads)."""
    rng = np.random.default_rng(seed)
    names, arrays = [], []
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            if name.startswith("trunk."):
                bound = np.sqrt(6.0 / fan_in)
            else:
                bound = np.sqrt(3.0 / fan_in) * (policy_gain if name.startswith("policy") else 1.0)
            arr = rng.uniform(-bound, bound, size=shape)
        names.append(name)
        arrays.append(arr)
    return ParamSet(names, arrays)


def check_compatible(params: ParamSet, spec: NetworkSpec) -> None:
    expected = spec.param_shapes()
    got = list(zip(params.names, params.shapes()))
    if [(n, tuple(s)) for n, s in expected] != [(n, tuple(s)) for n, s in got]:
        raise NetworkError("parameter set does not match network spec")


def _check_obs(spec: NetworkSpec, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape == spec.input_shape:
        obs = obs[None]
    if obs.ndim != 4 or obs.shape[1:] != spec.input_shape:
        raise NetworkError(
            f"observation shape mismatch: expected (N, {', '.join(map(str, spec.input_shape))}) "
            f"or {spec.input_shape}, got {obs.shape}")
    return obs


def forward(params: ParamSet, spec: NetworkSpec, obs, record: bool = False):
    """Batched forward pass. Returns (logits (N, A), values (N,)) as Tensors.

    With ``record`` the parameter tensors are returned as a third element so
    the caller can read gradients after ``backward()``.
    """
    obs = _check_obs(spec, obs)
    leaves = [Tensor(a, requires_grad=record) for a in params.arrays]
    lookup = dict(zip(params.names, leaves))
    # conv trunk runs channel-major: (C, N, H, W)
    x = Tensor(np.ascontiguousarray(obs.transpose(1, 0, 2, 3)))
    flat = False
    for i, layer in enumerate(spec.layers):
        w, b = lookup[f"trunk.{i}.weight"], lookup[f"trunk.{i}.bias"]
        if isinstance(layer, ConvLayer):
            x = ad.conv2d_cnhw(x, w, b, stride=layer.stride)
        else:
            if not flat:
                x = _flatten(x)
                flat = True
            x = ad.matmul(x, w) + b
        if layer.activation == "relu":
            x = ad.relu(x)
    if not flat:
        x = _flatten(x)
    logits = ad.matmul(x, lookup["policy.weight"]) + lookup["policy.bias"]
    values = ad.reshape(ad.matmul(x, lookup["value.weight"]) + lookup["value.bias"], (x.shape[0],))
    if record:
        return logits, values, leaves
    return logits, values


def _flatten(x: Tensor) -> Tensor:
    """(C, N, H, W) -> (N, C*H*W), flattening in (C, H, W) order."""
    x = ad.transpose(x, (1, 0, 2, 3))
    return ad.reshape(x, (x.shape[0], -1))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_forward(params: ParamSet, spec: NetworkSpec, obs) -> np.ndarray:
    """Action probabilities, (A,) for a single observation or (N, A) for a batch."""
    single = np.asarray(obs).ndim == 3
    logits, _ = forward(params, spec, obs)
    probs = softmax(logits.data)
    return probs[0] if single else probs


def value_forward(params: ParamSet, spec: NetworkSpec, obs):
    single = np.asarray(obs).ndim == 3
    _, values = forward(params, spec, obs)
    return float(values.data[0]) if single else values.data


def policy_and_value(params: ParamSet, spec: NetworkSpec, obs) -> tuple[np.ndarray, np.ndarray]:
    logits, values = forward(params, spec, obs)
    return softmax(logits.data), values.data


@dataclass
class LossParts:
    policy: float
    value: float
    entropy: float
    mean_ratio: float
    clip_fraction: float
    extra: dict = field(default_factory=dict)


def _require_finite(**arrays) -> None:
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise NetworkError(f"non-finite values in {name}")


def ppo_loss_from_logits(logits: Tensor, values: Tensor, actions, old_logp, advantages, returns,
                         clip_eps: float, value_coef: float, entropy_coef: float):
    """loss = -L_clip + value_coef * MSE(V, returns) - entropy_coef * mean entropy."""
    actions = np.asarray(actions, dtype=np.int64)
    old_logp = np.asarray(old_logp, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    _require_finite(old_logp=old_logp, advantages=advantages, returns=returns, logits=logits.data)

    logp_all = ad.log_softmax(logits)
    logp = ad.pick(logp_all, actions)
    ratio = ad.exp(logp - old_logp)
    surr = ad.minimum(ratio * advantages, ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages)
    policy_term = ad.mean(surr)
    value_term = ad.mean(ad.square(values - returns))
    entropy = ad.mean(-ad.sum(ad.exp(logp_all) * logp_all, axis=1))
    loss = -policy_term + value_coef * value_term - entropy_coef * entropy
    if not np.isfinite(loss.data):
        raise NetworkError("non-finite PPO loss")
    r = ratio.data
    parts = LossParts(
        policy=float(policy_term.data), value=float(value_term.data), entropy=float(entropy.data),
        mean_ratio=float(r.mean()),
        clip_fraction=float(np.mean(np.abs(r - 1.0) > clip_eps)),
    )
    return loss, parts


def ppo_loss(params: ParamSet, spec: NetworkSpec, obs, actions, old_logp, advantages, returns,
             clip_eps: float = 0.2, value_coef: float = 0.5, entropy_coef: float = 0.01,
             record: bool = True):
    """Clipped-surrogate actor-critic loss on a batch.

    Returns (loss Tensor, LossParts, parameter leaves or None).
    """
    out = forward(params, spec, obs, record=record)
    logits, values = out[0], out[1]
    loss, parts = ppo_loss_from_logits(logits, values, actions, old_logp, advantages, returns,
                                       clip_eps, value_coef, entropy_coef)
    return loss, parts, (out[2] if record else None)


def value_loss(params: ParamSet, spec: NetworkSpec, obs, returns, record: bool = True):
    out = forward(params, spec, obs, record=record)
    loss = ad.mean(ad.square(out[1] - np.asarray(returns, dtype=np.float64)))
    return loss, (out[2] if record else None)


def bc_loss(params: ParamSet, spec: NetworkSpec, obs, target_actions, record: bool = True):
    """Mean cross-entropy between the policy and hard expert labels."""
    out = forward(params, spec, obs, record=record)
    logp = ad.pick(ad.log_softmax(out[0]), np.asarray(target_actions, dtype=np.int64))
    loss = -ad.mean(logp)
    return loss, (out[2] if record else None)


def gradients(loss: Tensor, leaves: Sequence[Tensor], params: ParamSet) -> ParamSet:
    """Run backward and collect leaf gradients into a ParamSet-shaped container."""
    loss.backward()
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    return ParamSet(params.names, grads, params.version)


def spec_json(spec: NetworkSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
