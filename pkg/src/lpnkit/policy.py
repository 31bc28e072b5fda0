"""Feedforward (FF) and Linear Policy Net (LPN) heads.

Both heads act residually around the reference joint targets ``a_ref``:

* FF:  ``mean = net([s, enc(ref)]) + a_ref``
* LPN: ``[vec(K), k] = net(enc(ref))`` and ``mean = K s + k + a_ref``

so the LPN action Jacobian with respect to the character state is ``K``
itself. Exploration is a fixed isotropic Gaussian around the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from . import mlp
from .errors import CheckpointError, ConfigError
from .mlp import NetParams
from .numerics import Rng
from .sim import ReferenceFrame

FORMAT_VERSION = "lpnkit-checkpoint/1"
KINDS = ("ff", "lpn")
DEFAULT_SIGMA = 0.1  # variance 0.01 per action dimension
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class LinearGains:
    k_mat: np.ndarray  # (m, n)
    k_ff: np.ndarray  # (m,)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.k_mat.reshape(-1), self.k_ff])


@dataclass(frozen=True)
class GaussianHead:
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"exploration sigma must be positive, got {self.sigma}")


@dataclass
class Policy:
    kind: str
    net: NetParams
    n: int
    m: int
    n_ref: int
    head: GaussianHead = GaussianHead()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"policy kind must be one of {KINDS}, got {self.kind!r}")
        d_in, d_out = self.expected_dims(self.kind, self.n, self.m, self.n_ref)
        if (self.net.d_in, self.net.d_out) != (d_in, d_out):
            raise ConfigError(
                f"{self.kind} network must map {d_in} -> {d_out}, "
                f"got {self.net.d_in} -> {self.net.d_out}")

    @staticmethod
    def expected_dims(kind: str, n: int, m: int, n_ref: int) -> tuple[int, int]:
        if kind == "ff":
            return n + n_ref, m
        return n_ref, m * n + m

    @classmethod
    def create(cls, kind: str, n: int, m: int, n_ref: int, hidden: int, rng: Rng,
               sigma: float = DEFAULT_SIGMA) -> "Policy":
        d_in, d_out = cls.expected_dims(kind, n, m, n_ref)
        return cls(kind, NetParams.init(d_in, hidden, d_out, rng), n, m, n_ref, GaussianHead(sigma))

    @classmethod
    def zeros(cls, kind: str, n: int, m: int, n_ref: int, hidden: int,
              sigma: float = DEFAULT_SIGMA) -> "Policy":
        d_in, d_out = cls.expected_dims(kind, n, m, n_ref)
        return cls(kind, NetParams.zeros(d_in, hidden, d_out), n, m, n_ref, GaussianHead(sigma))

    def with_net(self, net: NetParams) -> "Policy":
        return Policy(self.kind, net, self.n, self.m, self.n_ref, self.head)

    @property
    def state_cols(self) -> np.ndarray:
        """Network input columns holding the character state (FF only)."""
        return np.arange(self.n)

    # batched evaluation used by training ------------------------------------
    def forward(self, obs, ref_enc, ref_action) -> "PolicyCache":
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        ref_enc = np.atleast_2d(np.asarray(ref_enc, dtype=np.float64))
        ref_action = np.atleast_2d(np.asarray(ref_action, dtype=np.float64))
        if obs.shape[1] != self.n or ref_enc.shape[1] != self.n_ref:
            raise ConfigError(
                f"policy expects state dim {self.n} and reference dim {self.n_ref}, "
                f"got {obs.shape[1]} and {ref_enc.shape[1]}")
        if self.kind == "ff":
            y, trace = mlp.forward(self.net, np.concatenate([obs, ref_enc], axis=1))
            return PolicyCache(y + ref_action, trace, obs, None, None)
        y, trace = mlp.forward(self.net, ref_enc)
        mn = self.m * self.n
        k_mat = y[:, :mn].reshape(-1, self.m, self.n)
        k_ff = y[:, mn:]
        mean = np.einsum("bij,bj->bi", k_mat, obs) + k_ff + ref_action
        return PolicyCache(mean, trace, obs, k_mat, k_ff)

    def output_cotangent(self, cache: "PolicyCache", d_mean: np.ndarray) -> np.ndarray:
        """Map a cotangent on the mean action to one on the raw network output."""
        if self.kind == "ff":
            return d_mean
        d_k = d_mean[:, :, None] * cache.obs[:, None, :]
        return np.concatenate([d_k.reshape(d_mean.shape[0], -1), d_mean], axis=1)

    def mean_action(self, obs, ref: ReferenceFrame) -> np.ndarray:
        return self.forward(obs, ref.encode(), ref.action).mean[0]


class PolicyCache(NamedTuple):
    mean: np.ndarray  # (B, m)
    trace: mlp.ForwardTrace
    obs: np.ndarray
    k_mat: np.ndarray | None  # (B, m, n), LPN only
    k_ff: np.ndarray | None


def lpn_gains(policy: Policy, ref: ReferenceFrame | np.ndarray) -> LinearGains:
    """Feedback matrix and feedforward term for one reference frame."""
    if policy.kind != "lpn":
        raise ConfigError("lpn_gains requires an LPN policy")
    enc = ref.encode() if isinstance(ref, ReferenceFrame) else np.asarray(ref, dtype=np.float64)
    if enc.shape != (policy.n_ref,):
        raise ConfigError(f"reference encoding has shape {enc.shape}, expected ({policy.n_ref},)")
    y, _ = mlp.forward(policy.net, enc)
    mn = policy.m * policy.n
    return LinearGains(y[:mn].reshape(policy.m, policy.n), y[mn:].copy())


def lpn_action(gains: LinearGains, s, ref_action) -> np.ndarray:
    return gains.k_mat @ np.asarray(s, dtype=np.float64) + gains.k_ff + np.asarray(ref_action)


def ff_action(policy: Policy, s, ref: ReferenceFrame) -> np.ndarray:
    if policy.kind != "ff":
        raise ConfigError("ff_action requires an FF policy")
    s = np.asarray(s, dtype=np.float64)
    x = np.concatenate([s, ref.encode()])
    if x.shape != (policy.net.d_in,):
        raise ConfigError(f"FF input has {x.size} entries, network expects {policy.net.d_in}")
    y, _ = mlp.forward(policy.net, x)
    return y + ref.action


def policy_jacobian(policy: Policy, s, ref: ReferenceFrame) -> np.ndarray:
    """``d mean / d s`` as an (m, n) matrix."""
    if policy.kind == "lpn":
        return lpn_gains(policy, ref).k_mat
    x = np.concatenate([np.asarray(s, dtype=np.float64), ref.encode()])
    _, trace = mlp.forward(policy.net, x)
    return mlp.input_jacobian(policy.net, trace, cols=policy.state_cols)


def log_prob(a, mean, sigma: float) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over the last axis."""
    diff = np.asarray(a) - np.asarray(mean)
    return np.sum(-0.5 * (diff / sigma) ** 2 - math.log(sigma) - LOG_SQRT_2PI, axis=-1)


def sample_action(mean, head: GaussianHead, rng: Rng) -> tuple[np.ndarray, float]:
    mean = np.asarray(mean, dtype=np.float64)
    a = mean + head.sigma * rng.normal(mean.shape)
    return a, float(log_prob(a, mean, head.sigma))


# checkpoints --------------------------------------------------------------

def _pack(net: NetParams) -> dict[str, Any]:
    return {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in zip(mlp.PARAM_NAMES, net.arrays())}


def _unpack(blob: Any, where: str) -> NetParams:
    if not isinstance(blob, dict):
        raise CheckpointError("parameter block must be an object", where)
    arrays = {}
    for name in mlp.PARAM_NAMES:
        entry = blob.get(name)
        field = f"{where}.{name}"
        if not isinstance(entry, dict) or "shape" not in entry or "data" not in entry:
            raise CheckpointError("missing or malformed parameter array", field)
        try:
            arr = np.array(entry["data"], dtype=np.float64)
            arr = arr.reshape([int(v) for v in entry["shape"]])
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"bad parameter data: {exc}", field) from None
        if not np.all(np.isfinite(arr)):
            raise CheckpointError("non-finite parameter values", field)
        arrays[name] = arr
    try:
        return NetParams(**arrays)
    except ConfigError as exc:
        raise CheckpointError(str(exc), where) from None


def save_checkpoint(policy: Policy, path, value: NetParams | None = None, extra: dict | None = None):
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": policy.kind,
        "n": policy.n,
        "m": policy.m,
        "n_ref": policy.n_ref,
        "hidden": policy.net.hidden,
        "activation": policy.net.activation,
        "sigma": policy.head.sigma,
        "params": _pack(policy.net),
    }
    if value is not None:
        doc["value_params"] = _pack(value)
    if extra:
        doc["meta"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path, kind: str | None = None, with_value: bool = False):
    """Load a policy (and optionally the value network) from ``path``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported version {doc.get('format_version')!r}, expected {FORMAT_VERSION!r}",
            "format_version")
    for key in ("kind", "n", "m", "n_ref", "hidden", "activation", "sigma", "params"):
        if key not in doc:
            raise CheckpointError("missing header field", key)
    if doc["kind"] not in KINDS:
        raise CheckpointError(f"unknown policy kind {doc['kind']!r}", "kind")
    if kind is not None and doc["kind"] != kind:
        raise CheckpointError(f"checkpoint holds a {doc['kind']} policy, expected {kind}", "kind")
    if doc["activation"] != "tanh":
        raise CheckpointError(f"unsupported activation {doc['activation']!r}", "activation")
    net = _unpack(doc["params"], "params")
    if net.hidden != doc["hidden"]:
        raise CheckpointError("hidden width disagrees with parameter shapes", "hidden")
    try:
        head = GaussianHead(float(doc["sigma"]))
        policy = Policy(doc["kind"], net, int(doc["n"]), int(doc["m"]), int(doc["n_ref"]), head)
    except ConfigError as exc:
        raise CheckpointError(str(exc), "params") from None
    if not with_value:
        return policy
    value = _unpack(doc["value_params"], "value_params") if "value_params" in doc else None
    return policy, value
