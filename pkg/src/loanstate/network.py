"""Feedforward softmax transition network with exact hand-derived gradients.

Forward evaluation, reverse-mode parameter gradients (the training loss is the
per-sample negative log-likelihood plus an L2 weight penalty), input gradients
of each output probability, inverted dropout, seeded initialization, and a
versioned model-file format. No autodiff framework: every gradient here is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import NUM_STATES, STATE_NAMES, FeatureSchema
from .pipeline import NormalizationStats

MODEL_FORMAT = "loanstate-model"
MODEL_FORMAT_VERSION = 1


class ModelFileError(Exception):
    """Corrupt, truncated, or incompatible model file."""


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    return (z > 0.0).astype(np.float64)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_grad(z):
    s = sigmoid(z)
    return s * (1.0 - s)


def tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "sigmoid": (sigmoid, sigmoid_grad),
    "tanh": (np.tanh, tanh_grad),
}


def softmax(z: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max-subtraction)."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Architecture:
    """Layer widths and activation of the transition network.

    ``hidden`` may be empty: a zero-hidden-layer network is exactly a
    multinomial logistic regression. ``keep_prob`` gives the dropout
    keep-probability of the input to each weight layer (length ``L``);
    a scalar broadcasts, with the input layer pinned to 1.0.
    """

    input_dim: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    keep_prob: tuple[float, ...] = None
    output_dim: int = NUM_STATES

    def __post_init__(self):
        if self.input_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.output_dim != NUM_STATES:
            raise ValueError(f"output layer must have {NUM_STATES} units")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        kp = self.keep_prob
        if kp is None:
            kp = (1.0,) * self.num_layers
        elif np.isscalar(kp):
            kp = (1.0,) + (float(kp),) * (self.num_layers - 1)
        else:
            kp = tuple(float(p) for p in kp)
        if len(kp) != self.num_layers:
            raise ValueError(f"keep_prob needs {self.num_layers} entries, got {len(kp)}")
        if any(not 0.0 < p <= 1.0 for p in kp):
            raise ValueError("keep probabilities must lie in (0, 1]")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "keep_prob", kp)

    @property
    def num_layers(self) -> int:
        """L: number of weight layers (hidden layers + 1)."""
        return len(self.hidden) + 1

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def num_params(self) -> int:
        w = self.widths
        return sum(w[l + 1] * w[l] + w[l + 1] for l in range(self.num_layers))

    def to_json_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "keep_prob": list(self.keep_prob),
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Architecture":
        return cls(
            input_dim=d["input_dim"],
            hidden=tuple(d["hidden"]),
            activation=d["activation"],
            keep_prob=tuple(d["keep_prob"]),
            output_dim=d.get("output_dim", NUM_STATES),
        )


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases; immutable and shareable across evaluators."""

    arch: Architecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        w = self.arch.widths
        if len(self.weights) != self.arch.num_layers or len(self.biases) != self.arch.num_layers:
            raise ValueError("parameter count does not match architecture depth")
        frozen_w, frozen_b = [], []
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = np.asarray(W, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if W.shape != (w[l + 1], w[l]) or b.shape != (w[l + 1],):
                raise ValueError(
                    f"layer {l + 1}: expected W {(w[l + 1], w[l])} and b {(w[l + 1],)}, "
                    f"got {W.shape} and {b.shape}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l + 1} contains non-finite entries")
            W = W.copy()
            b = b.copy()
            W.flags.writeable = False
            b.flags.writeable = False
            frozen_w.append(W)
            frozen_b.append(b)
        object.__setattr__(self, "weights", tuple(frozen_w))
        object.__setattr__(self, "biases", tuple(frozen_b))

    def num_params(self) -> int:
        return self.arch.num_params()

    def mutable_arrays(self):
        return [W.copy() for W in self.weights], [b.copy() for b in self.biases]

    # prediction interface shared with EnsembleModel
    def predict_probs(self, X: np.ndarray) -> np.ndarray:
        P, _ = forward_batch(self, np.atleast_2d(X))
        return P

    def predict_logits(self, X: np.ndarray) -> np.ndarray:
        Z, _, _ = _forward_internal(self, np.atleast_2d(X), rng=None)
        return Z

    def predict_log_probs(self, X: np.ndarray) -> np.ndarray:
        Z = self.predict_logits(X)
        shifted = Z - Z.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def input_gradients(self, X: np.ndarray, v: int) -> np.ndarray:
        return input_gradient_batch(self, np.atleast_2d(X), v)


@dataclass
class ForwardTrace:
    """Backprop workspace: layer inputs, pre-activations, and dropout masks."""

    inputs: list  # H_0..H_{L-1} as fed to each weight layer (post-dropout)
    pre_activations: list  # Z_1..Z_L
    masks: list  # inverted-dropout multipliers or None, per layer input
    probs: np.ndarray


def init_params(arch: Architecture, seed: int) -> MlpParams:
    """Seeded He-style init: sqrt(2/fan_in) scale for relu hidden layers,
    sqrt(1/fan_in) otherwise and for the softmax layer; biases zero."""
    rng = np.random.default_rng(seed)
    w = arch.widths
    weights, biases = [], []
    for l in range(arch.num_layers):
        fan_in = w[l]
        is_hidden = l < arch.num_layers - 1
        gain = 2.0 if (arch.activation == "relu" and is_hidden) else 1.0
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(w[l + 1], fan_in)))
        biases.append(np.zeros(w[l + 1]))
    return MlpParams(arch=arch, weights=tuple(weights), biases=tuple(biases))


def _forward_internal(params: MlpParams, X: np.ndarray, rng):
    """Shared forward pass; returns (final logits, layer inputs, (Z list, masks))."""
    arch = params.arch
    act, _ = ACTIVATIONS[arch.activation]
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != arch.input_dim:
        raise ValueError(f"expected {arch.input_dim} input columns, got {X.shape[1]}")
    H = X
    inputs, pre_acts, masks = [], [], []
    for l in range(arch.num_layers):
        keep = arch.keep_prob[l]
        if rng is not None and keep < 1.0:
            mask = (rng.random(H.shape) < keep) / keep
            H = H * mask
        else:
            mask = None
        masks.append(mask)
        inputs.append(H)
        Z = H @ params.weights[l].T + params.biases[l]
        pre_acts.append(Z)
        if l < arch.num_layers - 1:
            H = act(Z)
    return pre_acts[-1], inputs, (pre_acts, masks)


def forward_batch(params: MlpParams, X: np.ndarray, rng=None):
    """Probabilities for a batch of rows. Passing a Generator enables train
    mode (inverted dropout, trace returned); infer mode is deterministic."""
    Z_L, inputs, (pre_acts, masks) = _forward_internal(params, X, rng)
    P = softmax(Z_L)
    trace = ForwardTrace(inputs=inputs, pre_activations=pre_acts, masks=masks, probs=P)
    return P, trace


def forward(params: MlpParams, x: np.ndarray, rng=None) -> np.ndarray:
    """Probability vector over the 7 states for one covariate vector."""
    P, _ = forward_batch(params, np.asarray(x, dtype=np.float64)[None, :], rng=rng)
    return P[0]


def batch_loss(params: MlpParams, trace: ForwardTrace, targets: np.ndarray, l2_lambda: float = 0.0,
               l2_include_biases: bool = False) -> float:
    """Mean NLL of the batch plus the quadratic weight penalty."""
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    p_target = trace.probs[np.arange(n), targets]
    nll = -np.log(np.maximum(p_target, 1e-300)).mean()
    penalty = l2_lambda * sum(float((W**2).sum()) for W in params.weights)
    if l2_include_biases:
        penalty += l2_lambda * sum(float((b**2).sum()) for b in params.biases)
    return float(nll + penalty)


def backward(params: MlpParams, trace: ForwardTrace, targets: np.ndarray, l2_lambda: float = 0.0,
             l2_include_biases: bool = False):
    """Exact gradients of batch_loss w.r.t. every weight and bias.

    The output-layer pre-activation gradient is (probabilities - one-hot),
    averaged over the batch; dropout masks recorded in the trace are
    respected. Returns (weight grads, bias grads) lists.
    """
    if trace is None:
        raise ValueError("backward requires the trace from forward_batch")
    arch = params.arch
    _, dact = ACTIVATIONS[arch.activation]
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    dZ = trace.probs.copy()
    dZ[np.arange(n), targets] -= 1.0
    dZ /= n
    grad_W = [None] * arch.num_layers
    grad_b = [None] * arch.num_layers
    for l in range(arch.num_layers - 1, -1, -1):
        grad_W[l] = dZ.T @ trace.inputs[l] + 2.0 * l2_lambda * params.weights[l]
        grad_b[l] = dZ.sum(axis=0)
        if l2_include_biases:
            grad_b[l] = grad_b[l] + 2.0 * l2_lambda * params.biases[l]
        if l > 0:
            dH = dZ @ params.weights[l]
            if trace.masks[l] is not None:
                dH = dH * trace.masks[l]
            dZ = dH * dact(trace.pre_activations[l - 1])
    return grad_W, grad_b


def input_gradient_batch(params: MlpParams, X: np.ndarray, v: int) -> np.ndarray:
    """d h(v, x) / dx for every row of X (infer mode, exact reverse mode)."""
    if not 0 <= v < NUM_STATES:
        raise ValueError(f"invalid state index {v}")
    arch = params.arch
    _, dact = ACTIVATIONS[arch.activation]
    _, inputs, (pre_acts, _) = _forward_internal(params, np.asarray(X, dtype=np.float64), rng=None)
    P = softmax(pre_acts[-1])
    # d p_v / d z_k = p_v (1{v=k} - p_k)
    dZ = -P[:, v : v + 1] * P
    dZ[:, v] += P[:, v]
    for l in range(arch.num_layers - 1, 0, -1):
        dH = dZ @ params.weights[l]
        dZ = dH * dact(pre_acts[l - 1])
    return dZ @ params.weights[0]


def input_gradient(params: MlpParams, x: np.ndarray, v: int) -> np.ndarray:
    return input_gradient_batch(params, np.asarray(x, dtype=np.float64)[None, :], v)[0]


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray, dtype: str) -> dict:
    data = np.ascontiguousarray(a, dtype=dtype)
    return {
        "shape": list(a.shape),
        "dtype": dtype,
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict, where: str) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    dtype = np.dtype(d["dtype"])
    expected = int(np.prod(d["shape"])) * dtype.itemsize
    if len(raw) != expected:
        raise ModelFileError(
            f"shape corruption at {where}: expected {expected} bytes for "
            f"shape {d['shape']} ({d['dtype']}), found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(d["shape"]).astype(np.float64)


def save_model(path, members, schema: FeatureSchema, stats: NormalizationStats,
               meta: dict | None = None, store_dtype: str = "float64") -> None:
    """Write one or more parameter sets plus schema, stats, and state order.

    ``store_dtype`` may be "float32" to halve file size; the test configuration
    is 64-bit for lossless round trips.
    """
    if store_dtype not in ("float64", "float32"):
        raise ValueError("store_dtype must be float64 or float32")
    members = list(members)
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "state_order": list(STATE_NAMES),
        "schema": schema.to_json_dict(),
        "schema_hash": schema.schema_hash(),
        "stats": stats.to_json_dict(),
        "meta": meta or {},
        "members": [
            {
                "architecture": m.arch.to_json_dict(),
                "weights": [_encode_array(W, store_dtype) for W in m.weights],
                "biases": [_encode_array(b, store_dtype) for b in m.biases],
            }
            for m in members
        ],
    }
    Path(path).write_text(json.dumps(doc))


def serialize(params: MlpParams, schema: FeatureSchema, stats: NormalizationStats, path,
              meta: dict | None = None) -> None:
    """Single-model convenience wrapper around save_model."""
    save_model(path, [params], schema, stats, meta=meta)


def load_model_file(path, expect_schema_hash: str | None = None):
    """Read a model file back into (members, schema, stats, meta).

    Raises ModelFileError on truncation, version mismatch, shape corruption,
    or (when expect_schema_hash is given) a schema-hash mismatch.
    """
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFileError(
            f"corrupt model file {path} ({path.stat().st_size} bytes): "
            f"JSON parse failed at offset {e.pos}"
        ) from e
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFileError(f"{path} is not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFileError(
            f"version mismatch: file has {doc.get('version')}, "
            f"this build reads {MODEL_FORMAT_VERSION}"
        )
    if doc.get("state_order") != list(STATE_NAMES):
        raise ModelFileError("state order in file does not match this build")
    if expect_schema_hash is not None and doc["schema_hash"] != expect_schema_hash:
        raise ModelFileError(
            f"schema hash mismatch: file was written for schema {doc['schema_hash']}, "
            f"expected {expect_schema_hash}"
        )
    schema = FeatureSchema.from_json_dict(doc["schema"])
    if schema.schema_hash() != doc["schema_hash"]:
        raise ModelFileError("stored schema does not match its recorded hash")
    stats = NormalizationStats.from_json_dict(doc["stats"])
    members = []
    for i, m in enumerate(doc["members"]):
        arch = Architecture.from_json_dict(m["architecture"])
        weights = [_decode_array(d, f"member {i} W{l + 1}") for l, d in enumerate(m["weights"])]
        biases = [_decode_array(d, f"member {i} b{l + 1}") for l, d in enumerate(m["biases"])]
        try:
            members.append(MlpParams(arch=arch, weights=tuple(weights), biases=tuple(biases)))
        except ValueError as e:
            raise ModelFileError(f"member {i} is corrupt: {e}") from e
    return members, schema, stats, doc.get("meta", {})


def deserialize(path):
    """Inverse of serialize: (params, schema, stats) of a single-model file."""
    members, schema, stats, _ = load_model_file(path)
    if len(members) != 1:
        raise ModelFileError(f"expected a single-model file, found {len(members)} members")
    return members[0], schema, stats
