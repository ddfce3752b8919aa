"""Dense feed-forward networks with manual backpropagation.

Models are plain float64 parameter vectors plus an architecture descriptor,
so federated aggregation can treat them as points in R^d. Hidden layers use
ELU activations. Classifiers end in one sigmoid unit trained with binary
cross entropy; autoencoders end in a linear reconstruction trained with mean
squared error. Optional L2 regularization covers weights only, never biases.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ModelKindError, PoisonedUpdateError, SchemaError

ELU_ALPHA = 1.0
DECISION_THRESHOLD = 0.5

CLASSIFIER = "classifier"
AUTOENCODER = "autoencoder"

# Hidden layer widths for a 115-feature input, narrowest to deepest.
CLASSIFIER_HIDDEN = {"A": (), "B": (115,), "C": (115, 58), "D": (115, 58, 29)}
AUTOENCODER_HIDDEN = {"A": (29,), "B": (58, 29, 58), "C": (86, 58, 38, 29, 38, 58, 86)}

_CHECKPOINT_MAGIC = b"FDNN0001"


@dataclass(frozen=True)
class ArchitectureSpec:
    """Shape of a dense network: kind, hidden widths, input and output sizes."""

    kind: str
    hidden_layers: tuple[int, ...]
    input_dim: int
    output_dim: int

    def __post_init__(self) -> None:
        if self.kind not in (CLASSIFIER, AUTOENCODER):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind == CLASSIFIER and self.output_dim != 1:
            raise ConfigError("a classifier ends in exactly one unit")
        if self.kind == AUTOENCODER and self.output_dim != self.input_dim:
            raise ConfigError("an autoencoder reconstructs its input size")
        dims = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"layer sizes must be positive, got {dims}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @property
    def n_parameters(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def classifier_preset(name: str, input_dim: int = 115) -> ArchitectureSpec:
    if name not in CLASSIFIER_HIDDEN:
        raise ConfigError(f"unknown classifier preset {name!r}")
    return ArchitectureSpec(CLASSIFIER, CLASSIFIER_HIDDEN[name], input_dim, 1)


def autoencoder_preset(name: str, input_dim: int = 115) -> ArchitectureSpec:
    if name not in AUTOENCODER_HIDDEN:
        raise ConfigError(f"unknown autoencoder preset {name!r}")
    return ArchitectureSpec(AUTOENCODER, AUTOENCODER_HIDDEN[name], input_dim, input_dim)


@functools.lru_cache(maxsize=None)
def _layout(arch: ArchitectureSpec) -> tuple[tuple[int, int, int, int, int], ...]:
    # Per layer: (weight offset, bias offset, end offset, fan_in, fan_out).
    layers = []
    offset = 0
    dims = arch.layer_dims
    for fan_in, fan_out in zip(dims, dims[1:]):
        w_off = offset
        b_off = w_off + fan_in * fan_out
        offset = b_off + fan_out
        layers.append((w_off, b_off, offset, fan_in, fan_out))
    return tuple(layers)


@dataclass(frozen=True)
class ModelParameters:
    """An immutable model: architecture plus one flat parameter vector.

    The vector stores, for each layer in input-to-output order, the weight
    matrix in row-major order followed by the bias vector.
    """

    arch: ArchitectureSpec
    flat: np.ndarray

    def __post_init__(self) -> None:
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.shape != (self.arch.n_parameters,):
            raise SchemaError(
                f"expected {self.arch.n_parameters} parameters, got shape {flat.shape}"
            )
        if not np.isfinite(flat).all():
            raise PoisonedUpdateError("model parameters contain non-finite values")
        if flat.flags.writeable:
            flat = flat.copy()
            flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Return (weights, bias) views per layer, read-only."""
        out = []
        for w_off, b_off, end, fan_in, fan_out in _layout(self.arch):
            out.append((self.flat[w_off:b_off].reshape(fan_in, fan_out), self.flat[b_off:end]))
        return out


def init_model(arch: ArchitectureSpec, seed: int) -> ModelParameters:
    """Draw weights uniformly in +-sqrt(6 / (fan_in + fan_out)); biases start at 0."""
    rng = np.random.default_rng(seed)
    pieces = []
    dims = arch.layer_dims
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        pieces.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        pieces.append(np.zeros(fan_out))
    return ModelParameters(arch, np.concatenate(pieces))


def _elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, ELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(z, 0.0)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_input(params: ModelParameters, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise SchemaError(
            f"input shape {x.shape} does not match input_dim {params.arch.input_dim}"
        )
    return x


def _forward_states(params: ModelParameters, x: np.ndarray):
    # Returns per-layer inputs and pre-activations; the last pre-activation
    # is the head logits (classifier) or reconstruction (autoencoder).
    layers = params.layers()
    inputs = []
    pre_acts = []
    a = x
    for i, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w + b
        pre_acts.append(z)
        a = _elu(z) if i < len(layers) - 1 else z
    return inputs, pre_acts


def forward(params: ModelParameters, x: np.ndarray) -> np.ndarray:
    """Run the network on a (n, F) batch.

    Returns attack probabilities of shape (n,) for a classifier, or the
    reconstructed batch of shape (n, F) for an autoencoder.
    """
    x = _check_input(params, x)
    _, pre_acts = _forward_states(params, x)
    head = pre_acts[-1]
    if params.arch.kind == CLASSIFIER:
        return _sigmoid(head[:, 0])
    return head


def classify(params: ModelParameters, x: np.ndarray) -> np.ndarray:
    """Label a batch 0/1 with the fixed 0.5 probability threshold."""
    if params.arch.kind != CLASSIFIER:
        raise ModelKindError("classify needs a classifier model")
    return (forward(params, x) > DECISION_THRESHOLD).astype(np.int64)


def _weight_square_sum(params: ModelParameters) -> float:
    return float(sum(np.sum(w * w) for w, _ in params.layers()))


def loss(
    params: ModelParameters,
    x: np.ndarray,
    y: np.ndarray | None = None,
    l2_lambda: float = 0.0,
) -> float:
    """Mean data loss plus l2_lambda times the squared weight norm.

    Classifiers use binary cross entropy against y in {0, 1}; autoencoders
    use mean squared reconstruction error and take no labels.
    """
    x = _check_input(params, x)
    _, pre_acts = _forward_states(params, x)
    head = pre_acts[-1]
    if params.arch.kind == CLASSIFIER:
        if y is None:
            raise ConfigError("classifier loss requires labels")
        y = np.asarray(y, dtype=np.float64)
        z = head[:, 0]
        # BCE in logit form: softplus(z) - y*z, stable for large |z|.
        data = float(np.mean(np.logaddexp(0.0, z) - y * z))
    else:
        if y is not None:
            raise ConfigError("autoencoder loss takes no labels")
        data = float(np.mean((head - x) ** 2))
    if l2_lambda:
        data += l2_lambda * _weight_square_sum(params)
    return data


def backward(
    params: ModelParameters,
    x: np.ndarray,
    y: np.ndarray | None = None,
    l2_lambda: float = 0.0,
) -> np.ndarray:
    """Gradient of loss() as one flat vector in parameter order."""
    x = _check_input(params, x)
    inputs, pre_acts = _forward_states(params, x)
    layers = params.layers()
    n = x.shape[0]
    if params.arch.kind == CLASSIFIER:
        if y is None:
            raise ConfigError("classifier gradient requires labels")
        y = np.asarray(y, dtype=np.float64)
        dz = (_sigmoid(pre_acts[-1]) - y[:, None]) / n
    else:
        if y is not None:
            raise ConfigError("autoencoder gradient takes no labels")
        dz = 2.0 * (pre_acts[-1] - x) / (n * params.arch.output_dim)
    grad = np.empty(params.arch.n_parameters)
    layout = _layout(params.arch)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        w_off, b_off, end, _, _ = layout[i]
        dw = inputs[i].T @ dz
        if l2_lambda:
            dw += 2.0 * l2_lambda * w
        grad[w_off:b_off] = dw.ravel()
        grad[b_off:end] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ w.T) * _elu_grad(pre_acts[i - 1])
    return grad


def sgd_step(params: ModelParameters, grad: np.ndarray, lr: float) -> ModelParameters:
    """One plain gradient descent update: w <- w - lr * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise SchemaError(f"gradient shape {grad.shape} != parameters {params.flat.shape}")
    if not np.isfinite(grad).all():
        raise PoisonedUpdateError("gradient contains non-finite values")
    return ModelParameters(params.arch, params.flat - lr * grad)


def mse_per_sample(params: ModelParameters, x: np.ndarray) -> np.ndarray:
    """Per-record mean squared reconstruction error, shape (n,)."""
    if params.arch.kind != AUTOENCODER:
        raise ModelKindError("reconstruction error needs an autoencoder model")
    x = _check_input(params, x)
    _, pre_acts = _forward_states(params, x)
    return np.mean((pre_acts[-1] - x) ** 2, axis=1)


def _arch_header(arch: ArchitectureSpec) -> dict:
    return {
        "kind": arch.kind,
        "hidden_layers": list(arch.hidden_layers),
        "input_dim": arch.input_dim,
        "output_dim": arch.output_dim,
    }


def _arch_from_header(header: dict, path: str) -> ArchitectureSpec:
    try:
        return ArchitectureSpec(
            header["kind"],
            tuple(header["hidden_layers"]),
            header["input_dim"],
            header["output_dim"],
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed checkpoint header: {exc}") from None


def save_checkpoint(params: ModelParameters, path: str, fmt: str = "binary") -> None:
    """Write a self-describing checkpoint, byte-stable for equal inputs.

    fmt 'binary' stores the header as JSON followed by raw little-endian
    float64 values; fmt 'text' stores one JSON document with the parameters
    as numbers that round-trip exactly.
    """
    if fmt == "binary":
        header = json.dumps(_arch_header(params.arch), sort_keys=True, separators=(",", ":"))
        blob = header.encode("utf-8")
        with open(path, "wb") as handle:
            handle.write(_CHECKPOINT_MAGIC)
            handle.write(len(blob).to_bytes(4, "little"))
            handle.write(blob)
            handle.write(params.flat.astype("<f8").tobytes())
    elif fmt == "text":
        doc = _arch_header(params.arch)
        doc["parameters"] = params.flat.tolist()
        with open(path, "w") as handle:
            json.dump(doc, handle, sort_keys=True, separators=(",", ":"))
            handle.write("\n")
    else:
        raise ConfigError(f"unknown checkpoint format {fmt!r}")


def load_checkpoint(path: str) -> ModelParameters:
    """Read a checkpoint in either format, detected from the content."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob.startswith(_CHECKPOINT_MAGIC):
        header_len = int.from_bytes(blob[8:12], "little")
        header_end = 12 + header_len
        try:
            header = json.loads(blob[12:header_end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: malformed checkpoint header: {exc}") from None
        arch = _arch_from_header(header, path)
        flat = np.frombuffer(blob[header_end:], dtype="<f8")
        if flat.shape != (arch.n_parameters,):
            raise SchemaError(
                f"{path}: expected {arch.n_parameters} parameters, found {flat.size}"
            )
        return ModelParameters(arch, flat.astype(np.float64))
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: not a model checkpoint: {exc}") from None
    arch = _arch_from_header(doc, path)
    if "parameters" not in doc:
        raise SchemaError(f"{path}: checkpoint lists no parameters")
    return ModelParameters(arch, np.asarray(doc["parameters"], dtype=np.float64))
