"""Per-client predictors, the co-distillation objective, and its exact
stochastic gradient via hand-derived backpropagation.

Three architectures share one flat-parameter interface:

  linear_regressor(d)      raw predictions X @ w, squared-error loss
  softmax_linear(d, N)     softmax(X @ W + b), cross-entropy loss
  mlp(d, h, N)             softmax(tanh(X @ W1 + b1) @ W2 + b2)

The MLP activation is tanh so every classifier is smooth, matching the
smoothness the convergence monitor relies on. Classification outputs are
probability rows on the simplex; regression mode reuses the same interfaces
with "logits" meaning raw predictions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError
from .rng import substream

ARCH_LINEAR = "linear_regressor"
ARCH_SOFTMAX = "softmax_linear"
ARCH_MLP = "mlp"

_ARCH_TAGS = {ARCH_LINEAR: 1, ARCH_SOFTMAX: 2, ARCH_MLP: 3}
_PARAM_MAGIC = b"FKPV"


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    dim: int
    num_classes: int = 1
    hidden: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.arch not in _ARCH_TAGS:
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if self.arch in (ARCH_SOFTMAX, ARCH_MLP) and self.num_classes < 2:
            raise ConfigurationError("classification needs num_classes >= 2")
        if self.arch == ARCH_MLP and self.hidden < 1:
            raise ConfigurationError("mlp needs hidden >= 1")

    @property
    def out_width(self) -> int:
        return 1 if self.arch == ARCH_LINEAR else self.num_classes


def param_count(spec: ModelSpec) -> int:
    d, n, h = spec.dim, spec.num_classes, spec.hidden
    if spec.arch == ARCH_LINEAR:
        return d
    if spec.arch == ARCH_SOFTMAX:
        return d * n + n
    return d * h + h + h * n + n


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Weights ~ Uniform(-init_scale, init_scale), biases zero."""
    rng = substream(seed, "param-init")
    s = spec.init_scale
    d, n, h = spec.dim, spec.num_classes, spec.hidden
    if spec.arch == ARCH_LINEAR:
        return rng.uniform(-s, s, d)
    if spec.arch == ARCH_SOFTMAX:
        return np.concatenate([rng.uniform(-s, s, d * n), np.zeros(n)])
    return np.concatenate(
        [
            rng.uniform(-s, s, d * h),
            np.zeros(h),
            rng.uniform(-s, s, h * n),
            np.zeros(n),
        ]
    )


def _unpack(spec: ModelSpec, params: np.ndarray):
    d, n, h = spec.dim, spec.num_classes, spec.hidden
    if params.shape != (param_count(spec),):
        raise ConfigurationError(
            f"parameter vector length {params.shape} does not match spec"
        )
    if spec.arch == ARCH_LINEAR:
        return (params,)
    if spec.arch == ARCH_SOFTMAX:
        return params[: d * n].reshape(d, n), params[d * n :]
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * n
    return (
        params[:o1].reshape(d, h),
        params[o1:o2],
        params[o2:o3].reshape(h, n),
        params[o3:],
    )


def stable_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift stabilization."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_parts(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray):
    """Class scores plus the hidden activations needed for backprop."""
    if inputs.shape[1] != spec.dim:
        raise ConfigurationError("input width does not match spec dim")
    if spec.arch == ARCH_LINEAR:
        (w,) = _unpack(spec, params)
        return (inputs @ w)[:, None], None
    if spec.arch == ARCH_SOFTMAX:
        w, b = _unpack(spec, params)
        return inputs @ w + b, None
    w1, b1, w2, b2 = _unpack(spec, params)
    hidden = np.tanh(inputs @ w1 + b1)
    return hidden @ w2 + b2, hidden


def forward_logits(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Probability rows over classes; raw predictions for the regressor."""
    scores, _ = _forward_parts(spec, params, inputs)
    out = scores if spec.arch == ARCH_LINEAR else stable_softmax(scores)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise NumericError(f"non-finite model output at row {bad}")
    return out


def local_loss(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy (classification) or sum of squared errors (regression)."""
    if len(inputs) == 0:
        raise ConfigurationError("batch must be non-empty")
    scores, _ = _forward_parts(spec, params, inputs)
    if spec.arch == ARCH_LINEAR:
        resid = scores[:, 0] - targets
        return float(resid @ resid)
    logp = _log_softmax(scores)
    return float(-logp[np.arange(len(targets)), targets.astype(np.int64)].mean())


def _backprop_scores(spec, params, inputs, hidden, score_grad):
    """Chain a gradient at the class scores back to a flat parameter gradient."""
    if spec.arch == ARCH_LINEAR:
        return inputs.T @ score_grad[:, 0]
    if spec.arch == ARCH_SOFTMAX:
        return np.concatenate([(inputs.T @ score_grad).ravel(), score_grad.sum(axis=0)])
    _, _, w2, _ = _unpack(spec, params)
    d_hidden = (score_grad @ w2.T) * (1.0 - hidden * hidden)
    return np.concatenate(
        [
            (inputs.T @ d_hidden).ravel(),
            d_hidden.sum(axis=0),
            (hidden.T @ score_grad).ravel(),
            score_grad.sum(axis=0),
        ]
    )


def grad_local(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Exact gradient of local_loss."""
    scores, hidden = _forward_parts(spec, params, inputs)
    if spec.arch == ARCH_LINEAR:
        score_grad = 2.0 * (scores - targets[:, None])
    else:
        probs = stable_softmax(scores)
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(targets)), targets.astype(np.int64)] = 1.0
        score_grad = (probs - onehot) / len(targets)
    return _backprop_scores(spec, params, inputs, hidden, score_grad)


def _check_sbar(spec: ModelSpec, public_inputs: np.ndarray, sbar_rows: np.ndarray) -> None:
    if sbar_rows.shape != (len(public_inputs), spec.out_width):
        raise ConfigurationError(
            f"distillation target shape {sbar_rows.shape} does not match "
            f"public batch ({len(public_inputs)}, {spec.out_width})"
        )


def distill_penalty(spec: ModelSpec, params: np.ndarray, public_inputs: np.ndarray, sbar_rows: np.ndarray) -> float:
    """Mean over the public batch of the squared prediction disagreement."""
    _check_sbar(spec, public_inputs, sbar_rows)
    preds = forward_logits(spec, params, public_inputs)
    diff = sbar_rows - preds
    return float((diff * diff).sum() / len(public_inputs))


def objective_phi(
    spec: ModelSpec,
    params: np.ndarray,
    batch_inputs: np.ndarray,
    batch_targets: np.ndarray,
    public_inputs: np.ndarray,
    sbar_rows: np.ndarray,
    lam: float,
) -> float:
    """Local loss plus lam times the mini-batch estimate of the pool-average
    squared disagreement with the distillation target."""
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    value = local_loss(spec, params, batch_inputs, batch_targets)
    if lam > 0:
        value += lam * distill_penalty(spec, params, public_inputs, sbar_rows)
    return value


def grad_phi_stochastic(
    spec: ModelSpec,
    params: np.ndarray,
    batch_inputs: np.ndarray,
    batch_targets: np.ndarray,
    public_inputs: np.ndarray,
    sbar_rows: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Exact gradient of objective_phi with respect to the flat parameters."""
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    grad = grad_local(spec, params, batch_inputs, batch_targets)
    if lam > 0:
        _check_sbar(spec, public_inputs, sbar_rows)
        scores, hidden = _forward_parts(spec, params, public_inputs)
        scale = 2.0 * lam / len(public_inputs)
        if spec.arch == ARCH_LINEAR:
            score_grad = scale * (scores - sbar_rows)
        else:
            probs = stable_softmax(scores)
            diff = probs - sbar_rows
            # softmax Jacobian applied to diff: diag(p) - p p^T, row-wise
            inner = (probs * diff).sum(axis=1, keepdims=True)
            score_grad = scale * probs * (diff - inner)
        grad = grad + _backprop_scores(spec, params, public_inputs, hidden, score_grad)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return grad


def save_params(path, spec: ModelSpec, params: np.ndarray) -> None:
    """Little-endian f64 dump with a 16-byte header (magic, arch tag, length)."""
    values = np.ascontiguousarray(params, dtype="<f8")
    header = _PARAM_MAGIC + struct.pack("<IQ", _ARCH_TAGS[spec.arch], values.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def load_params(path) -> tuple[int, np.ndarray]:
    """Returns (arch tag, values) from a save_params dump."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _PARAM_MAGIC:
            raise ConfigurationError(f"{path} is not a parameter checkpoint")
        tag, count = struct.unpack("<IQ", header[4:])
        values = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if values.size != count:
            raise ConfigurationError(f"{path} is truncated")
    return tag, values.astype(np.float64)


def arch_tag(spec: ModelSpec) -> int:
    return _ARCH_TAGS[spec.arch]
