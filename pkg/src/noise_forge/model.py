"""Fully-connected ReLU classifier on a flat float64 parameter vector.

Architecture: dims = (input_dim, hidden..., num_classes); every layer is an
affine map, hidden layers pass through ReLU, the last layer emits logits,
and the loss is mean cross-entropy over the indexed samples. All parameters
live in one contiguous float64 vector laid out layer by layer as
(weights row-major, then bias), which is what lets the optimizer and the
noise lab treat gradients as plain vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Dataset
from .rng import named_stream

_CHECKPOINT_FORMAT = "noise-forge-params-v1"


def param_count(dims: tuple[int, ...]) -> int:
    """Total parameters for the given layer widths."""
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ValueError("dims needs >= 2 entries, all positive")
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


class ParamVector:
    """Flat float64 parameter vector plus the layer widths that shape it.

    ``weights(i)`` and ``bias(i)`` return live views into ``values``;
    mutating a view mutates the vector. Construction validates only the
    length, not finiteness: gradient vectors are built on the hot path and
    divergence is checked where the contracts demand it (optimizer steps).
    """

    __slots__ = ("values", "dims", "_offsets")

    def __init__(self, values: np.ndarray, dims: tuple[int, ...]):
        dims = tuple(int(d) for d in dims)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("values must be 1-D")
        expected = param_count(dims)
        if values.shape[0] != expected:
            raise ValueError(
                f"values has {values.shape[0]} entries, dims {dims} need {expected}"
            )
        self.values = values
        self.dims = dims
        offsets = []
        off = 0
        for i in range(len(dims) - 1):
            f_in, f_out = dims[i], dims[i + 1]
            offsets.append((off, off + f_in * f_out))
            off += f_in * f_out + f_out
        self._offsets = tuple(offsets)

    @classmethod
    def zeros(cls, dims: tuple[int, ...]) -> "ParamVector":
        return cls(np.zeros(param_count(tuple(dims))), tuple(dims))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def weights(self, layer: int) -> np.ndarray:
        w_off, b_off = self._offsets[layer]
        f_in, f_out = self.dims[layer], self.dims[layer + 1]
        return self.values[w_off:b_off].reshape(f_in, f_out)

    def bias(self, layer: int) -> np.ndarray:
        _, b_off = self._offsets[layer]
        f_out = self.dims[layer + 1]
        return self.values[b_off : b_off + f_out]

    def slots(self, layer: int) -> tuple[int, int]:
        """(weights_offset, bias_offset) of the layer inside ``values``."""
        return self._offsets[layer]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.dims)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector(dims={self.dims}, n={len(self)})"


@dataclass(frozen=True)
class MlpSpec:
    """Shape and init seed for a classifier: input_dim -> hidden -> classes."""

    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if int(self.input_dim) < 1 or int(self.num_classes) < 1:
            raise ValueError("input_dim and num_classes must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")

    @property
    def dims(self) -> tuple[int, ...]:
        return (int(self.input_dim), *self.hidden, int(self.num_classes))


def glorot_init(spec: MlpSpec) -> ParamVector:
    """Uniform init on [-a, a] with a = sqrt(6 / (fan_in + fan_out)); zero biases.

    Weight blocks are drawn layer by layer from the "init" stream of
    ``spec.seed``, so the full vector is a pure function of the spec.
    """
    dims = spec.dims
    rng = named_stream(spec.seed, "init")
    pv = ParamVector.zeros(dims)
    for layer in range(pv.n_layers):
        f_in, f_out = dims[layer], dims[layer + 1]
        bound = np.sqrt(6.0 / (f_in + f_out))
        pv.weights(layer)[:] = rng.uniform(-bound, bound, size=(f_in, f_out))
    return pv


def _check_inputs(w: ParamVector, x_batch: np.ndarray) -> np.ndarray:
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2:
        raise ValueError("x_batch must be 2-D (batch, input_dim)")
    if x_batch.shape[1] != w.dims[0]:
        raise ValueError(
            f"x_batch has {x_batch.shape[1]} columns, model expects {w.dims[0]}"
        )
    if not np.isfinite(x_batch).all():
        raise FloatingPointError("non-finite values in model input")
    return x_batch


def _forward_acts(w: ParamVector, x_batch: np.ndarray) -> list[np.ndarray]:
    """Activations per layer: [input, relu outputs..., logits]."""
    acts = [x_batch]
    a = x_batch
    last = w.n_layers - 1
    for layer in range(w.n_layers):
        z = a @ w.weights(layer) + w.bias(layer)
        a = np.maximum(z, 0.0) if layer < last else z
        acts.append(a)
    return acts


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def forward(w: ParamVector, x_batch: np.ndarray) -> np.ndarray:
    """Class probabilities, shape (batch, num_classes); rows sum to 1."""
    x_batch = _check_inputs(w, x_batch)
    logits = _forward_acts(w, x_batch)[-1]
    return np.exp(_log_softmax(logits))


def _resolve_index(ds: Dataset, idx: np.ndarray | None) -> np.ndarray:
    if idx is None:
        return np.arange(ds.n_samples, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] == 0:
        raise ValueError("index set must be 1-D and non-empty")
    if idx.min() < 0 or idx.max() >= ds.n_samples:
        raise ValueError("index out of range for dataset")
    return idx


def mean_loss(
    w: ParamVector, ds: Dataset, idx: np.ndarray | None = None, chunk_size: int = 4096
) -> float:
    """Mean cross-entropy over the indexed samples (all samples when idx is None)."""
    idx = _resolve_index(ds, idx)
    total = 0.0
    for start in range(0, idx.shape[0], chunk_size):
        sel = idx[start : start + chunk_size]
        x = _check_inputs(w, ds.inputs[sel])
        logp = _log_softmax(_forward_acts(w, x)[-1])
        total += -logp[np.arange(sel.shape[0]), ds.labels[sel]].sum()
    return float(total / idx.shape[0])


def _backward_dzs(w: ParamVector, acts: list[np.ndarray], labels: np.ndarray) -> list[np.ndarray]:
    """Per-layer, per-sample upstream derivatives d(sum of losses)/d(z_layer).

    The last entry is softmax(logits) - onehot (no 1/B scaling); earlier
    entries are propagated through the transposed weights with the ReLU mask
    taken from the stored post-activations (relu'(0) counted as 0).
    """
    logits = acts[-1]
    probs = np.exp(_log_softmax(logits))
    dz = probs
    dz[np.arange(labels.shape[0]), labels] -= 1.0
    dzs = [dz]
    for layer in range(w.n_layers - 1, 0, -1):
        dz = (dzs[0] @ w.weights(layer).T) * (acts[layer] > 0.0)
        dzs.insert(0, dz)
    return dzs


def loss_and_grad(
    w: ParamVector, ds: Dataset, idx: np.ndarray | None = None
) -> tuple[float, ParamVector]:
    """Mean loss over the index set and its gradient as a ParamVector.

    Passing the full index set (or None) yields the full-dataset loss and
    gradient. The reduction order is fixed, so results are deterministic
    for a given (w, ds, idx).
    """
    idx = _resolve_index(ds, idx)
    x = _check_inputs(w, ds.inputs[idx])
    labels = ds.labels[idx]
    b = idx.shape[0]
    acts = _forward_acts(w, x)
    logp = _log_softmax(acts[-1])
    loss = float(-logp[np.arange(b), labels].mean())
    dzs = _backward_dzs(w, acts, labels)
    grad = ParamVector.zeros(w.dims)
    for layer in range(w.n_layers):
        grad.weights(layer)[:] = acts[layer].T @ dzs[layer] / b
        grad.bias(layer)[:] = dzs[layer].sum(axis=0) / b
    return loss, grad


def per_sample_grad_matrix(
    w: ParamVector, ds: Dataset, idx: np.ndarray | None = None, chunk_size: int = 256
) -> np.ndarray:
    """Stack per-sample loss gradients into a (len(idx), P) matrix.

    Row mu is the gradient of the single-sample cross-entropy at sample
    idx[mu]. Memory is the dominant cost: len(idx) * P doubles.
    """
    idx = _resolve_index(ds, idx)
    n = idx.shape[0]
    out = np.empty((n, len(w)))
    for start in range(0, n, chunk_size):
        sel = idx[start : start + chunk_size]
        x = _check_inputs(w, ds.inputs[sel])
        acts = _forward_acts(w, x)
        dzs = _backward_dzs(w, acts, ds.labels[sel])
        block = out[start : start + sel.shape[0]]
        for layer in range(w.n_layers):
            w_off, b_off = w.slots(layer)
            f_out = w.dims[layer + 1]
            outer = np.einsum("bi,bo->bio", acts[layer], dzs[layer])
            block[:, w_off:b_off] = outer.reshape(sel.shape[0], -1)
            block[:, b_off : b_off + f_out] = dzs[layer]
    return out


def per_sample_grads(
    w: ParamVector, ds: Dataset, idx: np.ndarray | None = None
) -> list[ParamVector]:
    """Per-sample gradients as ParamVectors (thin wrapper over the matrix form)."""
    mat = per_sample_grad_matrix(w, ds, idx)
    return [ParamVector(row, w.dims) for row in mat]


def per_sample_grad_norms(
    w: ParamVector, ds: Dataset, idx: np.ndarray | None = None, chunk_size: int = 1024
) -> tuple[np.ndarray, ParamVector]:
    """Squared per-sample gradient norms plus the summed gradient, streamed.

    Uses the rank-one structure of layer gradients: the sample's weight
    block is outer(a_prev, dz), whose squared Frobenius norm is
    |a_prev|^2 * |dz|^2, so norms never require materializing (n, P).
    Returns (sq_norms of shape (len(idx),), sum of per-sample gradients).
    """
    idx = _resolve_index(ds, idx)
    n = idx.shape[0]
    sq_norms = np.zeros(n)
    total = ParamVector.zeros(w.dims)
    for start in range(0, n, chunk_size):
        sel = idx[start : start + chunk_size]
        x = _check_inputs(w, ds.inputs[sel])
        acts = _forward_acts(w, x)
        dzs = _backward_dzs(w, acts, ds.labels[sel])
        piece = np.zeros(sel.shape[0])
        for layer in range(w.n_layers):
            a_sq = np.einsum("bi,bi->b", acts[layer], acts[layer])
            dz_sq = np.einsum("bo,bo->b", dzs[layer], dzs[layer])
            piece += a_sq * dz_sq + dz_sq
            total.weights(layer)[:] += acts[layer].T @ dzs[layer]
            total.bias(layer)[:] += dzs[layer].sum(axis=0)
        sq_norms[start : start + sel.shape[0]] = piece
    return sq_norms, total


def evaluate_accuracy(w: ParamVector, ds: Dataset, chunk_size: int = 4096) -> float:
    """Fraction of samples whose argmax logit matches the label.

    Ties resolve to the lowest class index (numpy argmax), so the value is
    deterministic; an all-zero parameter vector predicts class 0 everywhere.
    """
    correct = 0
    for start in range(0, ds.n_samples, chunk_size):
        x = _check_inputs(w, ds.inputs[start : start + chunk_size])
        logits = _forward_acts(w, x)[-1]
        correct += int((logits.argmax(axis=1) == ds.labels[start : start + chunk_size]).sum())
    return correct / ds.n_samples


def save_checkpoint(w: ParamVector, path: str | Path) -> None:
    """Write a self-describing checkpoint: JSON layout line + raw little-endian doubles."""
    dims = w.dims
    layers = []
    for layer in range(w.n_layers):
        w_off, b_off = w.slots(layer)
        layers.append(
            {
                "weights_offset": w_off,
                "weights_shape": [dims[layer], dims[layer + 1]],
                "bias_offset": b_off,
                "bias_size": dims[layer + 1],
            }
        )
    header = {
        "format": _CHECKPOINT_FORMAT,
        "layer_dims": list(dims),
        "layers": layers,
        "param_count": len(w),
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(w.values.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ParamVector:
    """Inverse of save_checkpoint; validates format tag and parameter count."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header line")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unrecognized checkpoint format {header.get('format')!r}")
    dims = tuple(int(d) for d in header["layer_dims"])
    values = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    if values.shape[0] != int(header["param_count"]) or values.shape[0] != param_count(dims):
        raise ValueError(f"{path}: parameter count does not match header")
    return ParamVector(values.copy(), dims)
