"""Plain ReLU MLPs: init, per-sample forward, gradients, checkpoints.

There is deliberately no batch norm or dropout anywhere: a sample's loss must
depend only on the parameters and that sample, never on which other samples
share its batch.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"IESCKPT1"


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError(f"an MLP needs at least input and output sizes, got {sizes}")
        if min(sizes) < 1:
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class ModelParams:
    weights: list[np.ndarray]  # [in, out] per layer
    biases: list[np.ndarray]  # [out] per layer
    seed: Optional[int] = None

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]))

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list, interleaved ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.weights)):
            out += [f"layer{i}.weight", f"layer{i}.bias"]
        return out

    @classmethod
    def from_arrays(cls, arrays, seed=None) -> "ModelParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), seed)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)


def init(spec: MlpSpec, seed: int) -> ModelParams:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases, seed)


@dataclass
class ForwardPass:
    losses: ad.Tensor  # [b]
    logits: ad.Tensor  # [b, classes]
    tape: Optional[ad.Tape]
    param_tensors: list[ad.Tensor]

    def gradients(self, weights=None) -> tuple[float, list[np.ndarray]]:
        """Backward through ``sum_i weights[i] * loss_i / b`` (weights default 1).

        Returns the scalar objective value and one gradient per parameter array.
        """
        if self.tape is None:
            raise ad.TapeStateError("forward pass was run without a tape")
        b = self.losses.shape[0]
        w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
        objective = ad.weighted_sum(self.losses, w / b, self.tape)
        return float(objective.data), ad.backward(self.tape, objective, self.param_tensors)


def forward_per_sample_loss(params: ModelParams, x, labels, record: bool = True) -> ForwardPass:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ad.DimensionError(
            f"input of shape {x.shape} does not match model input size {params.weights[0].shape[0]}"
        )
    tape = ad.Tape() if record else None
    tensors = [ad.Tensor(a, requires_grad=record) for a in params.arrays()]
    h = ad.Tensor(x)
    n_layers = len(params.weights)
    for i in range(n_layers):
        h = ad.add_bias(ad.matmul(h, tensors[2 * i], tape), tensors[2 * i + 1], tape)
        if i < n_layers - 1:
            h = ad.relu(h, tape)
    losses = ad.softmax_cross_entropy(h, labels, tape)
    return ForwardPass(losses, h, tape, tensors)


def loss_and_grads(params: ModelParams, x, labels, weights=None) -> tuple[float, list[np.ndarray]]:
    return forward_per_sample_loss(params, x, labels).gradients(weights)


def evaluate(params: ModelParams, x, labels, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and correctness flags, forward only."""
    labels = np.asarray(labels)
    losses, correct = [], []
    for start in range(0, len(labels), chunk):
        fp = forward_per_sample_loss(params, x[start:start + chunk], labels[start:start + chunk], record=False)
        losses.append(fp.losses.data)
        correct.append(fp.logits.data.argmax(axis=1) == labels[start:start + chunk])
    if not losses:
        return np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate(losses), np.concatenate(correct)


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary layout: magic, u32 tensor count, then per tensor u32 ndim,
    u64 dims and raw little-endian float64 data."""
    arrays = params.arrays()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (expected magic {CHECKPOINT_MAGIC!r})")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape))
        if pos + 8 * n > len(blob):
            raise ValueError(f"{path}: truncated at byte {pos}")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    return ModelParams.from_arrays(arrays)
