"""Dense numeric kernels with explicit backward counterparts.

Every function takes and returns plain ``numpy.ndarray`` objects and preserves
the input dtype, so precision is chosen by whoever allocates the inputs
(float32 for throughput runs, float64 for gradient checks).

``matmul`` deliberately dispatches one BLAS call per output row.  A single
gemm over a packed batch produces rows whose bits depend on how many other
rows were in the batch; per-row dispatch keeps every row a function of its own
inputs only, which is what lets a request produce identical logits whether it
runs alone or co-batched with other work.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A kernel produced (or was handed) NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product ``a @ b`` with batch-independent row results."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.shape[0] == 0:
        return np.zeros((0, b.shape[1]), dtype=np.result_type(a, b))
    a = np.ascontiguousarray(a)
    out = np.matmul(a[:, None, :], b)[:, 0, :]
    return check_finite(out, "matmul output")


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``c = a @ b`` with respect to ``a`` and ``b``."""
    return matmul(dc, b.T), matmul(a.T, dc)


def softmax_rows(x: np.ndarray, scale: float = 1.0, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis of ``scale * x``.

    ``mask`` (broadcastable to ``x``) marks admissible entries; masked entries
    get probability exactly zero.  Every row must keep at least one entry.
    """
    z = np.asarray(x) * scale
    if mask is None:
        check_finite(z, "softmax input")
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax row with every entry masked")
        check_finite(np.where(mask, z, 0.0), "softmax input")
        z = np.where(mask, z, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Gradient wrt the pre-scale input given softmax output ``y``."""
    return scale * y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain of shape {gain.shape} does not match {x.shape[-1]} columns")
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return check_finite(x * inv * gain, "rms_norm output")


def rms_norm_backward(
    x: np.ndarray, gain: np.ndarray, eps: float, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(dx, dgain)``."""
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    gdy = dy * gain
    proj = (gdy * x).mean(axis=-1, keepdims=True)
    dx = inv * gdy - x * inv**3 * proj
    dgain = (dy * x * inv).reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dgain


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return dy * s * (1.0 + x * (1.0 - s))


def embedding(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(table_shape: tuple[int, int], ids: np.ndarray, dy: np.ndarray) -> np.ndarray:
    grad = np.zeros(table_shape, dtype=dy.dtype)
    np.add.at(grad, np.asarray(ids).reshape(-1), dy.reshape(-1, table_shape[1]))
    return grad


def rope_angles(positions: np.ndarray, head_dim: int, theta: float, dtype=np.float64):
    """cos/sin tables of shape ``[len(positions), head_dim // 2]``."""
    if head_dim % 2:
        raise ShapeError("rotary encoding needs an even head_dim")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: np.ndarray, positions: np.ndarray, theta: float, inverse: bool = False) -> np.ndarray:
    """Rotate ``x[n, heads, head_dim]`` by the angle of each row's position.

    Uses the half-split pairing (dimension ``i`` with ``i + head_dim/2``).
    The rotation is orthogonal, so its backward is the ``inverse`` rotation.
    """
    half = x.shape[-1] // 2
    cos, sin = rope_angles(positions, x.shape[-1], theta, x.dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]
    if inverse:
        sin = -sin
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def cross_entropy_shifted(
    logits: np.ndarray, labels: np.ndarray, ignore_id: int = -100
) -> tuple[np.floating, np.ndarray]:
    """Mean next-token cross-entropy and its exact gradient.

    ``logits`` is ``[S, V]`` or ``[B, S, V]`` with ``labels`` of matching
    leading shape.  Position ``t`` is scored against ``labels[t + 1]`` within
    each sequence; shifted labels equal to ``ignore_id`` are left out of the
    mean.  The loss is a numpy scalar of the logits' dtype, so extended
    precision inputs keep their precision.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    squeeze = logits.ndim == 2
    if squeeze:
        logits, labels = logits[None], labels[None]
    if logits.ndim != 3 or labels.shape != logits.shape[:2]:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if logits.shape[1] < 2:
        raise ShapeError("shifted loss needs sequences of length >= 2")
    check_finite(logits, "logits")

    pred = logits[:, :-1, :]
    target = labels[:, 1:]
    valid = target != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("empty loss support")
    safe = np.where(valid, target, 0)
    if safe.min() < 0 or safe.max() >= logits.shape[-1]:
        raise ShapeError("label id out of vocabulary range")

    z = pred - pred.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    loss = ((logsum - picked) * valid).sum() / logits.dtype.type(count)

    probs = np.exp(z - logsum[..., None])
    np.put_along_axis(probs, safe[..., None], np.take_along_axis(probs, safe[..., None], axis=-1) - 1.0, axis=-1)
    grad = np.zeros_like(logits)
    grad[:, :-1, :] = probs * (valid[..., None] / count)
    return loss, (grad[0] if squeeze else grad)
