"""Differentiable building blocks used by every forward pass in the package.

Tensors are plain ``torch.Tensor`` objects; torch autograd supplies the
reverse-mode machinery. The functions here pin down the exact forward
formulas, the shape checks, and the optimizer/gradient-check contracts.
Training runs in float32, verification in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DiffTensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------


def conv2d(
    input: DiffTensor,
    kernel: DiffTensor,
    bias: DiffTensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> DiffTensor:
    """2-D cross-correlation on ``[B, C_in, H, W]`` with a ``[C_out, C_in, k, k]`` kernel."""
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {tuple(input.shape)} and {tuple(kernel.shape)}")
    if input.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {input.shape[1]} channels, kernel expects {kernel.shape[1]}"
        )
    k_h, k_w = kernel.shape[2], kernel.shape[3]
    if k_h > input.shape[2] + 2 * padding or k_w > input.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {k_h}x{k_w} larger than padded input {tuple(input.shape[2:])} (padding {padding})")
    return F.conv2d(input, kernel, bias, stride=stride, padding=padding)


def global_average_pool(input: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    """Mean over ``axes``; the pooled axes are removed. An empty axis list is the identity."""
    if len(axes) == 0:
        return input
    ndim = input.dim()
    norm = sorted({a % ndim if -ndim <= a < ndim else _bad_axis(a, ndim) for a in axes})
    return input.mean(dim=tuple(norm))


def _bad_axis(axis: int, ndim: int) -> int:
    raise ShapeError(f"axis {axis} out of range for tensor with {ndim} dims")


def dense(input: DiffTensor, weights: DiffTensor, bias: DiffTensor | None = None) -> DiffTensor:
    """Affine map ``input @ weights + bias`` with ``weights`` laid out ``[F_in, F_out]``."""
    if input.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense inner dimension mismatch: {tuple(input.shape)} @ {tuple(weights.shape)}")
    out = input @ weights
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"dense bias shape {tuple(bias.shape)} does not match output width {weights.shape[1]}")
        out = out + bias
    return out


def sigmoid(input: DiffTensor) -> DiffTensor:
    return torch.sigmoid(input)


def relu(input: DiffTensor) -> DiffTensor:
    return torch.relu(input)


def softmax(logits: DiffTensor, dim: int = -1) -> DiffTensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(logits: DiffTensor, dim: int = -1) -> DiffTensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def weighted_cross_entropy(
    logits: DiffTensor,
    labels: Sequence[int] | np.ndarray | torch.Tensor,
    weights: Sequence[float] | np.ndarray | torch.Tensor | None = None,
) -> DiffTensor:
    """Batch mean of ``w_b * -log softmax(logits_b)[label_b]``.

    The mean divides by the batch size, not by the sum of weights, so doubling
    every weight doubles the loss.
    """
    if logits.dim() != 2:
        raise ShapeError(f"logits must be [B, C], got {tuple(logits.shape)}")
    n_batch, n_classes = logits.shape
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels_t.shape != (n_batch,):
        raise ShapeError(f"expected {n_batch} labels, got shape {tuple(labels_t.shape)}")
    if n_batch and (labels_t.min() < 0 or labels_t.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got {labels_t.tolist()}")
    if weights is None:
        w = torch.ones(n_batch, dtype=logits.dtype)
    else:
        w = torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=logits.dtype)
        if w.shape != (n_batch,):
            raise ShapeError(f"expected {n_batch} weights, got shape {tuple(w.shape)}")
        if (w <= 0).any():
            raise ValueError("sample weights must be positive")
    nll = -log_softmax(logits, dim=1).gather(1, labels_t[:, None])[:, 0]
    return (w * nll).mean()


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass
class GRUParams:
    """Parameters of a single GRU layer.

    Input weights are ``[F, H]``, recurrent weights ``[H, H]``, biases ``[H]``,
    one triple each for the update gate (z), reset gate (r) and candidate (n).
    """

    w_z: DiffTensor
    u_z: DiffTensor
    b_z: DiffTensor
    w_r: DiffTensor
    u_r: DiffTensor
    b_r: DiffTensor
    w_n: DiffTensor
    u_n: DiffTensor
    b_n: DiffTensor

    @property
    def hidden_size(self) -> int:
        return self.u_z.shape[0]

    def tensors(self) -> list[DiffTensor]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_n, self.u_n, self.b_n]

    @classmethod
    def zeros(cls, n_in: int, hidden: int, dtype=torch.float64) -> GRUParams:
        def z(*shape):
            return torch.zeros(*shape, dtype=dtype)

        return cls(*(t for _ in range(3) for t in (z(n_in, hidden), z(hidden, hidden), z(hidden))))


def gru_cell(x_t: DiffTensor, h_prev: DiffTensor, params: GRUParams) -> DiffTensor:
    z = sigmoid(dense(x_t, params.w_z) + dense(h_prev, params.u_z) + params.b_z)
    r = sigmoid(dense(x_t, params.w_r) + dense(h_prev, params.u_r) + params.b_r)
    n = torch.tanh(dense(x_t, params.w_n) + dense(r * h_prev, params.u_n) + params.b_n)
    return (1 - z) * n + z * h_prev


def gru_unroll(sequence: DiffTensor, params: GRUParams) -> DiffTensor:
    """Run ``gru_cell`` over ``sequence[B, T, F]`` from a zero state; return the last state."""
    if sequence.dim() != 3:
        raise ShapeError(f"GRU input must be [B, T, F], got {tuple(sequence.shape)}")
    if sequence.shape[2] != params.w_z.shape[0]:
        raise ShapeError(f"GRU input width {sequence.shape[2]} != parameter width {params.w_z.shape[0]}")
    h = torch.zeros(sequence.shape[0], params.hidden_size, dtype=sequence.dtype)
    for t in range(sequence.shape[1]):
        h = gru_cell(sequence[:, t], h, params)
    return h


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[torch.Tensor] = field(default_factory=list)
    second_moment: list[torch.Tensor] = field(default_factory=list)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
) -> tuple[Sequence[torch.Tensor], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Moments are created lazily on the first call. A ``None`` gradient is treated
    as zero.
    """
    if not state.first_moment:
        state.first_moment = [torch.zeros_like(p) for p in params]
        state.second_moment = [torch.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError(f"AdamState tracks {len(state.first_moment)} tensors, got {len(params)} parameters")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / corr1
            v_hat = v / corr2
            p.sub_(state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon))
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_probed: int
    worst: tuple[int, int] | None  # (param index, flat element index)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], DiffTensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    n_probe: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare autograd gradients of ``f()`` with central differences.

    ``f`` rebuilds the graph from ``params`` on each call and must return a
    scalar. ``n_probe`` elements are drawn uniformly over all parameter
    entries; ``None`` probes every entry. Parameters should be float64.
    """
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad_(True)
    out = f()
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar output, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out.reshape(()), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if n_probe is None or n_probe >= total:
        picks = np.arange(total)
    else:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=n_probe, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst_err, worst_at = 0.0, None
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            ei = int(flat - offsets[pi])
            view = params[pi].view(-1)
            orig = view[ei].item()
            view[ei] = orig + h
            f_plus = f().item()
            view[ei] = orig - h
            f_minus = f().item()
            view[ei] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = relative_error(grads[pi].reshape(-1)[ei].item(), numeric, floor)
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (pi, ei)
    if not math.isfinite(worst_err):
        worst_err = math.inf
    return GradCheckResult(worst_err, len(picks), worst_at)


def stack_patches(x: DiffTensor) -> DiffTensor:
    """``[N_B, N_C, ...] -> [N_B * N_C, ...]``."""
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def unstack_patches(x: DiffTensor, n_crops: int) -> DiffTensor:
    """``[N_B * N_C, ...] -> [N_B, N_C, ...]``."""
    if x.shape[0] % n_crops:
        raise ShapeError(f"leading dimension {x.shape[0]} is not a multiple of n_crops={n_crops}")
    return x.reshape(x.shape[0] // n_crops, n_crops, *x.shape[1:])
