"""Recurrent cross-attention clustering and feature dispatching.

One layer owns a single set of query/key/value projections shared across
all recursion steps, so the step count never changes the parameter count.
The E-step assigns tokens to centers with a softmax over the center axis
(columns of the assignment are probability distributions); the M-step
recomputes centers as assignment-weighted sums of projected values, with
no normalization or residual unless explicitly enabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as tn
from .tensor import Tensor


@dataclass
class ClusterState:
    """Centers (K, D) and the soft assignment (K, HW) of one clustering layer."""

    centers: Tensor
    assignment: Tensor


@dataclass
class RcaParams:
    """Weights of one recurrent clustering layer.

    The q/k/v projections are applied through the ``project_*`` methods so
    callers (and tests) can intercept and count invocations. ``init_*`` is
    the two-layer FFN applied to pooled grid cells during center
    initialization; ``disp_*`` is the two-layer MLP used by feature
    dispatching.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    init_w1: Tensor
    init_b1: Tensor
    init_w2: Tensor
    init_b2: Tensor
    disp_w1: Tensor
    disp_b1: Tensor
    disp_w2: Tensor
    disp_b2: Tensor
    num_heads: int
    head_dim: int
    logit_scale: float
    activation: str = "gelu"
    similarity: str = "cosine"
    m_step_residual: bool = False

    def __post_init__(self):
        dim = self.num_heads * self.head_dim
        if self.w_q.shape != (dim, dim):
            raise ConfigError(
                f"w_q shape {self.w_q.shape} does not match num_heads*head_dim = {dim}")
        if self.activation not in tn.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim

    def project_q(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.w_q, self.b_q)

    def project_k(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.w_k, self.b_k)

    def project_v(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.w_v, self.b_v)

    def init_ffn(self, x: Tensor) -> Tensor:
        act = tn.ACTIVATIONS[self.activation]
        return tn.linear(act(tn.linear(x, self.init_w1, self.init_b1)), self.init_w2, self.init_b2)

    def dispatch_mlp(self, x: Tensor) -> Tensor:
        act = tn.ACTIVATIONS[self.activation]
        return tn.linear(act(tn.linear(x, self.disp_w1, self.disp_b1)), self.disp_w2, self.disp_b2)


def make_rca_params(rng: np.random.Generator, dim: int, num_heads: int,
                    ffn_hidden: int | None = None, dtype=np.float32,
                    activation: str = "gelu", similarity: str = "cosine",
                    logit_scale: float | None = None,
                    m_step_residual: bool = False) -> RcaParams:
    """Randomly initialized layer weights (truncated normal, zero biases)."""
    if dim % num_heads != 0:
        raise ConfigError(f"dim {dim} not divisible by num_heads {num_heads}")
    head_dim = dim // num_heads
    hidden = 4 * dim if ffn_hidden is None else ffn_hidden

    def w(shape):
        return Tensor(tn.truncated_normal(rng, shape).astype(dtype), requires_grad=True)

    def b(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    return RcaParams(
        w_q=w((dim, dim)), b_q=b(dim), w_k=w((dim, dim)), b_k=b(dim),
        w_v=w((dim, dim)), b_v=b(dim),
        init_w1=w((dim, hidden)), init_b1=b(hidden),
        init_w2=w((hidden, dim)), init_b2=b(dim),
        disp_w1=w((dim, dim)), disp_b1=b(dim),
        disp_w2=w((dim, dim)), disp_b2=b(dim),
        num_heads=num_heads, head_dim=head_dim,
        logit_scale=1.0 / math.sqrt(head_dim) if logit_scale is None else logit_scale,
        activation=activation, similarity=similarity, m_step_residual=m_step_residual,
    )


def identity_rca_params(dim: int, num_heads: int = 1, dtype=np.float64,
                        logit_scale: float = 1.0,
                        similarity: str = "cosine") -> RcaParams:
    """All projections, the init FFN, and the dispatch MLP act as identity maps."""

    def eye():
        return Tensor(np.eye(dim, dtype=dtype), requires_grad=True)

    def zero():
        return Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    return RcaParams(
        w_q=eye(), b_q=zero(), w_k=eye(), b_k=zero(), w_v=eye(), b_v=zero(),
        init_w1=eye(), init_b1=zero(), init_w2=eye(), init_b2=zero(),
        disp_w1=eye(), disp_b1=zero(), disp_w2=eye(), disp_b2=zero(),
        num_heads=num_heads, head_dim=dim // num_heads, logit_scale=logit_scale,
        activation="identity", similarity=similarity,
    )


# ---------------------------------------------------------------------------
# multi-head plumbing


def multi_head_split(x: Tensor, num_heads: int) -> list[Tensor]:
    """Partition channels into contiguous per-head views; merge is the inverse."""
    if x.data.ndim != 2:
        raise ShapeError(f"multi_head_split expects (n, dim), got shape {x.shape}")
    dim = x.shape[1]
    if dim % num_heads != 0:
        raise ShapeError(f"dim {dim} not divisible by num_heads {num_heads}")
    hd = dim // num_heads
    return [tn.narrow(x, 1, h * hd, hd) for h in range(num_heads)]


def multi_head_merge(parts: list[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    return tn.concat(parts, axis=1)


def _head_assignments(q_heads: list[Tensor], k_heads: list[Tensor],
                      logit_scale: float) -> list[Tensor]:
    # per head: softmax over the center axis of scaled q @ k^T, shape (K, HW)
    return [tn.softmax(tn.scale(tn.matmul(qh, tn.transpose(kh)), logit_scale), axis=0)
            for qh, kh in zip(q_heads, k_heads)]


def _mean_tensors(parts: list[Tensor]) -> Tensor:
    acc = parts[0]
    for p in parts[1:]:
        acc = tn.add(acc, p)
    return tn.scale(acc, 1.0 / len(parts)) if len(parts) > 1 else acc


# ---------------------------------------------------------------------------
# center initialization


def _center_grid(k: int, h: int, w: int) -> tuple[int, int]:
    """Near-square (kh, kw) with kh*kw >= k, kh <= h, kw <= w."""
    kh = min(h, max(1, round(math.sqrt(k * h / w))))
    kw = -(-k // kh)
    if kw > w:
        kw = w
        kh = -(-k // kw)  # <= h because k <= h*w
    return kh, kw


def init_centers(features: Tensor, k: int, params: RcaParams) -> Tensor:
    """Seed K centers from the token grid: adaptive mean-pool, flatten, FFN."""
    if features.data.ndim != 3:
        raise ShapeError(f"init_centers expects (h, w, dim), got shape {features.shape}")
    h, w, dim = features.shape
    if k < 1:
        raise ConfigError(f"center count must be >= 1, got {k}")
    if k > h * w:
        raise ConfigError(f"center count {k} exceeds token count {h * w} ({h}x{w} grid)")
    kh, kw = _center_grid(k, h, w)
    pooled = tn.adaptive_avg_pool(features, kh, kw)
    flat = tn.reshape(pooled, (kh * kw, dim))
    if kh * kw > k:
        flat = tn.narrow(flat, 0, 0, k)
    return params.init_ffn(flat)


# ---------------------------------------------------------------------------
# E/M steps


def e_step(centers: Tensor, features: Tensor, params: RcaParams) -> Tensor:
    """Soft assignment (K, HW): per-head softmax over centers, averaged over heads."""
    q_heads = multi_head_split(params.project_q(centers), params.num_heads)
    k_heads = multi_head_split(params.project_k(features), params.num_heads)
    return _mean_tensors(_head_assignments(q_heads, k_heads, params.logit_scale))


def m_step(assignment: Tensor, features: Tensor, params: RcaParams) -> Tensor:
    """New centers = assignment @ projected values; no normalization, no residual."""
    return tn.matmul(assignment, params.project_v(features))


def recurrent_cluster(features: Tensor, init: Tensor, iterations: int,
                      params: RcaParams) -> ClusterState:
    """Run E/M for `iterations` steps with shared projection weights.

    Key and value projections are computed exactly once; only the query is
    re-projected from the current centers each iteration. Returns the
    centers after the final M-step and the (head-averaged) assignment from
    the final E-step.
    """
    if iterations < 1:
        raise ConfigError(f"iteration count must be >= 1, got {iterations}")
    k_heads = multi_head_split(params.project_k(features), params.num_heads)
    v_heads = multi_head_split(params.project_v(features), params.num_heads)
    centers = init
    assigns: list[Tensor] = []
    for _ in range(iterations):
        q_heads = multi_head_split(params.project_q(centers), params.num_heads)
        assigns = _head_assignments(q_heads, k_heads, params.logit_scale)
        new = multi_head_merge([tn.matmul(a, vh) for a, vh in zip(assigns, v_heads)])
        if params.m_step_residual:
            new = tn.add(new, centers)
        centers = new
    return ClusterState(centers=centers, assignment=_mean_tensors(assigns))


# ---------------------------------------------------------------------------
# feature dispatching


def dispatch_features(features: Tensor, centers: Tensor, params: RcaParams) -> Tensor:
    """Residually update each token from the similarity-weighted mean of centers.

    out_i = p_i + MLP((1/K) * sum_k sim(c_k, p_i) * c_k), where sim is cosine
    similarity by default (zero-norm rows clamp to similarity 0) or a scaled
    dot product when the layer is configured with similarity="dot".
    """
    k = centers.shape[0]
    if params.similarity == "cosine":
        sim = tn.cosine_similarity(features, centers)
    else:
        sim = tn.scale(tn.matmul(features, tn.transpose(centers)),
                       1.0 / math.sqrt(centers.shape[1]))
    aggregate = tn.scale(tn.matmul(sim, centers), 1.0 / k)
    return tn.add(features, params.dispatch_mlp(aggregate))


# ---------------------------------------------------------------------------
# single-step cross-attention baselines (ablation references)

LEGACY_MODES = ("softmax_over_HW", "softmax_over_K")


def legacy_cross_attention(centers: Tensor, features: Tensor, params: RcaParams,
                           mode: str) -> Tensor:
    """One residual cross-attention update of the centers.

    mode="softmax_over_HW" normalizes attention over tokens (the standard
    decoder update); mode="softmax_over_K" normalizes over centers. Both
    include the residual, returning centers + attended values.
    """
    if mode not in LEGACY_MODES:
        raise ConfigError(f"mode must be one of {LEGACY_MODES}, got {mode!r}")
    axis = 1 if mode == "softmax_over_HW" else 0
    q_heads = multi_head_split(params.project_q(centers), params.num_heads)
    k_heads = multi_head_split(params.project_k(features), params.num_heads)
    v_heads = multi_head_split(params.project_v(features), params.num_heads)
    outs = []
    for qh, kh, vh in zip(q_heads, k_heads, v_heads):
        attn = tn.softmax(tn.scale(tn.matmul(qh, tn.transpose(kh)), params.logit_scale), axis)
        outs.append(tn.matmul(attn, vh))
    return tn.add(centers, multi_head_merge(outs))
