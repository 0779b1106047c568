"""Hierarchical clustering encoder: patch embedding, clustering stages, head.

Each stage runs `depth` blocks of (pre-norm) recurrent clustering plus
feature dispatching followed by a standard FFN block; between stages the
token grid is 2x2 mean-pooled and channel-expanded. The classification
head mean-pools the final stage's cluster centers through a single linear
layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from . import clustering as cl
from . import tensor as tn
from .clustering import ClusterState, RcaParams
from .tensor import Tensor

log = logging.getLogger(__name__)

FFN_RATIO = 4  # hidden width of the init FFN and the block FFN, in units of D


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 4
    in_channels: int = 3
    num_classes: int = 1000
    stage_depths: tuple[int, ...] = (2, 2, 6, 2)
    stage_dims: tuple[int, ...] = (96, 192, 384, 768)
    stage_centers: tuple[int, ...] = (100, 100, 100, 100)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    head_dim: int = 32
    iterations: int = 3
    seed: int = 0
    precision: str = "single"
    activation: str = "gelu"
    similarity: str = "cosine"
    logit_scale: float | None = None  # None -> 1/sqrt(head_dim)
    m_step_residual: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    @property
    def dtype(self) -> np.dtype:
        return tn.Precision(self.precision).dtype

    @property
    def effective_logit_scale(self) -> float:
        if self.logit_scale is not None:
            return self.logit_scale
        return 1.0 / math.sqrt(self.head_dim)

    def validate(self):
        stages = self.num_stages
        if stages < 1:
            raise ConfigError("at least one stage is required")
        for name, seq in (("stage_dims", self.stage_dims),
                          ("stage_centers", self.stage_centers),
                          ("num_heads", self.num_heads)):
            if len(seq) != stages:
                raise ConfigError(f"{name} has {len(seq)} entries for {stages} stages")
        for s in range(stages):
            if self.stage_dims[s] != self.num_heads[s] * self.head_dim:
                raise ConfigError(
                    f"stage {s}: dim {self.stage_dims[s]} != "
                    f"num_heads {self.num_heads[s]} * head_dim {self.head_dim}")
            if self.stage_depths[s] < 1 or self.stage_centers[s] < 1:
                raise ConfigError(f"stage {s}: depth and center count must be >= 1")
        divisor = self.patch_size * 2 ** (stages - 1)
        if self.image_size % divisor != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size * 2^(stages-1) = {divisor}")
        if self.iterations < 1:
            raise ConfigError(f"iteration count must be >= 1, got {self.iterations}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be >= 1")
        if self.precision not in tn.DTYPES:
            raise ConfigError(f"precision must be one of {sorted(tn.DTYPES)}")
        if self.activation not in tn.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")

    def grid_side(self, stage: int) -> int:
        """Token-grid side length at `stage` (halves per stage)."""
        return self.image_size // self.patch_size // 2 ** stage

    def effective_centers(self, stage: int) -> int:
        """Configured center count, clamped to the stage's token count."""
        tokens = self.grid_side(stage) ** 2
        return min(self.stage_centers[stage], tokens)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale test configuration: 32px images, two small stages."""
    base = dict(image_size=32, patch_size=4, in_channels=1, num_classes=3,
                stage_depths=(1, 1), stage_dims=(16, 32), stage_centers=(4, 4),
                num_heads=(2, 4), head_dim=8, iterations=3, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameter enumeration

WEIGHT, BIAS, GAIN = "weight", "bias", "gain"


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, kind) for every learnable array of the model.

    The shapes depend only on widths, depths, and head counts; the
    iteration count appears nowhere, so the total is independent of it.
    """
    shapes: list[tuple[str, tuple[int, ...], str]] = []
    d0 = config.stage_dims[0]
    patch_in = config.patch_size ** 2 * config.in_channels
    shapes.append(("patch_embed.w", (patch_in, d0), WEIGHT))
    shapes.append(("patch_embed.b", (d0,), BIAS))
    shapes.append(("patch_embed.ln_g", (d0,), GAIN))
    shapes.append(("patch_embed.ln_b", (d0,), BIAS))
    for s in range(config.num_stages):
        d = config.stage_dims[s]
        hidden = FFN_RATIO * d
        for i in range(config.stage_depths[s]):
            p = f"stage{s}.block{i}"
            shapes.append((f"{p}.ln1_g", (d,), GAIN))
            shapes.append((f"{p}.ln1_b", (d,), BIAS))
            for proj in ("q", "k", "v"):
                shapes.append((f"{p}.rca.w_{proj}", (d, d), WEIGHT))
                shapes.append((f"{p}.rca.b_{proj}", (d,), BIAS))
            shapes.append((f"{p}.rca.init_w1", (d, hidden), WEIGHT))
            shapes.append((f"{p}.rca.init_b1", (hidden,), BIAS))
            shapes.append((f"{p}.rca.init_w2", (hidden, d), WEIGHT))
            shapes.append((f"{p}.rca.init_b2", (d,), BIAS))
            shapes.append((f"{p}.rca.disp_w1", (d, d), WEIGHT))
            shapes.append((f"{p}.rca.disp_b1", (d,), BIAS))
            shapes.append((f"{p}.rca.disp_w2", (d, d), WEIGHT))
            shapes.append((f"{p}.rca.disp_b2", (d,), BIAS))
            shapes.append((f"{p}.ln2_g", (d,), GAIN))
            shapes.append((f"{p}.ln2_b", (d,), BIAS))
            shapes.append((f"{p}.ffn_w1", (d, hidden), WEIGHT))
            shapes.append((f"{p}.ffn_b1", (hidden,), BIAS))
            shapes.append((f"{p}.ffn_w2", (hidden, d), WEIGHT))
            shapes.append((f"{p}.ffn_b2", (d,), BIAS))
        if s + 1 < config.num_stages:
            shapes.append((f"downsample{s}.w", (d, config.stage_dims[s + 1]), WEIGHT))
            shapes.append((f"downsample{s}.b", (config.stage_dims[s + 1],), BIAS))
    d_last = config.stage_dims[-1]
    shapes.append(("head.w", (d_last, config.num_classes), WEIGHT))
    shapes.append(("head.b", (config.num_classes,), BIAS))
    return shapes


def param_count(config: ModelConfig) -> int:
    """Total scalar parameter count, computed without allocating arrays."""
    return sum(int(np.prod(shape)) for _, shape, _ in param_shapes(config))


# ---------------------------------------------------------------------------
# model container


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    rca: RcaParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class StageParams:
    blocks: list[BlockParams]
    down_w: Tensor | None = None
    down_b: Tensor | None = None


class ClusterModel:
    """Configuration plus a named, ordered registry of parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != [name for name, _, _ in expected]:
            missing = [n for n, _, _ in expected if n not in params]
            extra = [n for n in params if n not in {e[0] for e in expected}]
            raise ConfigError(f"parameter registry mismatch: missing {missing}, extra {extra}")
        for name, shape, _ in expected:
            if params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.stages = self._build_views()
        self._warn_on_clamped_centers()

    def _build_views(self) -> list[StageParams]:
        c, p = self.config, self.params
        stages = []
        for s in range(c.num_stages):
            blocks = []
            for i in range(c.stage_depths[s]):
                pre = f"stage{s}.block{i}"
                rca = RcaParams(
                    w_q=p[f"{pre}.rca.w_q"], b_q=p[f"{pre}.rca.b_q"],
                    w_k=p[f"{pre}.rca.w_k"], b_k=p[f"{pre}.rca.b_k"],
                    w_v=p[f"{pre}.rca.w_v"], b_v=p[f"{pre}.rca.b_v"],
                    init_w1=p[f"{pre}.rca.init_w1"], init_b1=p[f"{pre}.rca.init_b1"],
                    init_w2=p[f"{pre}.rca.init_w2"], init_b2=p[f"{pre}.rca.init_b2"],
                    disp_w1=p[f"{pre}.rca.disp_w1"], disp_b1=p[f"{pre}.rca.disp_b1"],
                    disp_w2=p[f"{pre}.rca.disp_w2"], disp_b2=p[f"{pre}.rca.disp_b2"],
                    num_heads=c.num_heads[s], head_dim=c.head_dim,
                    logit_scale=c.effective_logit_scale, activation=c.activation,
                    similarity=c.similarity, m_step_residual=c.m_step_residual,
                )
                blocks.append(BlockParams(
                    ln1_g=p[f"{pre}.ln1_g"], ln1_b=p[f"{pre}.ln1_b"], rca=rca,
                    ln2_g=p[f"{pre}.ln2_g"], ln2_b=p[f"{pre}.ln2_b"],
                    ffn_w1=p[f"{pre}.ffn_w1"], ffn_b1=p[f"{pre}.ffn_b1"],
                    ffn_w2=p[f"{pre}.ffn_w2"], ffn_b2=p[f"{pre}.ffn_b2"]))
            down_w = p.get(f"downsample{s}.w")
            down_b = p.get(f"downsample{s}.b")
            stages.append(StageParams(blocks=blocks, down_w=down_w, down_b=down_b))
        return stages

    def _warn_on_clamped_centers(self):
        for s in range(self.config.num_stages):
            eff = self.config.effective_centers(s)
            if eff < self.config.stage_centers[s]:
                log.warning(
                    "stage %d: clamping center count %d to token count %d",
                    s, self.config.stage_centers[s], eff)

    @property
    def dtype(self) -> np.dtype:
        return self.config.dtype

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def forward(self, image) -> tuple[Tensor, list[ClusterState]]:
        return model_forward(image, self)


def init_params(config: ModelConfig, seed: int | None = None) -> ClusterModel:
    """Fresh model: truncated-normal weights (std 0.02), zero biases, unit gains."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = config.dtype
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_shapes(config):
        if kind == WEIGHT:
            data = tn.truncated_normal(rng, shape).astype(dtype)
        elif kind == GAIN:
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return ClusterModel(config, params)


# ---------------------------------------------------------------------------
# forward pipeline


def patch_embed(image: Tensor, model: ClusterModel) -> Tensor:
    """Tokenize: flatten non-overlapping patches, project, layer-normalize.

    Returns an (h, w, D) grid with h = H/patch and w = W/patch.
    """
    c = model.config
    if image.data.ndim != 3:
        raise ShapeError(f"patch_embed expects (H, W, C), got shape {image.shape}")
    hh, ww, ch = image.shape
    p = c.patch_size
    if hh % p or ww % p:
        raise ShapeError(f"image dims ({hh}, {ww}) not divisible by patch size {p}")
    h, w = hh // p, ww // p
    patches = tn.reshape(image, (h, p, w, p, ch))
    patches = tn.permute(patches, (0, 2, 1, 3, 4))
    flat = tn.reshape(patches, (h * w, p * p * ch))
    tokens = tn.linear(flat, model.params["patch_embed.w"], model.params["patch_embed.b"])
    tokens = tn.layer_norm(tokens, model.params["patch_embed.ln_g"],
                           model.params["patch_embed.ln_b"])
    return tn.reshape(tokens, (h, w, c.stage_dims[0]))


def stage_forward(tokens: Tensor, stage: StageParams, centers: int,
                  iterations: int) -> tuple[Tensor, ClusterState]:
    """Run one stage's blocks over an (h, w, D) grid.

    Per block: pre-norm, center init from the normalized grid, recurrent
    clustering, dispatch (its residual contribution is added to the trunk),
    then a pre-norm FFN with residual. Returns the tokens and the last
    block's cluster state.
    """
    h, w, d = tokens.shape
    flat = tn.reshape(tokens, (h * w, d))
    state: ClusterState | None = None
    for blk in stage.blocks:
        u = tn.layer_norm(flat, blk.ln1_g, blk.ln1_b)
        c0 = cl.init_centers(tn.reshape(u, (h, w, d)), centers, blk.rca)
        state = cl.recurrent_cluster(u, c0, iterations, blk.rca)
        dispatched = cl.dispatch_features(u, state.centers, blk.rca)
        flat = tn.add(flat, tn.sub(dispatched, u))
        v = tn.layer_norm(flat, blk.ln2_g, blk.ln2_b)
        act = tn.ACTIVATIONS[blk.rca.activation]
        ffn = tn.linear(act(tn.linear(v, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2)
        flat = tn.add(flat, ffn)
    assert state is not None
    return tn.reshape(flat, (h, w, d)), state


def downsample(tokens: Tensor, w_proj: Tensor, b_proj: Tensor) -> Tensor:
    """2x2 mean pooling then linear channel expansion."""
    h, w, d = tokens.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even grid extents, got ({h}, {w})")
    pooled = tn.adaptive_avg_pool(tokens, h // 2, w // 2)
    flat = tn.reshape(pooled, (h * w // 4, d))
    out = tn.linear(flat, w_proj, b_proj)
    return tn.reshape(out, (h // 2, w // 2, w_proj.shape[1]))


def classify(centers: Tensor, model: ClusterModel) -> Tensor:
    """Mean-pool the centers, apply the single-layer head; returns (classes,)."""
    k = centers.shape[0]
    pool = Tensor(np.full((1, k), 1.0 / k, dtype=centers.dtype))
    mean = tn.matmul(pool, centers)
    logits = tn.linear(mean, model.params["head.w"], model.params["head.b"])
    return tn.reshape(logits, (model.config.num_classes,))


def model_forward(image, model: ClusterModel) -> tuple[Tensor, list[ClusterState]]:
    """Full pipeline: patch embed, stages with downsampling, classification.

    Returns the logits and every stage's final ClusterState (the assignment
    of the last stage drives visualization).
    """
    c = model.config
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.dtype))
    if image.shape != (c.image_size, c.image_size, c.in_channels):
        raise ShapeError(
            f"image shape {image.shape} does not match configured "
            f"({c.image_size}, {c.image_size}, {c.in_channels})")
    if image.dtype != model.dtype:
        image = Tensor(image.data.astype(model.dtype))
    tokens = patch_embed(image, model)
    states: list[ClusterState] = []
    for s, stage in enumerate(model.stages):
        tokens, state = stage_forward(tokens, stage, c.effective_centers(s), c.iterations)
        states.append(state)
        if stage.down_w is not None:
            tokens = downsample(tokens, stage.down_w, stage.down_b)
    logits = classify(states[-1].centers, model)
    return logits, states


def to_precision(model: ClusterModel, precision: str) -> ClusterModel:
    """Copy of the model with parameters cast to the given precision."""
    config = replace(model.config, precision=precision)
    dtype = config.dtype
    params = {name: Tensor(t.data.astype(dtype), requires_grad=True)
              for name, t in model.params.items()}
    return ClusterModel(config, params)
