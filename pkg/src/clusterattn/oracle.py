"""Independent brute-force oracles and gradient checkers.

The clustering oracle re-derives one E/M step with explicit Python loops
and shares no code with the fast path; it always runs in double precision.
Gradient checks compare reverse-mode gradients against central finite
differences coordinate by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import clustering as cl
from . import tensor as tn
from .tensor import Tensor


def _loop_project(x, w, b):
    n, d_in = x.shape
    d_out = w.shape[1]
    out = np.zeros((n, d_out), dtype=np.float64)
    for i in range(n):
        for j in range(d_out):
            acc = float(b[j])
            for kk in range(d_in):
                acc += float(x[i, kk]) * float(w[kk, j])
            out[i, j] = acc
    return out


def _loop_softmax_columns(logits):
    # softmax over axis 0 (the center axis), max-subtracted, explicit loops
    k, n = logits.shape
    out = np.zeros_like(logits)
    for j in range(n):
        top = max(float(logits[i, j]) for i in range(k))
        total = 0.0
        for i in range(k):
            out[i, j] = math.exp(float(logits[i, j]) - top)
            total += out[i, j]
        for i in range(k):
            out[i, j] /= total
    return out


def oracle_rca_step(features, centers, weights: dict, num_heads: int = 1,
                    logit_scale: float | None = None):
    """One E-step and one M-step, computed naively in double precision.

    `weights` holds w_q/b_q/w_k/b_k/w_v/b_v arrays. Returns the
    head-averaged assignment (K, HW) and the new centers (K, D).
    """
    features = np.asarray(features, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d = centers.shape[1]
    hd = d // num_heads
    scale = 1.0 / math.sqrt(hd) if logit_scale is None else logit_scale
    q = _loop_project(centers, np.asarray(weights["w_q"], np.float64),
                      np.asarray(weights["b_q"], np.float64))
    k = _loop_project(features, np.asarray(weights["w_k"], np.float64),
                      np.asarray(weights["b_k"], np.float64))
    v = _loop_project(features, np.asarray(weights["w_v"], np.float64),
                      np.asarray(weights["b_v"], np.float64))
    kk, hw = centers.shape[0], features.shape[0]
    fused = np.zeros((kk, hw), dtype=np.float64)
    new_centers = np.zeros((kk, d), dtype=np.float64)
    for h in range(num_heads):
        lo = h * hd
        logits = np.zeros((kk, hw), dtype=np.float64)
        for i in range(kk):
            for j in range(hw):
                acc = 0.0
                for c in range(hd):
                    acc += q[i, lo + c] * k[j, lo + c]
                logits[i, j] = acc * scale
        assign = _loop_softmax_columns(logits)
        fused += assign
        for i in range(kk):
            for c in range(hd):
                acc = 0.0
                for j in range(hw):
                    acc += assign[i, j] * v[j, lo + c]
                new_centers[i, lo + c] = acc
    fused /= num_heads
    return fused, new_centers


def oracle_recurrent(features, init, iterations: int, weights: dict,
                     num_heads: int = 1, logit_scale: float | None = None):
    """T-fold composition of the single-step oracle (Q re-projected each time)."""
    centers = np.asarray(init, dtype=np.float64)
    assign = None
    for _ in range(iterations):
        assign, centers = oracle_rca_step(features, centers, weights,
                                          num_heads, logit_scale)
    return assign, centers


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, coordinate by coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


@dataclass
class GradReport:
    """Analytic-vs-numeric gradient comparison for one operation."""

    name: str
    max_rel_error: float
    mean_rel_error: float
    worst_input: str
    worst_index: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def render(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max_rel={self.max_rel_error:.3e} "
                f"mean_rel={self.mean_rel_error:.3e} tol={self.tolerance:.0e} "
                f"worst={self.worst_input}[{self.worst_index}]")

    def csv_row(self) -> str:
        return (f"{self.name},{self.max_rel_error:.6e},{self.mean_rel_error:.6e},"
                f"{self.worst_input},{self.worst_index},{self.tolerance:.0e},"
                f"{int(self.passed)}")

    CSV_HEADER = "op,max_rel_error,mean_rel_error,worst_input,worst_index,tolerance,passed"


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    # absolute error where both gradients are tiny
    small = denom < 1e-6
    err = np.abs(analytic - numeric)
    out = np.where(small, err, err / np.where(small, 1.0, denom))
    return out


def grad_check(name: str, fn, inputs: dict[str, np.ndarray], tol: float = 1e-4,
               eps: float = 1e-5) -> GradReport:
    """Check d(fn)/d(input) for every named input of a scalar-valued fn.

    `fn` receives the inputs as double-precision Tensors (requires_grad set)
    and must return a scalar Tensor built from recorded operations.
    """
    tensors = {k: Tensor(np.asarray(v, np.float64), requires_grad=True)
               for k, v in inputs.items()}
    out = fn(**tensors)
    out.backward()
    max_rel = 0.0
    total = 0.0
    count = 0
    worst_input = ""
    worst_index = -1
    for key, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def scalar_fn(arr, key=key):
            local = {k: Tensor(v.data.copy(), requires_grad=False)
                     for k, v in tensors.items()}
            local[key] = Tensor(arr.copy())
            return fn(**local).item()

        numeric = finite_diff_grad(scalar_fn, t.data.copy(), eps=eps)
        rel = _relative_errors(analytic, numeric)
        idx = int(np.argmax(rel))
        if rel.reshape(-1)[idx] > max_rel:
            max_rel = float(rel.reshape(-1)[idx])
            worst_input = key
            worst_index = idx
        total += float(rel.sum())
        count += rel.size
    return GradReport(name=name, max_rel_error=max_rel,
                      mean_rel_error=total / max(count, 1),
                      worst_input=worst_input, worst_index=worst_index,
                      tolerance=tol)


# ---------------------------------------------------------------------------
# check suites (always double precision)


class _Probe:
    """Fixed random projection to a scalar; weights drawn once per output shape."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._cache: dict[tuple[int, ...], Tensor] = {}

    def __call__(self, out: Tensor) -> Tensor:
        r = self._cache.get(out.shape)
        if r is None:
            r = Tensor(self._rng.standard_normal(out.shape))
            self._cache[out.shape] = r
        return tn.sum_all(tn.mul(out, r))


def op_grad_reports(tol: float = 1e-4, seed: int = 0) -> list[GradReport]:
    """Gradient reports for every differentiable operation in the library."""
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, body, **inputs):
        probe = _Probe(rng)

        def fn(**tensors):
            return probe(body(**tensors))

        reports.append(grad_check(name, fn, inputs, tol=tol))

    check("matmul", lambda a, b: tn.matmul(a, b),
          a=rng.standard_normal((3, 4)), b=rng.standard_normal((4, 2)))
    check("softmax_axis0", lambda x: tn.softmax(x, 0), x=rng.standard_normal((4, 5)))
    check("softmax_axis1", lambda x: tn.softmax(x, 1), x=rng.standard_normal((4, 5)))
    check("linear", lambda x, w, b: tn.linear(x, w, b),
          x=rng.standard_normal((3, 4)), w=rng.standard_normal((4, 2)),
          b=rng.standard_normal(2))
    check("gelu", lambda x: tn.gelu(x), x=rng.standard_normal((3, 4)))
    check("relu", lambda x: tn.relu(x), x=rng.standard_normal((3, 4)) + 0.2)
    check("layer_norm", lambda x, g, b: tn.layer_norm(x, g, b),
          x=rng.standard_normal((3, 5)), g=rng.standard_normal(5) + 1.0,
          b=rng.standard_normal(5))
    check("adaptive_avg_pool", lambda x: tn.adaptive_avg_pool(x, 2, 3),
          x=rng.standard_normal((5, 7, 2)))
    check("cross_entropy", lambda x: tn.cross_entropy(x, [1, 0, 2]),
          x=rng.standard_normal((3, 4)))
    check("cosine_similarity", lambda a, b: tn.cosine_similarity(a, b),
          a=rng.standard_normal((4, 3)), b=rng.standard_normal((2, 3)))

    _PARAM_KEYS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
                   "init_w1", "init_b1", "init_w2", "init_b2",
                   "disp_w1", "disp_b1", "disp_w2", "disp_b2")

    def cluster_params(tensors):
        return cl.RcaParams(
            num_heads=2, head_dim=2, logit_scale=1.0 / math.sqrt(2),
            activation="gelu", similarity="cosine",
            **{k: tensors[k] for k in _PARAM_KEYS})

    def cluster_inputs(hw=6, k=3, d=4, hidden=8):
        return dict(
            features=rng.standard_normal((hw, d)),
            init=rng.standard_normal((k, d)),
            w_q=rng.standard_normal((d, d)) * 0.5, b_q=rng.standard_normal(d) * 0.1,
            w_k=rng.standard_normal((d, d)) * 0.5, b_k=rng.standard_normal(d) * 0.1,
            w_v=rng.standard_normal((d, d)) * 0.5, b_v=rng.standard_normal(d) * 0.1,
            init_w1=rng.standard_normal((d, hidden)) * 0.5,
            init_b1=rng.standard_normal(hidden) * 0.1,
            init_w2=rng.standard_normal((hidden, d)) * 0.5,
            init_b2=rng.standard_normal(d) * 0.1,
            disp_w1=rng.standard_normal((d, d)) * 0.5,
            disp_b1=rng.standard_normal(d) * 0.1,
            disp_w2=rng.standard_normal((d, d)) * 0.5,
            disp_b2=rng.standard_normal(d) * 0.1,
        )

    def check_cluster(name, body):
        inputs = cluster_inputs()
        probe = _Probe(rng)

        def fn(**tensors):
            out = body(tensors, cluster_params(tensors), probe)
            return out if out.data.size == 1 else probe(out)

        reports.append(grad_check(name, fn, inputs, tol=tol))

    check_cluster("e_step", lambda t, p, _: cl.e_step(t["init"], t["features"], p))
    check_cluster("m_step",
                  lambda t, p, _: cl.m_step(
                      tn.softmax(tn.matmul(t["init"], tn.transpose(t["features"])), 0),
                      t["features"], p))
    check_cluster("init_centers",
                  lambda t, p, _: cl.init_centers(
                      tn.reshape(t["features"], (2, 3, 4)), 3, p))
    check_cluster("dispatch_features",
                  lambda t, p, _: cl.dispatch_features(t["features"], t["init"], p))
    check_cluster("recurrent_cluster_T3",
                  lambda t, p, probe: _state_probe(
                      cl.recurrent_cluster(t["features"], t["init"], 3, p), probe))
    check_cluster("cluster_then_dispatch",
                  lambda t, p, _: cl.dispatch_features(
                      t["features"],
                      cl.recurrent_cluster(t["features"], t["init"], 3, p).centers, p))
    check_cluster("legacy_softmax_over_HW",
                  lambda t, p, _: cl.legacy_cross_attention(t["init"], t["features"], p,
                                                            "softmax_over_HW"))
    check_cluster("legacy_softmax_over_K",
                  lambda t, p, _: cl.legacy_cross_attention(t["init"], t["features"], p,
                                                            "softmax_over_K"))
    return reports


def _state_probe(state, probe) -> Tensor:
    # cover both outputs: centers and assignment
    return tn.add(probe(state.centers), probe(state.assignment))


def model_grad_report(config=None, sample_fraction: float = 0.01,
                      tol: float = 1e-3, eps: float = 1e-5,
                      seed: int = 0) -> GradReport:
    """End-to-end model gradient check on a sampled subset of parameters."""
    from dataclasses import replace

    from .encoder import init_params, model_forward, tiny_config

    if config is None:
        config = tiny_config()
    config = replace(config, precision="double")
    model = init_params(config)
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0,
                        (config.image_size, config.image_size, config.in_channels))
    label = int(rng.integers(config.num_classes))

    def loss_tensor() -> Tensor:
        logits, _ = model_forward(image, model)
        return tn.cross_entropy(tn.reshape(logits, (1, config.num_classes)), [label])

    model.zero_grad()
    loss_tensor().backward()

    max_rel = 0.0
    total = 0.0
    count = 0
    worst_input = ""
    worst_index = -1
    for name, param in model.params.items():
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        n_pick = max(1, round(sample_fraction * param.size))
        picks = rng.choice(param.size, size=min(n_pick, param.size), replace=False)
        flat = param.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for idx in sorted(int(i) for i in picks):
            orig = flat[idx]
            with tn.no_grad():
                flat[idx] = orig + eps
                hi = loss_tensor().item()
                flat[idx] = orig - eps
                lo = loss_tensor().item()
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            rel = float(_relative_errors(np.asarray(aflat[idx]), np.asarray(numeric)))
            if rel > max_rel:
                max_rel = rel
                worst_input = name
                worst_index = idx
            total += rel
            count += 1
    return GradReport(name="model", max_rel_error=max_rel,
                      mean_rel_error=total / max(count, 1),
                      worst_input=worst_input, worst_index=worst_index,
                      tolerance=tol)
