"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete.
"""

import time

import numpy as np
import pytest

from clusterattn import cli
from clusterattn import tensor as tn
from clusterattn.bench import fit_scaling, measure_cost
from clusterattn.checkpoint import load_checkpoint, save_checkpoint
from clusterattn.clustering import e_step, make_rca_params, recurrent_cluster
from clusterattn.dataio import (SyntheticSpec, adapt_batch_channels, read_pnm,
                                synthetic_dataset, write_pnm)
from clusterattn.encoder import (ModelConfig, init_params, model_forward,
                                 param_count, tiny_config)
from clusterattn.oracle import model_grad_report, op_grad_reports, oracle_recurrent
from clusterattn.tensor import Tensor
from clusterattn.training import AdamConfig, evaluate, train_model


def report(number: int, passed: bool, description: str, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {number:02d} {status}: {description}{suffix}", flush=True)
    assert passed, f"criterion {number} failed: {description}{suffix}"


def test_criterion_01_param_count_invariant_in_iterations():
    start = time.perf_counter()
    counts = {t: param_count(ModelConfig(iterations=t)) for t in (1, 2, 3, 4)}
    elapsed = time.perf_counter() - start
    ok = len(set(counts.values())) == 1 and elapsed < 1.0
    report(1, ok, "parameter count identical for T in {1,2,3,4} on default config",
           f"count={next(iter(counts.values()))}, {elapsed:.3f}s")


def test_criterion_02_assignment_columns_sum_to_one():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    checked = 0
    worst = 0.0
    for i in range(1000):
        d = int(rng.choice([4, 8, 16]))
        heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
        k = int(rng.integers(1, 9))
        hw = int(rng.integers(1, 65))
        dtype = np.float64 if i % 2 == 0 else np.float32
        params = make_rca_params(rng, dim=d, num_heads=heads, dtype=dtype)
        feats = Tensor(rng.uniform(-3, 3, (hw, d)).astype(dtype))
        centers = Tensor(rng.uniform(-3, 3, (k, d)).astype(dtype))
        if i % 3 == 0:
            assignment = recurrent_cluster(feats, centers,
                                           int(rng.integers(1, 4)),
                                           params).assignment.data
        else:
            assignment = e_step(centers, feats, params).data
        err = np.abs(assignment.sum(axis=0) - 1.0).max()
        worst = max(worst, float(err))
        checked += 1
        if err > 1e-6:
            break
    elapsed = time.perf_counter() - start
    ok = checked == 1000 and worst <= 1e-6 and elapsed < 10.0
    report(2, ok, "assignment columns sum to 1 within 1e-6 over 1000 invocations",
           f"worst={worst:.2e}, {elapsed:.1f}s")


def test_criterion_03_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        d = int(rng.choice([4, 8, 16]))
        heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
        k = int(rng.integers(1, 9))
        hw = int(rng.integers(2, 65))
        t = int(rng.integers(1, 4))
        params = make_rca_params(rng, dim=d, num_heads=heads, dtype=np.float64)
        feats = rng.standard_normal((hw, d))
        init = rng.standard_normal((k, d))
        state = recurrent_cluster(Tensor(feats), Tensor(init), t, params)
        assign, centers = oracle_recurrent(
            feats, init, t,
            {"w_q": params.w_q.data, "b_q": params.b_q.data,
             "w_k": params.w_k.data, "b_k": params.b_k.data,
             "w_v": params.w_v.data, "b_v": params.b_v.data},
            num_heads=heads, logit_scale=params.logit_scale)
        worst = max(worst,
                    float(np.abs(state.centers.data - centers).max()),
                    float(np.abs(state.assignment.data - assign).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 30.0
    report(3, ok, "recurrent clustering matches the dense loop oracle on 200 instances",
           f"worst={worst:.2e}, {elapsed:.1f}s")


def test_criterion_04_gradient_checks():
    start = time.perf_counter()
    reports = op_grad_reports(tol=1e-4)
    model_report = model_grad_report(tol=1e-3)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in reports if not r.passed]
    ok = not failed and model_report.passed and elapsed < 300.0
    report(4, ok, "all op gradients pass at 1e-4 and the end-to-end model at 1e-3",
           f"ops_worst={max(r.max_rel_error for r in reports):.2e}, "
           f"model_worst={model_report.max_rel_error:.2e}, {elapsed:.1f}s")


def test_criterion_05_complexity_scaling():
    start = time.perf_counter()
    hw_points = (256, 512, 1024, 2048, 4096)
    fits = {}
    for mech in ("rca", "self_attention"):
        samples = [measure_cost(mech, hw, k=8, d=64, t=3, runs=5, seed=1)
                   for hw in hw_points]
        fits[mech] = fit_scaling(samples, "HW")
    elapsed = time.perf_counter() - start
    rca, attn = fits["rca"], fits["self_attention"]
    ok = (abs(rca.flop_slope - 1.0) < 1e-9
          and abs(attn.flop_slope - 2.0) < 1e-9
          and 0.85 <= rca.time_slope <= 1.25
          and 1.7 <= attn.time_slope <= 2.3
          and elapsed < 300.0)
    report(5, ok, "flop slopes exactly 1.0/2.0; wall-time slopes within bands",
           f"rca: flops={rca.flop_slope:.12f} time={rca.time_slope:.3f}; "
           f"self_attention: flops={attn.flop_slope:.12f} time={attn.time_slope:.3f}; "
           f"{elapsed:.1f}s")


def test_criterion_06_key_value_projected_once():
    rng = np.random.default_rng(3)
    ok = True
    details = []
    for iters in (1, 2, 3):
        params = make_rca_params(rng, dim=8, num_heads=2, dtype=np.float64)
        counts = {"q": 0, "k": 0, "v": 0}
        orig = {"q": params.project_q, "k": params.project_k, "v": params.project_v}

        def wrap(kind):
            def proj(x):
                counts[kind] += 1
                return orig[kind](x)
            return proj

        params.project_q, params.project_k, params.project_v = (
            wrap("q"), wrap("k"), wrap("v"))
        recurrent_cluster(Tensor(rng.standard_normal((10, 8))),
                          Tensor(rng.standard_normal((3, 8))), iters, params)
        ok = ok and counts == {"q": iters, "k": 1, "v": 1}
        details.append(f"T={iters}: {counts}")
    report(6, ok, "exactly 1 key / 1 value / T query projections per clustering call",
           "; ".join(details))


def test_criterion_07_equivariance():
    rng = np.random.default_rng(11)
    worst_center = 0.0
    worst_feature = 0.0
    for _ in range(100):
        d = int(rng.choice([4, 8]))
        heads = int(rng.choice([1, 2]))
        k = int(rng.integers(2, 7))
        hw = int(rng.integers(2, 33))
        t = int(rng.integers(1, 4))
        params = make_rca_params(rng, dim=d, num_heads=heads, dtype=np.float64)
        feats = rng.standard_normal((hw, d))
        init = rng.standard_normal((k, d))

        perm = rng.permutation(k)
        a = recurrent_cluster(Tensor(feats), Tensor(init), t, params)
        b = recurrent_cluster(Tensor(feats), Tensor(init[perm]), t, params)
        worst_center = max(
            worst_center,
            float(np.abs(b.centers.data - a.centers.data[perm]).max()),
            float(np.abs(b.assignment.data - a.assignment.data[perm]).max()))

        fperm = rng.permutation(hw)
        c = recurrent_cluster(Tensor(feats[fperm]), Tensor(init), t, params)
        worst_feature = max(
            worst_feature,
            float(np.abs(c.centers.data - a.centers.data).max()),
            float(np.abs(c.assignment.data - a.assignment.data[:, fperm]).max()))
    ok = worst_center <= 1e-6 and worst_feature <= 1e-6
    report(7, ok, "center- and feature-permutation equivariance on 100 cases each",
           f"center={worst_center:.2e}, feature={worst_feature:.2e}")


def test_criterion_08_desk_scale_learning(tmp_path):
    start = time.perf_counter()
    seed = 2
    config = tiny_config(seed=seed)
    train_images, train_labels = synthetic_dataset(
        SyntheticSpec(image_size=32, classes=3, per_class=100, noise=0.1), seed=seed)
    held_images, held_labels = synthetic_dataset(
        SyntheticSpec(image_size=32, classes=3, per_class=20, noise=0.1),
        seed=1000 + seed)
    train_images = adapt_batch_channels(train_images, 1)
    held_images = adapt_batch_channels(held_images, 1)
    model = init_params(config)
    train_model(model, train_images, train_labels, epochs=20, batch_size=4,
                seed=seed, out_dir=tmp_path, adam=AdamConfig(lr=1e-3))
    train_acc = evaluate(model, train_images.astype(model.dtype), train_labels).top1
    held_acc = evaluate(model, held_images.astype(model.dtype), held_labels).top1
    elapsed = time.perf_counter() - start
    ok = train_acc >= 0.95 and held_acc >= 0.85 and elapsed < 600.0
    report(8, ok, "20-epoch synthetic-shapes run reaches >=95% train / >=85% held-out",
           f"train={train_acc:.4f}, held-out={held_acc:.4f}, {elapsed:.0f}s")


@pytest.fixture(scope="module")
def default_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("default") / "default.cfk"
    save_checkpoint(init_params(ModelConfig(seed=0)), path)
    return path


def test_criterion_09_visualization_contract(default_checkpoint, tmp_path):
    rng = np.random.default_rng(0)
    image_path = tmp_path / "input.ppm"
    write_pnm(image_path, rng.integers(0, 256, (224, 224, 3), dtype=np.uint8))
    outputs = []
    for name in ("a.ppm", "b.ppm"):
        out = tmp_path / name
        code = cli.main(["visualize", "--checkpoint", str(default_checkpoint),
                         "--image", str(image_path), "--out", str(out),
                         "--cell", "16"])
        assert code == 0
        outputs.append(out.read_bytes())
    rendered = read_pnm(tmp_path / "a.ppm")
    k_eff = ModelConfig().effective_centers(3)  # 49 at stage 4 for 224 inputs
    colors = {tuple(c) for c in
              (rendered * 255).round().astype(np.uint8).reshape(-1, 3)}
    ok = (rendered.shape == (7 * 16, 7 * 16, 3)
          and len(colors) <= k_eff
          and outputs[0] == outputs[1])
    report(9, ok, "7x7 assignment map, <= K colors, deterministic across reruns",
           f"cells=7x7, colors={len(colors)} <= K={k_eff}")


def test_criterion_10_checkpoint_roundtrip(tmp_path):
    model = init_params(tiny_config(seed=17))
    path = tmp_path / "m.cfk"
    save_checkpoint(model, path)
    loaded, _ = load_checkpoint(path)
    rng = np.random.default_rng(5)
    identical = True
    for _ in range(10):
        img = rng.uniform(0, 1, (32, 32, 1)).astype(np.float32)
        with tn.no_grad():
            a = model_forward(img, model)[0].data
            b = model_forward(img, loaded)[0].data
        identical = identical and bool((a == b).all())
    report(10, identical, "save -> load -> forward is bit-identical on 10 inputs")
