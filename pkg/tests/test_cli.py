import numpy as np
import pytest

from clusterattn import cli
from clusterattn.bench import fit_scaling, read_csv
from clusterattn.checkpoint import save_checkpoint
from clusterattn.dataio import read_pnm, write_pnm
from clusterattn.encoder import init_params, tiny_config

TINY_CONFIG_TEXT = """\
# desk-scale model
image_size=32
patch_size=4
in_channels=1
num_classes=3
stage_depths=1,1
stage_dims=16,32
stage_centers=4,4
num_heads=2,4
head_dim=8
iterations=3
seed=2
lr=0.001
batch_size=4
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT)
    return path


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


class TestTrain:
    def test_zero_epochs_checkpoint_equals_init(self, config_file, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", "--config", config_file,
                       "--data", "synthetic:per_class=4", "--epochs", "0",
                       "--out", out)
        assert code == 0
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics == ["epoch,split,loss,top1,top5"]
        fresh = tmp_path / "fresh.cfk"
        save_checkpoint(init_params(tiny_config(seed=2)), fresh,
                        meta={"epochs_trained": "0"})
        assert (out / "final.cfk").read_bytes() == fresh.read_bytes()
        assert (out / "best.cfk").read_bytes() == fresh.read_bytes()

    def test_rerun_metrics_byte_identical(self, config_file, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            code = run_cli("train", "--config", config_file,
                           "--data", "synthetic:per_class=5", "--epochs", "2",
                           "--out", out)
            assert code == 0
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "final.cfk").read_bytes() == (out2 / "final.cfk").read_bytes()

    def test_invalid_config_key_fails_before_writing(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(TINY_CONFIG_TEXT + "bogus=1\n")
        out = tmp_path / "never"
        code = run_cli("train", "--config", cfg, "--data", "synthetic:",
                       "--out", out)
        assert code == 2
        assert not out.exists()

    def test_dataset_size_mismatch_rejected(self, config_file, tmp_path):
        out = tmp_path / "never"
        code = run_cli("train", "--config", config_file,
                       "--data", "synthetic:size=16,per_class=2", "--out", out)
        assert code == 2
        assert not out.exists()


class TestEval:
    def test_eval_reproduces_final_logged_accuracy(self, config_file, tmp_path):
        out = tmp_path / "run"
        assert run_cli("train", "--config", config_file,
                       "--data", "synthetic:per_class=5", "--epochs", "2",
                       "--out", out) == 0
        rows = [line.split(",") for line in
                (out / "metrics.csv").read_text().splitlines()[1:]]
        final_train = rows[-1]
        eval_out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", out / "final.cfk",
                       "--data", "synthetic:per_class=5", "--seed", "2",
                       "--out", eval_out) == 0
        eval_rows = [line.split(",") for line in
                     (eval_out / "metrics.csv").read_text().splitlines()[1:]]
        assert eval_rows[0][1] == "eval"
        assert eval_rows[0][3] == final_train[3]  # top1 matches exactly

    def test_random_weights_near_chance(self, tmp_path):
        model = init_params(tiny_config(seed=123))
        ckpt = tmp_path / "init.cfk"
        save_checkpoint(model, ckpt)
        eval_out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", ckpt,
                       "--data", "synthetic:per_class=30", "--seed", "5",
                       "--out", eval_out) == 0
        row = (eval_out / "metrics.csv").read_text().splitlines()[1].split(",")
        top1 = float(row[3])
        # balanced 3-class data: binomial 3-sigma band around 1/3
        sigma = np.sqrt((1 / 3) * (2 / 3) / 90)
        assert abs(top1 - 1 / 3) <= 3 * sigma

    def test_config_compatibility_enforced(self, config_file, tmp_path):
        ckpt = tmp_path / "m.cfk"
        save_checkpoint(init_params(tiny_config(seed=99)), ckpt)
        code = run_cli("eval", "--checkpoint", ckpt, "--config", config_file,
                       "--data", "synthetic:per_class=2", "--out", tmp_path / "e")
        assert code != 0  # checkpoint seed differs from the config file's

    def test_top5_reported_and_bounded(self, tmp_path):
        config = tiny_config(seed=4, num_classes=6)
        ckpt = tmp_path / "six.cfk"
        save_checkpoint(init_params(config), ckpt)
        eval_out = tmp_path / "eval"
        assert run_cli("eval", "--checkpoint", ckpt,
                       "--data", "synthetic:per_class=10", "--seed", "6",
                       "--out", eval_out) == 0
        row = (eval_out / "metrics.csv").read_text().splitlines()[1].split(",")
        top1, top5 = float(row[3]), float(row[4])
        assert top5 >= top1

    def test_worker_threads_match_serial(self, tmp_path):
        from clusterattn.dataio import load_dataset
        from clusterattn.training import evaluate
        model = init_params(tiny_config(seed=8))
        images, labels, _ = load_dataset("synthetic:per_class=6", 3, 1)
        serial = evaluate(model, images.astype(model.dtype), labels, workers=1)
        threaded = evaluate(model, images.astype(model.dtype), labels, workers=3)
        assert serial == threaded

    def test_non_finite_loss_aborts_with_diagnostic(self, tmp_path):
        from clusterattn.errors import TrainingError
        from clusterattn.training import train_model
        model = init_params(tiny_config(seed=0))
        model.params["patch_embed.w"].data[:] = np.nan
        images = np.zeros((4, 32, 32, 1), dtype=np.float32)
        labels = np.zeros(4, dtype=np.int64)
        with pytest.raises(TrainingError, match="epoch 1"):
            train_model(model, images, labels, epochs=1, batch_size=2,
                        seed=0, out_dir=tmp_path)


class TestVisualize:
    def make_image(self, tmp_path, size=32):
        rng = np.random.default_rng(0)
        img = (rng.uniform(0, 1, (size, size)) * 255).astype(np.uint8)
        path = tmp_path / "input.pgm"
        write_pnm(path, img)
        return path

    def test_grid_dims_and_colors(self, tmp_path):
        ckpt = tmp_path / "m.cfk"
        save_checkpoint(init_params(tiny_config(seed=3)), ckpt)
        image = self.make_image(tmp_path)
        out = tmp_path / "map.ppm"
        assert run_cli("visualize", "--checkpoint", ckpt, "--image", image,
                       "--out", out, "--cell", "4") == 0
        rendered = read_pnm(out)
        # final stage grid is 4x4 for the tiny config, 4px cells
        assert rendered.shape == (16, 16, 3)
        colors = {tuple(c) for c in (rendered * 255).round().astype(np.uint8).reshape(-1, 3)}
        assert len(colors) <= 4

    def test_deterministic_output(self, tmp_path):
        ckpt = tmp_path / "m.cfk"
        save_checkpoint(init_params(tiny_config(seed=3)), ckpt)
        image = self.make_image(tmp_path)
        out1, out2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        for out in (out1, out2):
            assert run_cli("visualize", "--checkpoint", ckpt, "--image", image,
                           "--out", out) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_size_mismatch_rejected(self, tmp_path):
        ckpt = tmp_path / "m.cfk"
        save_checkpoint(init_params(tiny_config(seed=3)), ckpt)
        image = self.make_image(tmp_path, size=16)
        assert run_cli("visualize", "--checkpoint", ckpt, "--image", image,
                       "--out", tmp_path / "x.ppm") != 0


class TestBench:
    def test_csv_rows_and_slope_summary(self, tmp_path, capsys):
        out = tmp_path / "bench"
        code = run_cli("bench", "--out", out, "--hw", "32,64,128,256",
                       "--d", "16", "--k", "4", "--t", "2", "--runs", "5")
        assert code == 0
        printed = capsys.readouterr().out
        lines = (out / "bench.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 4  # header + mechanisms x grid points
        samples = read_csv(out / "bench.csv")
        for mech in ("self_attention", "rca"):
            subset = [s for s in samples if s.mechanism == mech]
            fit = fit_scaling(subset, "HW")
            expect = (f"SLOPE mechanism={mech} axis=HW "
                      f"flop_slope={fit.flop_slope:.12f} "
                      f"time_slope={fit.time_slope:.6f}")
            assert expect in printed

    def test_single_point_sweep(self, tmp_path):
        out = tmp_path / "bench1"
        code = run_cli("bench", "--out", out, "--hw", "64", "--d", "8",
                       "--mechanisms", "rca")
        assert code == 0
        lines = (out / "bench.csv").read_text().splitlines()
        assert len(lines) == 2

    def test_unknown_mechanism_rejected(self, tmp_path):
        assert run_cli("bench", "--out", tmp_path / "x",
                       "--mechanisms", "flash_attention") == 2


class TestGradcheck:
    def test_ops_scope_passes(self, capsys, tmp_path):
        code = run_cli("gradcheck", "--scope", "ops", "--out", tmp_path)
        assert code == 0
        printed = capsys.readouterr().out
        for op in ("matmul", "softmax_axis0", "gelu", "recurrent_cluster_T3"):
            assert op in printed
        csv_lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
        assert csv_lines[0].startswith("op,max_rel_error")
        assert len(csv_lines) > 10

    def test_injected_sign_flip_fails(self, monkeypatch):
        import clusterattn.tensor as tensor_mod
        original = tensor_mod._gelu_grad
        monkeypatch.setattr(tensor_mod, "_gelu_grad", lambda x: -original(x))
        assert run_cli("gradcheck", "--scope", "ops") == 1


class TestParser:
    def test_requires_command(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args([])

    def test_precision_choices(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["train", "--precision", "half"])
