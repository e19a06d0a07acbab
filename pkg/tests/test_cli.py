import numpy as np
import pytest

from rimae.checkpoint import load_checkpoint, save_checkpoint
from rimae.cli import main, make_probe_clouds, linear_probe
from rimae.cloud import generate_shape, save_point_cloud
from rimae.model import ModelConfig, ModelState

TINY_CONFIG = """
token_dim=8
num_heads=2
enc_blocks=2
dec_blocks=1
pod_grid=2
mlp_ratio=2
num_points=32
num_patches=6
patch_size=8
epochs=2
batch_size=2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture
def tiny_ckpt(tmp_path):
    state = ModelState(ModelConfig.tiny(), seed=0)
    path = tmp_path / "tiny.mlrf"
    save_checkpoint(state, path)
    return str(path)


@pytest.fixture
def torus_file(tmp_path):
    path = tmp_path / "torus.opc"
    path.write_bytes(save_point_cloud(generate_shape("torus", 32, 1)))
    return str(path)


class TestGen:
    def test_deterministic_files(self, tmp_path):
        a, b = tmp_path / "a.opc", tmp_path / "b.opc"
        assert main(["gen", "--shape", "sphere", "--n", "256", "--seed", "1", "--out", str(a)]) == 0
        assert main(["gen", "--shape", "sphere", "--n", "256", "--seed", "1", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_shape_usage_error(self, tmp_path):
        assert main(["gen", "--shape", "cone", "--out", str(tmp_path / "x.opc")]) == 2

    def test_missing_subcommand_usage_error(self):
        assert main([]) == 2


class TestPretrainCommand:
    def test_writes_checkpoint_and_curve(self, tmp_path, tiny_config):
        ckpt = tmp_path / "model.mlrf"
        curve = tmp_path / "curve.csv"
        code = main([
            "pretrain", "--synthetic", "4", "--config", tiny_config,
            "--seed", "5", "--out", str(ckpt), "--curve", str(curve),
        ])
        assert code == 0
        state, cfg = load_checkpoint(ckpt)
        assert cfg.token_dim == 8
        lines = curve.read_text().strip().split("\n")
        assert lines[0] == "epoch,mean_loss,lr"
        assert len(lines) == 3  # header + 2 epochs

    def test_byte_identical_runs(self, tmp_path, tiny_config):
        outs = []
        for tag in ("x", "y"):
            ckpt = tmp_path / f"{tag}.mlrf"
            curve = tmp_path / f"{tag}.csv"
            assert main([
                "pretrain", "--synthetic", "4", "--config", tiny_config,
                "--seed", "5", "--out", str(ckpt), "--curve", str(curve),
            ]) == 0
            outs.append((ckpt.read_bytes(), curve.read_bytes()))
        assert outs[0] == outs[1]


class TestEmbed:
    def test_feature_length(self, tmp_path, tiny_ckpt, torus_file, capsys):
        out = tmp_path / "feat.txt"
        assert main(["embed", "--ckpt", tiny_ckpt, "--input", torus_file, "--out", str(out)]) == 0
        values = out.read_text().split()
        cfg = ModelConfig.tiny()
        assert len(values) == cfg.enc_blocks * cfg.token_dim

    def test_stdout_when_no_out(self, tiny_ckpt, torus_file, capsys):
        assert main(["embed", "--ckpt", tiny_ckpt, "--input", torus_file]) == 0
        printed = capsys.readouterr().out.strip().split()
        assert len(printed) == ModelConfig.tiny().enc_blocks * ModelConfig.tiny().token_dim


class TestReconstruct:
    def test_csv_and_total(self, tmp_path, tiny_ckpt, torus_file, capsys):
        out = tmp_path / "recon.csv"
        code = main([
            "reconstruct", "--ckpt", tiny_ckpt, "--input", torus_file,
            "--mask-ratio", "60", "--seed", "2", "--out", str(out),
        ])
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "patch_index,target_norm,prediction_norm,sq_error"
        assert len(lines) == 1 + 4  # round-half-up of 60% of 6 patches
        total = sum(float(ln.split(",")[3]) for ln in lines[1:])
        printed = capsys.readouterr().out
        assert printed.startswith("total_loss=")
        assert abs(float(printed.split("=")[1]) - total) < 1e-9

    def test_zero_ratio_fails(self, tiny_ckpt, torus_file, capsys):
        code = main([
            "reconstruct", "--ckpt", tiny_ckpt, "--input", torus_file, "--mask-ratio", "0",
        ])
        assert code == 1
        assert "no masked patches" in capsys.readouterr().err


class TestCheckInvariance:
    def test_invariant_model_passes(self, tiny_ckpt, torus_file, capsys):
        code = main([
            "check-invariance", "--ckpt", tiny_ckpt, "--input", torus_file,
            "--trials", "4", "--tol", "1e-4", "--seed", "3",
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert "max_rel_linf_deviation=" in out

    def test_zero_tolerance_fails(self, tiny_ckpt, torus_file):
        code = main([
            "check-invariance", "--ckpt", tiny_ckpt, "--input", torus_file,
            "--trials", "2", "--tol", "0", "--seed", "3",
        ])
        assert code == 1

    def test_zero_trials_vacuous(self, tiny_ckpt, torus_file):
        code = main([
            "check-invariance", "--ckpt", tiny_ckpt, "--input", torus_file,
            "--trials", "0", "--tol", "0", "--seed", "3",
        ])
        assert code == 0


class TestGradCheckCommand:
    def test_report_written(self, tmp_path):
        out = tmp_path / "report.txt"
        assert main(["grad-check", "--seed", "0", "--out", str(out)]) == 0
        assert out.read_text().strip().split("\n")[-1].startswith("worst ")


class TestMaskSweep:
    def test_rows_and_dedup(self, tmp_path, tiny_config, capsys):
        out = tmp_path / "sweep.csv"
        code = main([
            "mask-sweep", "--synthetic", "4", "--config", tiny_config,
            "--ratios", "20,50,50,80", "--seed", "1", "--out", str(out),
        ])
        assert code == 0
        assert "duplicate ratio 50" in capsys.readouterr().err
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "ratio,final_loss"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["20", "50", "80"]

    def test_ratio_out_of_bounds(self, tmp_path, tiny_config, capsys):
        code = main([
            "mask-sweep", "--synthetic", "4", "--config", tiny_config,
            "--ratios", "5,50", "--seed", "1", "--out", str(tmp_path / "s.csv"),
        ])
        assert code == 1


class TestProbe:
    def test_memorization_two_classes(self, tmp_path, tiny_ckpt):
        # train == test with well-separated classes: accuracy 100%
        manifest = tmp_path / "train.txt"
        lines = []
        for label, kind in (("round", "sphere"), ("flat", "two_planes")):
            for i in range(3):
                p = tmp_path / f"{kind}{i}.opc"
                p.write_bytes(save_point_cloud(generate_shape(kind, 32, 10 + i)))
                lines.append(f"{label} {p}")
        manifest.write_text("\n".join(lines) + "\n")
        import io, contextlib
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(["probe", "--ckpt", tiny_ckpt, "--train", str(manifest),
                         "--test", str(manifest), "--seed", "0"])
        assert code == 0
        out = dict(line.split("=") for line in buf.getvalue().strip().split("\n"))
        assert float(out["test_accuracy"]) == 1.0

    def test_single_class_rejected(self, tmp_path, tiny_ckpt, torus_file, capsys):
        manifest = tmp_path / "one.txt"
        manifest.write_text(f"only {torus_file}\n")
        code = main(["probe", "--ckpt", tiny_ckpt, "--train", str(manifest),
                     "--test", str(manifest), "--seed", "0"])
        assert code == 1
        assert "2 classes" in capsys.readouterr().err


class TestLinearProbe:
    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((120, 16))
        y = rng.integers(0, 4, 120)  # labels independent of features
        x_test = rng.standard_normal((120, 16))
        y_test = rng.integers(0, 4, 120)
        _, test_acc = linear_probe(x, y, x_test, y_test, num_classes=4)
        assert abs(test_acc - 0.25) <= 0.15

    def test_probe_clouds_deterministic(self):
        a, la = make_probe_clouds(2, 32, seed=9, rotated=True)
        b, lb = make_probe_clouds(2, 32, seed=9, rotated=True)
        assert np.array_equal(la, lb)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.positions, cb.positions)
