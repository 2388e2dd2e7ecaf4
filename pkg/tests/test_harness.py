from dataclasses import replace

import numpy as np
import pytest

from ddip import experiment as ex
from ddip import operators as ops
from ddip.adaptation import AdaptConfig
from ddip.cli import main
from ddip.config import dump_config, parse_config, set_value
from ddip.denoiser import build_denoiser, save_checkpoint
from ddip.phantoms import OODVolumeSpec

TINY_TRAIN = ex.TrainConfig(image_size=8, base_channels=8, channel_multipliers=(1, 2), steps=2)


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("prior") / "tiny.npz"
    save_checkpoint(path, build_denoiser(TINY_TRAIN.denoiser_config(), seed=0))
    return str(path)


def tiny_cfg(ckpt, **kw):
    base = ex.ExperimentConfig(
        phantom=OODVolumeSpec(n_slices=3, image_size=8), n_angles=6, nfe=4,
        adapt=AdaptConfig(K=2, L=2, zeta=4), train=TINY_TRAIN, checkpoint=ckpt,
        dip_steps=5, tv_iters=10)
    return replace(base, **kw)


def test_dds_on_noiseless_identity_is_near_exact(tiny_ckpt):
    cfg = tiny_cfg(tiny_ckpt, method="dds", nfe=10)
    gt = ex.make_ground_truth(cfg)
    spec = ops.OperatorSpec("identity", 8, sigma_y=0.0)
    rec = ex.reconstruct(cfg, ops.apply(spec, gt), spec, ex.load_prior(cfg))
    rows = ex.volume_metrics(ex.magnitude(rec.X0), ex.magnitude(gt))
    assert rows[:, 0].mean() > 40.0


def test_report_csv_is_byte_identical(tiny_ckpt, tmp_path):
    texts = []
    for run in ("a", "b"):
        ex.run_experiment(tiny_cfg(tiny_ckpt, out_dir=str(tmp_path / run)))
        texts.append((tmp_path / run / "metrics.csv").read_bytes())
    assert texts[0] == texts[1]
    lines = texts[0].decode().splitlines()
    assert lines[0] == "volume,slice,method,psnr,ssim,adapt_steps,seconds"
    assert len(lines) == 1 + 3  # one row per slice
    assert lines[1].endswith(",")  # reference mode leaves seconds blank


def test_artifacts_written(tiny_ckpt, tmp_path):
    ex.run_experiment(tiny_cfg(tiny_ckpt, method="ddip", out_dir=str(tmp_path)))
    for name in ("manifest.json", "measurement.raw", "measurement.json", "slices/slice_002.png",
                 "slices/slice_000.raw", "adapters/slice002.npz", "losses_slice000.csv"):
        assert (tmp_path / name).exists(), name
    png = ex.load_png16(tmp_path / "slices/slice_000.png")
    raw = np.fromfile(tmp_path / "slices/slice_000.raw", dtype="<f4").reshape(8, 8)
    np.testing.assert_allclose(png, np.clip(raw, 0, 1), atol=1 / 65535)


def test_ddip_to_d3ip_step_ratio_is_n(tiny_ckpt):
    n = 8
    cfg = tiny_cfg(tiny_ckpt, phantom=OODVolumeSpec(n_slices=n, image_size=8))
    base = ex.run_experiment(replace(cfg, method="d3ip_base")).adapt_steps
    ddip = ex.run_experiment(replace(cfg, method="ddip")).adapt_steps
    assert 0.8 * n <= ddip / base <= 1.2 * n


def test_stage_failure_names_the_stage(tiny_ckpt):
    with pytest.raises(ex.StageError, match="config"):
        ex.run_experiment(tiny_cfg(tiny_ckpt, method="nope"))
    with pytest.raises(ex.StageError, match="config"):
        ex.run_experiment(tiny_cfg("/no/such/file.npz", method="dds"))


def test_compare_methods_rows(tiny_ckpt):
    cfg = tiny_cfg(tiny_ckpt, method="admm_tv")
    rows = ex.compare_methods([cfg])
    assert len(rows) == 1 and rows[0].method == "admm_tv"
    sweep = [set_value(replace(cfg, method="d3ip_base"), "adapt.lora_rank", str(r)) for r in (4, 8, 16)]
    rows = ex.compare_methods(sweep, [f"rank {r}" for r in (4, 8, 16)])
    assert [r.label for r in rows] == ["rank 4", "rank 8", "rank 16"]
    assert ex.comparison_csv(rows).count("\n") == 4


def test_compare_methods_rejects_mismatched_seeds(tiny_ckpt):
    cfg = tiny_cfg(tiny_ckpt, method="admm_tv")
    with pytest.raises(ValueError, match="share"):
        ex.compare_methods([cfg, replace(cfg, seed=1)])
    with pytest.raises(ValueError):
        ex.compare_methods([])


def test_config_roundtrip():
    cfg = set_value(ex.for_task("mri3d"), "adapt.K", "3")
    cfg = set_value(cfg, "approximator.gamma", "2.5")
    cfg = set_value(cfg, "phantom.kind", "disks+bars")
    assert parse_config(dump_config(cfg)) == cfg
    with pytest.raises(KeyError):
        set_value(cfg, "adapt.nope", "1")
    with pytest.raises(KeyError):
        set_value(cfg, "bogus.K", "1")


def test_task_defaults():
    assert ex.for_task("csmri2d").adapt.K == 3
    assert ex.for_task("mri3d").train.channels == 2
    with pytest.raises(ValueError):
        ex.for_task("ct3d", train=replace(TINY_TRAIN, channels=2)).validate()


def test_cli_config_phantom_measure_eval(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    assert main(["config", "--adapt.K", "2", "--phantom.n_slices", "4", "--out", str(ini)]) == 0
    assert "K = 2" in ini.read_text()
    assert main(["phantom", "--config", str(ini), "--out", str(tmp_path / "ph")]) == 0
    assert (tmp_path / "ph" / "slice_003.png").exists()
    assert main(["measure", "--config", str(ini), "--out", str(tmp_path / "m")]) == 0
    y, meta = ops.read_measurement(tmp_path / "m" / "y")
    assert y.shape[0] == 4 and meta["seed"] == 0
    truth = tmp_path / "m" / "truth.npy"
    capsys.readouterr()
    assert main(["eval", str(truth), str(truth), "--method", "gt"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("volume,slice") and len(out) == 5
    assert out[1].split(",")[3] == "100.000000"


def test_cli_errors_exit_nonzero(capsys):
    assert main(["config", "--method", "magic"]) == 0  # config only echoes
    assert main(["phantom", "--phantom.kind", "stars", "--out", "/tmp/ddip-x"]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["nonexistent"])


def test_cli_reconstruct_from_measurement(tiny_ckpt, tmp_path):
    args = ["--n_angles", "6", "--phantom.n_slices", "2", "--phantom.image_size", "8",
            "--train.image_size", "8"]
    assert main(["measure", *args, "--out", str(tmp_path / "m")]) == 0
    assert main(["reconstruct", *args, "--method", "admm_tv", "--tv_iters", "5",
                 "--measurement", str(tmp_path / "m" / "y"), "--out", str(tmp_path / "r")]) == 0
    assert np.load(tmp_path / "r" / "reconstruction.npy").shape == (2, 1, 8, 8)


def test_cli_sweep(tiny_ckpt, tmp_path, capsys):
    assert main(["sweep", "--methods", "admm_tv", "--param", "tv_lambda", "--values", "0.01,0.1",
                 "--phantom.n_slices", "2", "--phantom.image_size", "8", "--train.image_size", "8",
                 "--n_angles", "6", "--tv_iters", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3 and "tv_lambda=0.1" in lines[2]


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    assert "worst relative error" in capsys.readouterr().out
