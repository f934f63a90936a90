import json
import math

import numpy as np
import pytest
from PIL import Image

from varfusion import cli
from varfusion.imaging import (
    SensorModel,
    gaussian_kernel,
    simulate_pair,
    spatial_degrade,
    spectral_degrade,
    synthetic_scene,
)
from varfusion.io import hsc_bytes, read_hsc, write_hsc
from varfusion.metrics import MetricReport, ergas, psnr, sam, uiqi
from varfusion.optimizer import FusionError, bicubic_baseline

SMALL = ["--rows", "16", "--cols", "16", "--bands", "8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def pair_dir(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", *SMALL, "--scaling", "0.1", "--patch-amplitude", "0.2",
               "--patch-size", "6", "--out-dir", out, "--seed", 3) == 0
    return out


# -- simulate ------------------------------------------------------------------------

def test_simulate_defaults_follow_the_degradation_protocol(pair_dir):
    man = json.loads((pair_dir / "manifest.json").read_text())
    sensor = cli.sensor_from_dict(man["sensor"])
    np.testing.assert_array_equal(sensor.blur_kernel, gaussian_kernel(8, 4.0))
    assert sensor.decim_factor == 4 and sensor.srf.shape == (4, 8)
    assert man["seed"] == 3 and man["snr_db"] == 35.0 and man["hr_shape"] == [8, 16, 16]
    y_h, y_m = read_hsc(pair_dir / "Y_h.hsc"), read_hsc(pair_dir / "Y_m.hsc")
    assert y_h.shape == (8, 4, 4) and y_m.shape == (4, 16, 16)
    z_h = read_hsc(pair_dir / "Z_h_true.hsc")
    z_m = read_hsc(pair_dir / "Z_m_true.hsc")
    assert not np.array_equal(z_h.data, z_m.data)
    # same draw as the library, rounded once to the file precision
    ref_h, ref_m = simulate_pair(synthetic_scene(16, 16, 8, seed=3).data, z_m.data, sensor, 35.0, 3)
    np.testing.assert_array_equal(y_h.data, ref_h.astype(np.float32))


def test_simulate_noiseless(tmp_path):
    assert run("simulate", *SMALL, "--snr", "inf", "--out-dir", tmp_path) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["snr_db"] == "inf"
    sensor = cli.sensor_from_dict(man["sensor"])
    z = synthetic_scene(16, 16, 8, seed=0).data  # unrounded truth
    np.testing.assert_array_equal(read_hsc(tmp_path / "Y_h.hsc").data,
                                  spatial_degrade(z, sensor).astype(np.float32))
    np.testing.assert_array_equal(read_hsc(tmp_path / "Y_m.hsc").data,
                                  spectral_degrade(z, sensor).astype(np.float32))


def test_simulate_from_input_file(tmp_path):
    cube = synthetic_scene(8, 8, 6, seed=1)
    write_hsc(cube, tmp_path / "ref.hsc")
    assert run("simulate", "--input", tmp_path / "ref.hsc", "--snr", "inf",
               "--out-dir", tmp_path / "o") == 0
    assert (tmp_path / "o" / "Z_h_true.hsc").read_bytes() == hsc_bytes(cube)
    assert read_hsc(tmp_path / "o" / "Y_h.hsc").shape == (6, 2, 2)


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("--seed", 5, "simulate", *SMALL, "--out-dir", tmp_path / name) == 0
    assert run("simulate", *SMALL, "--seed", 6, "--out-dir", tmp_path / "c") == 0
    for f in ("Y_h.hsc", "Y_m.hsc", "Z_h_true.hsc", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "Y_h.hsc").read_bytes() != (tmp_path / "c" / "Y_h.hsc").read_bytes()


def test_seed_flag_position(tmp_path):
    assert run("--seed", 4, "simulate", *SMALL, "--out-dir", tmp_path / "a") == 0
    assert run("simulate", *SMALL, "--seed", 4, "--out-dir", tmp_path / "b") == 0
    assert (tmp_path / "a" / "Y_h.hsc").read_bytes() == (tmp_path / "b" / "Y_h.hsc").read_bytes()


def test_config_file_seed_and_sensor(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("seed: 4\nsensor:\n  n_ms: 2\n  decim_factor: 2\n")
    assert run("--config", cfg, "simulate", *SMALL, "--out-dir", tmp_path / "a") == 0
    assert read_hsc(tmp_path / "a" / "Y_m.hsc").shape == (2, 16, 16)
    assert read_hsc(tmp_path / "a" / "Y_h.hsc").shape == (8, 8, 8)
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 4
    # the command-line seed wins over the file
    assert run("--config", cfg, "--seed", 9, "simulate", *SMALL, "--out-dir", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 9


# -- fuse -------------------------------------------------------------------------------

def test_zero_iterations_give_the_initialisation(pair_dir, tmp_path):
    out = tmp_path / "f"
    assert run("fuse", "--input-dir", pair_dir, "--out-dir", out, "--bcd-iters", 0,
               "--baseline", "bicubic") == 0
    sensor = cli.sensor_from_dict(json.loads((pair_dir / "manifest.json").read_text())["sensor"])
    z0 = bicubic_baseline(read_hsc(pair_dir / "Y_h.hsc").data, sensor).astype(np.float32)
    for name in ("Zh_hat.hsc", "Zm_hat.hsc", "baseline_bicubic.hsc"):
        np.testing.assert_array_equal(read_hsc(out / name).data, z0)
    assert (out / "objective_trace.log").read_text().splitlines() == ["# iteration objective"]


def test_fuse_writes_trace_and_beats_interpolation_without_denoiser(pair_dir, tmp_path):
    out = tmp_path / "f"
    assert run("fuse", "--yh", pair_dir / "Y_h.hsc", "--ym", pair_dir / "Y_m.hsc",
               "--manifest", pair_dir / "manifest.json", "--out-dir", out,
               "--bcd-iters", 3, "--no-denoiser", "--baseline", "bicubic") == 0
    rows = [ln.split() for ln in (out / "objective_trace.log").read_text().splitlines()[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 3]
    assert all(math.isfinite(float(r[1])) for r in rows)
    truth = read_hsc(pair_dir / "Z_h_true.hsc").data
    assert psnr(read_hsc(out / "Zh_hat.hsc").data, truth) > psnr(
        read_hsc(out / "baseline_bicubic.hsc").data, truth)


def test_preset_flag_selects_parameters(pair_dir, tmp_path, monkeypatch):
    seen = []
    real = cli.run_fusion

    def spy(*args, cfg=None, **kw):
        seen.append(cfg)
        return real(*args, cfg=cfg, **kw)

    monkeypatch.setattr(cli, "run_fusion", spy)
    for preset in ("moderate", "significant"):
        assert run("fuse", "--input-dir", pair_dir, "--out-dir", tmp_path / preset,
                   "--preset", preset, "--bcd-iters", 0) == 0
    m, s = seen
    assert (m.p, m.lam, m.lambda_h, m.lambda_m, m.rho) == (1.5, 0.01, 0.1, 0.1, 0.1)
    assert (s.p, s.lam) == (1.8, 0.002)
    assert m.bcd_iters == s.bcd_iters == 0


def test_fuse_with_denoiser_is_deterministic(pair_dir, tmp_path):
    flags = ["--bcd-iters", 1, "--epochs-initial", 3, "--epochs-finetune", 1, "--seed", 2]
    for name in ("a", "b"):
        assert run("fuse", "--input-dir", pair_dir, "--out-dir", tmp_path / name, *flags) == 0
    for f in ("Zh_hat.hsc", "Zm_hat.hsc", "objective_trace.log"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fuse_validates_before_writing(pair_dir, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    for f in ("Y_h.hsc", "manifest.json"):
        (bad / f).write_bytes((pair_dir / f).read_bytes())
    write_hsc(np.ones((4, 8, 8)), bad / "Y_m.hsc")
    assert run("fuse", "--input-dir", bad, "--out-dir", tmp_path / "out", "--bcd-iters", 0) == 5
    assert not (tmp_path / "out").exists()


def test_fuse_numerical_failure_exit_code(pair_dir, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FusionError("fusion failed at iteration 2: CG step 1: non-finite residual")

    monkeypatch.setattr(cli, "run_fusion", boom)
    assert run("fuse", "--input-dir", pair_dir, "--out-dir", tmp_path / "o") == 6


def test_bad_manifest_exit_code(pair_dir, tmp_path):
    (pair_dir / "manifest.json").write_text("{not json")
    assert run("fuse", "--input-dir", pair_dir, "--out-dir", tmp_path / "o") == 4


# -- eval ----------------------------------------------------------------------------------

def test_eval_identical_cubes(pair_dir, tmp_path, capsys):
    ref = pair_dir / "Z_h_true.hsc"
    assert run("eval", "--est", ref, "--ref", ref, "--output", tmp_path / "r.json") == 0
    rep = MetricReport.from_text(capsys.readouterr().out)
    assert (rep.psnr_db, rep.sam, rep.ergas) == (math.inf, 0.0, 0.0)
    assert rep.uiqi == pytest.approx(1.0, abs=1e-12)
    assert MetricReport.from_json((tmp_path / "r.json").read_text()) == rep


def test_eval_matches_library_bit_for_bit(pair_dir, tmp_path, capsys):
    est = pair_dir / "Z_m_true.hsc"
    ref = pair_dir / "Z_h_true.hsc"
    assert run("eval", "--est", est, "--ref", ref, "--output", tmp_path / "r.txt") == 0
    e, r = read_hsc(est).data, read_hsc(ref).data
    expect = MetricReport(psnr(e, r), sam(e, r), ergas(e, r, 16, 1), uiqi(e, r))
    assert MetricReport.from_text(capsys.readouterr().out) == expect
    assert MetricReport.from_text((tmp_path / "r.txt").read_text()) == expect
    assert run("eval", "--est", est, "--ref", ref, "--ratio", 4) == 0
    assert MetricReport.from_text(capsys.readouterr().out).ergas == ergas(e, r, 4, 1)


# -- denoise and render -----------------------------------------------------------------

def test_denoise_with_checkpoint_and_resume(tmp_path):
    cube = synthetic_scene(16, 16, 8, seed=0)
    noisy = cube.with_data(cube.data + 0.05 * np.random.default_rng(0).standard_normal(cube.shape))
    write_hsc(noisy, tmp_path / "n.hsc")
    assert run("denoise", "--input", tmp_path / "n.hsc", "--output", tmp_path / "d.hsc",
               "--epochs", 5, "--checkpoint", tmp_path / "m.ckpt") == 0
    out = read_hsc(tmp_path / "d.hsc")
    assert out.shape == cube.shape and np.all(np.isfinite(out.data))
    np.testing.assert_array_equal(out.wavelengths, noisy.wavelengths)
    assert run("denoise", "--input", tmp_path / "n.hsc", "--output", tmp_path / "e.hsc",
               "--epochs", 2, "--resume", tmp_path / "m.ckpt") == 0
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert run("denoise", "--input", tmp_path / "n.hsc", "--output", tmp_path / "f.hsc",
               "--resume", tmp_path / "junk.ckpt") == 4
    assert not (tmp_path / "f.hsc").exists()


@pytest.mark.filterwarnings("ignore:nearest band")
@pytest.mark.parametrize("mode", ["visible", "infrared"])
def test_render(pair_dir, tmp_path, mode):
    assert run("render", "--input", pair_dir / "Z_h_true.hsc", "--mode", mode,
               "--output", tmp_path / "c.png") == 0
    img = Image.open(tmp_path / "c.png")
    assert img.size == (16, 16) and img.mode == "RGB"


# -- error classes -----------------------------------------------------------------------

def test_exit_codes(pair_dir, tmp_path, capsys):
    ref = pair_dir / "Z_h_true.hsc"
    assert run("eval", "--est", tmp_path / "missing.hsc", "--ref", ref) == 3
    (tmp_path / "bad.hsc").write_bytes(b"HSC1 but not really")
    assert run("eval", "--est", tmp_path / "bad.hsc", "--ref", ref) == 4
    assert run("eval", "--est", pair_dir / "Y_h.hsc", "--ref", ref) == 5
    (tmp_path / "c.yaml").write_text("fusion:\n  nope: 1\n")
    assert run("--config", tmp_path / "c.yaml", "eval", "--est", ref, "--ref", ref) == 4
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("fuse", "--preset", "extreme", "--out-dir", tmp_path)
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--out-dir", tmp_path, "--snr", "nan")
    assert exc.value.code == 2


def test_help_documents_defaults(capsys):
    with pytest.raises(SystemExit):
        run("simulate", "--help")
    text = capsys.readouterr().out
    assert "default: 64" in text and "inf" in text


def test_sensor_round_trips_through_the_manifest():
    s = SensorModel.default(10, 3)
    back = cli.sensor_from_dict(json.loads(json.dumps(cli.sensor_to_dict(s))))
    np.testing.assert_array_equal(back.blur_kernel, s.blur_kernel)
    np.testing.assert_array_equal(back.srf, s.srf)
    assert (back.decim_factor, back.decim_offset) == (s.decim_factor, s.decim_offset)
