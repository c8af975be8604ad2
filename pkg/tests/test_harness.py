import csv
import io

import numpy as np
import pytest

from dvamp.amp import amp_run
from dvamp.errors import DimensionError, PGMFormatError
from dvamp.harness import (SWEEP_COLUMNS, TRACE_COLUMNS, ExperimentConfig, _sub_seed,
                           bundled_image_paths, downsample, load_images, load_pgm,
                           measurement_operator, recover, run_sweep, run_trace, run_trial,
                           save_pgm, synthesize_measurements)
from dvamp.denoise import Masked, make_denoiser
from dvamp.oplib import WaveletTransform, compose_measurement, make_structured_operator
from dvamp.result import PSNR_CAP, capped, psnr


class TestPGM:
    def test_round_trip_bytes(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (16, 16))
        save_pgm(img, tmp_path / "a.pgm")
        back = load_pgm(tmp_path / "a.pgm")
        np.testing.assert_array_equal(back, img)
        save_pgm(back, tmp_path / "b.pgm")
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_three_by_three(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5\n3 3\n255\n" + bytes([128] * 9))
        img = load_pgm(tmp_path / "g.pgm")
        assert img.shape == (3, 3) and np.all(img == 128.0)

    def test_header_comments(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 2\n255\n\x00\x01\x02\x03")
        np.testing.assert_array_equal(load_pgm(tmp_path / "c.pgm"), [[0, 1], [2, 3]])

    @pytest.mark.parametrize("blob", [b"P2\n3 3\n255\n" + b"1 " * 9, b"P5\n3 x\n255\n",
                                      b"P5\n2 2\n65535\n" + bytes(8), b"P5\n2 2\n255\n\x00",
                                      b"GIF89a"])
    def test_rejects(self, tmp_path, blob):
        (tmp_path / "bad.pgm").write_bytes(blob)
        with pytest.raises(PGMFormatError):
            load_pgm(tmp_path / "bad.pgm")

    def test_recovery_needs_power_of_two(self, tmp_path):
        save_pgm(np.zeros((12, 12)), tmp_path / "x.pgm")
        load_pgm(tmp_path / "x.pgm")
        with pytest.raises(PGMFormatError):
            load_pgm(tmp_path / "x.pgm", require_pow2=True)

    def test_bundled_images(self):
        imgs = load_images()
        assert len(imgs) == 6 == len(bundled_image_paths())
        assert all(img.shape == (128, 128) for _, img in imgs)

    def test_directory_expansion(self, tmp_path):
        for name in ("b", "a"):
            save_pgm(np.full((8, 8), 9), tmp_path / f"{name}.pgm")
        assert [n for n, _ in load_images([tmp_path])] == ["a", "b"]

    def test_downsample_block_mean(self):
        img = np.arange(16.0).reshape(4, 4)
        np.testing.assert_allclose(downsample(img, 2), [[2.5, 4.5], [10.5, 12.5]])


class TestPSNR:
    def test_identical(self):
        x = np.ones((4, 4))
        assert psnr(x, x) == float("inf")
        assert capped(psnr(x, x)) == PSNR_CAP

    def test_unit_error(self):
        x = np.random.default_rng(0).uniform(0, 255, (8, 8))
        assert psnr(x + 1, x) == pytest.approx(48.1308, abs=1e-4)

    def test_full_scale_error(self):
        x = np.zeros((8, 8))
        assert psnr(x + 255, x) == pytest.approx(0.0, abs=1e-12)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.ones(4), np.ones(5))


class TestSynthesis:
    def setup_method(self):
        self.phi = make_structured_operator(8192, 16384, 10.0, 1)
        self.x0 = load_images()[0][1].ravel()

    def test_noiseless(self):
        y, var = synthesize_measurements(self.phi, self.x0, None, seed=3)
        assert var == 0.0
        np.testing.assert_array_equal(y, self.phi.forward(self.x0))

    def test_zero_db_energy(self):
        clean = self.phi.forward(self.x0)
        ratios = [np.sum((synthesize_measurements(self.phi, self.x0, 0.0, seed=s)[0] - clean) ** 2)
                  / np.sum(clean ** 2) for s in range(100)]
        assert abs(np.mean(ratios) - 1.0) <= 0.1

    def test_32_db(self):
        clean = self.phi.forward(self.x0)
        for s in range(100):
            y, var = synthesize_measurements(self.phi, self.x0, 32.0, seed=s)
            snr = 10 * np.log10(np.sum(clean ** 2) / np.sum((y - clean) ** 2))
            assert abs(snr - 32.0) <= 0.5, s
            assert var == pytest.approx(np.sum(clean ** 2) * 10 ** -3.2 / 8192)

    def test_deterministic(self):
        a, _ = synthesize_measurements(self.phi, self.x0, 20.0, seed=5)
        b, _ = synthesize_measurements(self.phi, self.x0, 20.0, seed=5)
        assert np.array_equal(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            synthesize_measurements(self.phi, np.ones(10))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"algorithm": "ista"}, {"ensemble": "fourier"},
                                    {"ratio": 0.0}, {"ratio": 1.5}, {"trials": 0},
                                    {"iters": 0}, {"cond": 0.5}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_digest(self):
        a = ExperimentConfig()
        assert a.digest() == ExperimentConfig().digest()
        assert a.digest() != ExperimentConfig(cond=10.0).digest()

    def test_default_denoisers(self):
        assert ExperimentConfig(algorithm="l1-amp").denoiser_spec().kind == "soft-threshold"
        spec = ExperimentConfig(algorithm="d-vamp").denoiser_spec()
        assert (spec.kind, spec.rule, spec.multiplier) == ("ti-wavelet", "soft", 1.5)
        assert ExperimentConfig(denoiser="ti-wavelet:shifts=2").denoiser_spec().shifts == 2

    def test_vamp_damping(self):
        assert ExperimentConfig(cond=1e4).vamp_config(0.0).damping == 0.85
        assert ExperimentConfig(cond=10.0).vamp_config(0.0).damping == 1.0
        assert ExperimentConfig(cond=1e4, damping=1.0).vamp_config(0.0).damping == 1.0

    def test_oracle_noise_precision(self):
        cfg = ExperimentConfig(auto_tune=False).vamp_config(0.25)
        assert not cfg.auto_tune_noise and cfg.gamma_w_init == 4.0
        assert ExperimentConfig(auto_tune=False).vamp_config(0.0).gamma_w_init == 1e11


def small(**kw):
    base = dict(algorithm="l1-vamp", ensemble="structured", ratio=0.25, cond=10.0,
                snr_db=30.0, iters=3, side=16, timing=False)
    base.update(kw)
    return ExperimentConfig(**base)


class TestSweep:
    def test_single_row_schema(self):
        text = run_sweep([small()], workers=1)
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == SWEEP_COLUMNS
        assert len(rows) == 2
        row = dict(zip(rows[0], rows[1]))
        assert row["algorithm"] == "l1-vamp" and row["snr_db"] == "30"
        assert row["diverged_count"] == "0" and row["mean_runtime_s"] == ""

    def test_runtime_column_when_timed(self):
        row = next(csv.DictReader(io.StringIO(run_sweep([small(timing=True)], workers=1))))
        assert float(row["mean_runtime_s"]) > 0

    def test_noiseless_field(self):
        row = next(csv.DictReader(io.StringIO(run_sweep([small(snr_db=None)], workers=1))))
        assert row["snr_db"] == "inf"

    def test_writes_file(self, tmp_path):
        text = run_sweep([small()], out=tmp_path / "s.csv", workers=1)
        assert (tmp_path / "s.csv").read_text() == text

    def test_partial_flush(self, tmp_path):
        bad = small(images=(str(tmp_path / "missing.pgm"),))
        with pytest.raises(OSError):
            run_sweep([small(), bad], out=tmp_path / "p.csv", workers=1)
        rows = list(csv.reader((tmp_path / "p.csv").open()))
        assert len(rows) == 2 and rows[1][0] == "l1-vamp"

    def test_worker_count_does_not_change_bytes(self):
        cells = [small(algorithm=a, trials=2) for a in ("l1-amp", "l1-vamp", "d-vamp")]
        assert run_sweep(cells, workers=1) == run_sweep(cells, workers=2)

    def test_divergence_counted(self):
        cfg = small(algorithm="l1-amp", cond=1e4, ratio=0.1, side=None, iters=10,
                    images=(bundled_image_paths()[0],))
        row = next(csv.DictReader(io.StringIO(run_sweep([cfg], workers=1))))
        assert row["diverged_count"] == "1"


class TestTrace:
    def test_length_and_schema(self):
        text = run_trace(small(iters=4), ratios=[0.25, 0.5], workers=1)
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == TRACE_COLUMNS
        assert len(rows) == 1 + 2 * 5
        assert [r[5] for r in rows[1:6]] == ["0", "1", "2", "3", "4"]

    def test_repeatable(self, tmp_path):
        cfg = small(algorithm="d-vamp")
        a = run_trace(cfg, ratios=[0.25], out=tmp_path / "t.csv", workers=1)
        assert a == run_trace(cfg, ratios=[0.25], workers=2)
        assert (tmp_path / "t.csv").read_text() == a

    def test_diverged_series_padded(self):
        cfg = small(algorithm="l1-amp", cond=1e4, ratio=0.1, side=None, iters=10,
                    images=(bundled_image_paths()[0],))
        rows = list(csv.DictReader(io.StringIO(run_trace(cfg, workers=1))))
        assert len(rows) == 11
        assert rows[-1]["mean_psnr_db"] == rows[-2]["mean_psnr_db"]

    @pytest.mark.slow
    def test_dvamp_monotone_after_third_iteration(self):
        images = load_images(side=64)
        for seed in range(10):
            for i, (name, img) in enumerate(images):
                cfg = ExperimentConfig(algorithm="d-vamp", ensemble="gaussian", ratio=0.3,
                                       side=64, iters=30, base_seed=seed)
                series = run_trial(cfg, img, image_index=i).psnr_series
                assert np.all(np.diff(series[3:]) >= 0), (seed, name)


class TestRecovery:
    def test_indirect_path_matches_wavelet_domain_run(self):
        cfg = small(algorithm="l1-amp", cond=1.0, iters=5, side=None)
        _, img = load_images(side=16)[2]
        res = run_trial(cfg, img)

        # redo by hand: recover wavelet coefficients, then inverse-transform
        x0 = img.ravel()
        phi = measurement_operator(cfg, x0.size, cfg.base_seed)
        y, _ = synthesize_measurements(phi, x0, cfg.snr_db, seed=_sub_seed(0, 1, 0))
        psi = WaveletTransform(16)
        den = Masked(make_denoiser(cfg.denoiser_spec()), psi.detail_mask())
        v = amp_run(compose_measurement(phi, psi), y, den, cfg.iters,
                    seed=_sub_seed(0, 2, 0)).estimate
        assert psi.inverse(v).tobytes() == res.estimate.tobytes()

    def test_recover_writes_pgm(self, tmp_path):
        cfg = small(algorithm="d-vamp", side=32)
        res = recover(cfg, bundled_image_paths()[1], out=tmp_path / "r.pgm")
        out = load_pgm(tmp_path / "r.pgm")
        assert out.shape == (32, 32)
        np.testing.assert_array_equal(out, np.clip(np.round(res.estimate.reshape(32, 32)), 0, 255))

    def test_trial_metadata(self):
        cfg = small(base_seed=7)
        res = run_trial(cfg, load_images(side=16)[0][1], trial=2)
        assert res.seed == 9 and res.config_digest == cfg.digest()
        assert len(res.psnr_series) == cfg.iters + 1
