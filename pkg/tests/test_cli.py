import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from patchfusion.storage import read_latent, write_latent, RunManifest
from patchfusion.tensor import RngStream


def run_cli(*args, expect: int = 0, env: dict | None = None):
    proc = subprocess.run([sys.executable, "-m", "patchfusion.cli", "generate",
                           *args], capture_output=True, text=True,
                          env={**os.environ, **(env or {})})
    assert proc.returncode == expect, (proc.stdout, proc.stderr)
    return proc


def artifact_bytes(out: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if p.name != "manifest.json"}


class TestGenerate:
    def test_factor_four_artifacts_and_determinism(self, tmp_path):
        args = ["--factor", "4", "--backend", "mock-oracle", "--seed", "7",
                "--prompt", "a test prompt"]
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        proc = run_cli(*args, "--out", str(out_a))
        assert "phase 1:" in proc.stdout and "phase 2:" in proc.stdout

        previews = sorted(p.name for p in out_a.glob("phase_*.pflt"))
        assert previews == ["phase_1.pflt", "phase_2.pflt"]
        assert (out_a / "final.pflt").exists()
        assert (out_a / "final.png").exists()
        assert (out_a / "manifest.json").exists()

        run_cli(*args, "--out", str(out_b))
        assert artifact_bytes(out_a) == artifact_bytes(out_b)

        manifest = RunManifest.load(out_a / "manifest.json")
        other = RunManifest.load(out_b / "manifest.json")
        assert manifest.seed == 7
        assert manifest.config == {**other.config, "out": str(out_a)}

    def test_final_equals_last_phase(self, tmp_path):
        out = tmp_path / "o"
        run_cli("--factor", "4", "--backend", "mock-oracle", "--seed", "3",
                "--out", str(out))
        final = read_latent(out / "final.pflt")
        np.testing.assert_array_equal(final, read_latent(out / "phase_2.pflt"))
        assert final.shape == (4, 32, 32)

    def test_non_square_factor_exit_2(self, tmp_path):
        proc = run_cli("--factor", "3", "--backend", "mock-zero",
                       "--out", str(tmp_path / "x"), expect=2)
        assert "perfect square" in proc.stderr
        assert "--phases" in proc.stderr

    def test_phases_flag_directly(self, tmp_path):
        out = tmp_path / "p3"
        run_cli("--phases", "3", "--backend", "mock-zero", "--seed", "1",
                "--native-h", "8", "--native-w", "8", "--out", str(out))
        assert read_latent(out / "final.pflt").shape == (4, 24, 24)

    def test_backend_unreachable_exit_3(self, tmp_path):
        run_cli("--factor", "4", "--backend", "http://127.0.0.1:9",
                "--out", str(tmp_path / "x"), expect=3)

    def test_unknown_backend_exit_2(self, tmp_path):
        proc = run_cli("--factor", "4", "--backend", "mock-nonsense",
                       "--out", str(tmp_path / "x"), expect=2)
        assert "unknown backend" in proc.stderr

    def test_env_var_backend_default(self, tmp_path, stub_backend):
        out = tmp_path / "env"
        run_cli("--phases", "2", "--seed", "6", "--out", str(out),
                env={"PF_BACKEND_URL": stub_backend.url})
        # stub serves 2-channel 8x8 natives and an 8x decoder
        assert read_latent(out / "final.pflt").shape == (2, 16, 16)
        assert (out / "final.png").exists()

    def test_init_latent_roundtrip(self, tmp_path):
        z = RngStream(11).standard_normal((4, 16, 16))
        init_path = tmp_path / "init.pflt"
        write_latent(init_path, z)
        out = tmp_path / "o"
        run_cli("--phases", "1", "--backend", "mock-zero", "--seed", "4",
                "--init-latent", str(init_path), "--out", str(out))
        np.testing.assert_array_equal(read_latent(out / "final.pflt"), z)

    def test_init_image_encoded_via_backend(self, tmp_path, stub_backend):
        from patchfusion.storage import write_png
        from stub_server import stub_encode
        img = (np.arange(3 * 64 * 64) % 240).astype(np.uint8).reshape(3, 64, 64)
        img_path = tmp_path / "init.png"
        write_png(img_path, img)
        out = tmp_path / "o"
        run_cli("--phases", "1", "--backend", stub_backend.url, "--seed", "4",
                "--init-image", str(img_path), "--out", str(out))
        np.testing.assert_array_equal(read_latent(out / "final.pflt"),
                                      stub_encode(img))

    def test_init_image_rejected_for_mocks(self, tmp_path):
        proc = run_cli("--phases", "1", "--backend", "mock-zero",
                       "--init-image", str(tmp_path / "x.png"),
                       "--out", str(tmp_path / "o"), expect=2)
        assert "encode endpoint" in proc.stderr

    def test_ablation_flags_accepted(self, tmp_path):
        out = tmp_path / "abl"
        proc = run_cli("--factor", "9", "--backend", "mock-oracle", "--seed", "2",
                       "--no-skip-residual", "--no-dilated", "--no-progressive",
                       "--batch-size", "4", "--out", str(out))
        # progressive off: phases 1 and 3 only
        names = sorted(p.name for p in out.glob("phase_*.pflt"))
        assert names == ["phase_1.pflt", "phase_3.pflt"]
        assert "phase 3:" in proc.stdout

    def test_all_features_off_matches_reference_loop(self, tmp_path):
        # with every fusion feature disabled the run must equal the
        # straight-line overlapped-crop loop, byte for byte
        out = tmp_path / "xxx"
        run_cli("--factor", "9", "--backend", "mock-oracle", "--seed", "13",
                "--no-skip-residual", "--no-dilated", "--no-progressive",
                "--batch-size", "4", "--out", str(out))

        from patchfusion.cli import DEFAULTS, build_backend, build_pipeline_config
        from reference_multidiffusion import run_reference
        settings = {**DEFAULTS, "factor": "9", "seed": "13",
                    "backend": "mock-oracle", "skip_residual": "false",
                    "dilated": "false", "progressive": "false",
                    "batch_size": "4"}
        backend = build_backend(settings, build_pipeline_config(settings))
        ref_base, ref_final = run_reference(13, backend, S=3)
        assert read_latent(out / "phase_1.pflt").tobytes() == ref_base.tobytes()
        assert read_latent(out / "final.pflt").tobytes() == ref_final.tobytes()

    def test_pipeline_abort_exit_4_preserves_partials(self, tmp_path,
                                                      stub_backend):
        # discovery works but every denoise call fails: phase 1 aborts
        out = tmp_path / "broken"
        proc = run_cli("--factor", "4", "--seed", "5",
                       "--backend", stub_backend.url + "/broken",
                       "--out", str(out), expect=4)
        assert "pipeline aborted" in proc.stderr
        assert "preserved" in proc.stderr

    def test_bad_start_t_exit_2(self, tmp_path):
        proc = run_cli("--factor", "4", "--backend", "mock-zero",
                       "--start-t", "5", "--out", str(tmp_path / "x"),
                       expect=2)
        assert "start_t" in proc.stderr


class TestConfigHandling:
    def test_show_config_defaults(self, tmp_path):
        proc = run_cli("--show-config")
        lines = dict(line.split(" = ", 1) for line in
                     proc.stdout.strip().splitlines())
        assert lines["guidance"] == "7.5"
        assert lines["steps"] == "50"
        assert lines["alpha1"] == "3.0"
        assert lines["alpha2"] == "1.0"
        assert lines["alpha3"] == "1.0"
        assert lines["sigma1"] == "1.0"
        assert lines["sigma2"] == "0.01"
        assert lines["stride"] == "auto"
        assert lines["t_train"] == "1000"

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 5\nsteps = 10\nguidance = 2.0  # comment\n")
        proc = run_cli("--config", str(cfg), "--guidance", "4.0",
                       "--show-config")
        lines = dict(line.split(" = ", 1) for line in
                     proc.stdout.strip().splitlines())
        assert lines["seed"] == "5"          # from file
        assert lines["steps"] == "10"        # from file
        assert lines["guidance"] == "4.0"    # flag wins

    def test_bad_config_key_exit_2(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("nonsense = 1\n")
        proc = run_cli("--config", str(cfg), "--show-config", expect=2)
        assert "unknown setting" in proc.stderr

    def test_show_config_roundtrips_as_config_file(self, tmp_path):
        proc = run_cli("--seed", "123", "--steps", "12", "--show-config")
        cfg = tmp_path / "echo.cfg"
        cfg.write_text(proc.stdout)
        again = run_cli("--config", str(cfg), "--show-config")
        assert again.stdout == proc.stdout

    def test_reproduction_from_manifest_config(self, tmp_path):
        out_a = tmp_path / "a"
        run_cli("--factor", "4", "--backend", "mock-oracle", "--seed", "9",
                "--steps", "25", "--out", str(out_a))
        manifest = RunManifest.load(out_a / "manifest.json")
        cfg = tmp_path / "repro.cfg"
        cfg.write_text("".join(f"{k} = {v}\n"
                               for k, v in manifest.config.items() if v))
        out_b = tmp_path / "b"
        run_cli("--config", str(cfg), "--out", str(out_b))
        assert artifact_bytes(out_a) == artifact_bytes(out_b)
