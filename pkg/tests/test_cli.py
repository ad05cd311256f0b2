import json
from pathlib import Path

import numpy as np
import pytest

from ctxshare.cli import main
from ctxshare.imageio import read_image
from ctxshare.numerics import fnv1a64

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"


def _write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _small_run_doc(image_dir, **kw):
    doc = {
        "model": {"L": 4, "d": 16, "H": 2, "n_I": 16, "n_P": 4, "rcm_gate_layer": 2, "seed": 0},
        "steps": 2,
        "prompt": "a car of sand",
        "references": [
            {"image": str(image_dir / "stripes.pgm"), "prompt": "stripes"},
            {"image": str(image_dir / "checker.ppm"), "prompt": "checker"},
        ],
        "seed": 0,
    }
    doc.update(kw)
    return doc


class TestGenerate:
    def test_shipped_example_config(self, tmp_path):
        out = tmp_path / "run"
        assert main(["generate", "--config", str(CONFIGS / "generate.json"), "--out", str(out)]) == 0
        for name in ("final_latent.csv", "metrics.json", "manifest.json"):
            assert (out / name).exists()
        latent = np.loadtxt(out / "final_latent.csv", delimiter=",")
        assert latent.shape == (64, 64)
        assert np.isfinite(latent).all()

    def test_manifest_checksums_accurate(self, tmp_path, image_dir):
        cfg = _write(tmp_path, "c.json", _small_run_doc(image_dir))
        out = tmp_path / "o"
        assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["files"], "manifest lists no files"
        for entry in manifest["files"]:
            data = (out / entry["path"]).read_bytes()
            assert f"{fnv1a64(data):016x}" == entry["fnv1a64"]
            assert len(data) == entry["bytes"]

    def test_trace_flag_emits_dumps(self, tmp_path, image_dir):
        cfg = _write(tmp_path, "c.json", _small_run_doc(image_dir))
        out = tmp_path / "o"
        rc = main(["generate", "--config", cfg, "--out", str(out), "--trace", "tokens,masks,saliency"])
        assert rc == 0
        names = {p.name for p in out.iterdir()}
        assert "tokens_out_prompt_t2_l0.csv" in names
        assert "saliency_rcm_t2_l3_ref1.csv" in names
        assert "mask_rcm_2_3_1.pgm" in names
        assert "mask_wta_2_3_0.pgm" in names

    def test_seed_override_changes_output(self, tmp_path, image_dir):
        cfg = _write(tmp_path, "c.json", _small_run_doc(image_dir))
        out0, out1 = tmp_path / "s0", tmp_path / "s1"
        assert main(["generate", "--config", cfg, "--out", str(out0)]) == 0
        assert main(["generate", "--config", cfg, "--out", str(out1), "--seed", "9"]) == 0
        a = (out0 / "final_latent.csv").read_bytes()
        b = (out1 / "final_latent.csv").read_bytes()
        assert a != b


class TestDeterminism:
    @pytest.mark.parametrize("command,config", [
        ("generate", "generate.json"),
        ("cost", "cost.json"),
        ("replace", "replace.json"),
    ])
    def test_identical_manifests_across_invocations(self, tmp_path, command, config):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            rc = main([command, "--config", str(CONFIGS / config), "--out", str(out)])
            assert rc == 0
            outs.append((out / "manifest.json").read_bytes())
        assert outs[0] == outs[1]


class TestCost:
    def test_share_factors(self, tmp_path):
        cfg = _write(tmp_path, "c.json", {"r_values": [1, 2, 4], "n_I": 4096, "n_P": 333})
        out = tmp_path / "o"
        assert main(["cost", "--config", cfg, "--out", str(out)]) == 0
        report = json.loads((out / "cost_report.json").read_text())
        assert [r["share_factor"] for r in report["reports"]] == [1.0, 3.0, 7.0]

    def test_runs_without_config(self, tmp_path):
        out = tmp_path / "o"
        assert main(["cost", "--out", str(out)]) == 0
        assert (out / "cost_report.json").exists()


class TestSelftest:
    def test_passes_and_writes_report(self, tmp_path):
        out = tmp_path / "o"
        assert main(["selftest", "--out", str(out)]) == 0
        report = json.loads((out / "selftest.json").read_text())
        assert all(c["passed"] for c in report["checks"])


class TestAnalysisCommands:
    def test_cluster(self, tmp_path, image_dir):
        doc = {
            "model": {"L": 4, "d": 16, "H": 2, "n_I": 16, "n_P": 4, "rcm_gate_layer": 2, "seed": 0},
            "prompt_count": 6,
            "images": [str(image_dir / "stripes.pgm"), str(image_dir / "checker.ppm")],
            "layers": [0, 3],
            "timesteps": [2],
            "steps": 4,
        }
        out = tmp_path / "o"
        assert main(["cluster", "--config", _write(tmp_path, "c.json", doc), "--out", str(out)]) == 0
        report = json.loads((out / "cluster_report.json").read_text())
        by_layer = {row["layer"]: row["separation"] for row in report["scores"]}
        assert by_layer[0] == 0.0
        assert by_layer[3] > 0.0
        assert (out / "separation_scores.csv").exists()

    def test_replace(self, tmp_path):
        doc = {
            "model": {"L": 4, "d": 16, "H": 2, "n_I": 16, "n_P": 4, "rcm_gate_layer": 2, "seed": 0},
            "prompt": "a princess in the dress",
            "seed_a": 1,
            "seed_b": 2,
            "steps": 2,
        }
        out = tmp_path / "o"
        assert main(["replace", "--config", _write(tmp_path, "c.json", doc), "--out", str(out)]) == 0
        report = json.loads((out / "replacement_report.json").read_text())
        assert report["d_aa_prime"] == 0.0
        assert report["d_aprime_a"] > 1e-6

    def test_variance(self, tmp_path, image_dir):
        doc = _small_run_doc(image_dir, r_values=[1, 2], probe_layer=3)
        out = tmp_path / "o"
        assert main(["variance", "--config", _write(tmp_path, "c.json", doc), "--out", str(out)]) == 0
        report = json.loads((out / "variance_report.json").read_text())
        assert [e["R"] for e in report["entries"]] == [1, 2]

    def test_dump_masks(self, tmp_path, image_dir):
        doc = _small_run_doc(image_dir, steps=1)
        out = tmp_path / "o"
        assert main(["dump-masks", "--config", _write(tmp_path, "c.json", doc), "--out", str(out)]) == 0
        mask = read_image(out / "mask_rcm_1_3_1.pgm")[:, :, 0]
        assert mask.shape == (20, 20)  # n_I + n_P square
        assert set(np.unique(mask)) <= {0, 255}
        wta = read_image(out / "mask_wta_1_3_0.pgm")[:, :, 0]
        assert wta.shape == (20, 28)  # queries x (n_I + n_P + R*n_P)


class TestErrorHandling:
    def test_unknown_config_key_exits_1(self, tmp_path, capsys):
        cfg = _write(tmp_path, "c.json", {"unknown_knob": 1})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        assert "config error" in capsys.readouterr().err

    def test_invalid_json_exits_1(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1

    def test_existing_out_dir_needs_force(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        cfg = _write(tmp_path, "c.json", {"r_values": [1], "n_I": 64, "n_P": 16})
        assert main(["cost", "--config", cfg, "--out", str(out)]) == 1
        assert main(["cost", "--config", cfg, "--out", str(out), "--force"]) == 0

    def test_missing_config_flag_exits_1(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path / "o")]) == 1

    def test_missing_reference_image_exits_2(self, tmp_path, capsys):
        doc = {"references": [{"image": str(tmp_path / "nope.pgm")}]}
        cfg = _write(tmp_path, "c.json", doc)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "runtime error" in capsys.readouterr().err

    def test_bad_trace_flag_exits_1(self, tmp_path, image_dir):
        cfg = _write(tmp_path, "c.json", _small_run_doc(image_dir))
        rc = main(["generate", "--config", cfg, "--out", str(tmp_path / "o"), "--trace", "everything"])
        assert rc == 1

    def test_unknown_command_rejected(self):
        with pytest.raises(SystemExit):
            main(["upscale", "--out", "x"])
