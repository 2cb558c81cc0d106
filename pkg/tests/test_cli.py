"""End-to-end runs of the command-line workflows through `main`."""

import json

import numpy as np
import pytest
from PIL import Image

from spygr.core.errors import ConfigError
from spygr.core.layer import SimilarityFactors
from spygr.core.serialization import save_tensor
from spygr.core.tensor import Tensor
from spygr.harness.model import AblationRow, AblationSpec, SegModelConfig, init_model, save_model
from spygr.run import build_parser, flag_overrides, main
from spygr.stage_heatmap import heatmap_from_factors, normalize_row
from spygr.stage_verify import dense_laplacian
from spygr.utils.stage_base import MANIFEST_FILENAME


def read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_config(tmp_path, name: str, values: dict) -> str:
    path = tmp_path / name
    path.write_text(json.dumps(values), encoding="utf-8")
    return str(path)


class TestArguments:
    def test_aliases_rename_flags(self):
        args = build_parser().parse_args(["train", "--iters", "5", "--m", "3", "--seed", "2"])
        overrides = flag_overrides(args, {"iters": "total_iters", "m": "embed_dim"})
        assert overrides == {"total_iters": 5, "embed_dim": 3, "seed": 2}

    def test_unknown_flag_is_argparse_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["verify", "--pixel", "1,1"])
        assert excinfo.value.code == 2

    def test_flag_not_accepted_by_subcommand(self, tmp_path):
        assert main(["verify", "--shape", "1,2,3,4", "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, tmp_path):
        config = write_config(tmp_path, "bad.json", {"cases": 2, "bogus": 1})
        assert main(["verify", "--config", config, "--out", str(tmp_path / "out")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["verify", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2


class TestVerify:
    def test_passes_and_is_byte_deterministic(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["verify", "--cases", "2", "--out", str(first)]) == 0
        assert main(["verify", "--cases", "2", "--out", str(second)]) == 0
        for name in ("verify_report.json", MANIFEST_FILENAME):
            assert read_bytes(first / name) == read_bytes(second / name)
        report = read_json(first / "verify_report.json")
        assert report["passed"]
        assert report["suites"]["oracle"]["cases"] == 2

    def test_skip_epsilon_fails_zero_degree(self, tmp_path):
        assert main(["verify", "--cases", "1", "--skip-epsilon", "--out", str(tmp_path)]) == 1
        report = read_json(tmp_path / "verify_report.json")
        assert not report["passed"]
        manifest = read_json(tmp_path / MANIFEST_FILENAME)
        assert manifest["config"]["skip_epsilon"] is True


class TestVerifyMath:
    def test_dense_laplacian_uses_its_own_row_sums(self, rng):
        phi = np.abs(rng.standard_normal((6, 2))) + 0.1
        stale = SimilarityFactors(Tensor(phi), Tensor(np.ones(2)), Tensor(np.ones(6)), 0.0, 2, 3, False)
        lap = dense_laplacian(stale)
        v = np.sqrt(phi @ phi.sum(axis=0))
        np.testing.assert_allclose(lap @ v, 0.0, atol=1e-12)
        np.testing.assert_allclose(lap, lap.T, atol=1e-14)


class TestBench:
    def test_small_shape_with_timing(self, tmp_path):
        args = ["bench", "--shape", "1,4,8,8", "--m", "2", "--levels", "3", "--out", str(tmp_path)]
        assert main(args) == 0
        report = read_json(tmp_path / "bench_report.json")
        assert report["shape"] == [1, 4, 8, 8]
        assert set(report["reports"]) == {"single_scale", "pyramid"}
        assert report["reports"]["pyramid"]["flops"] > report["reports"]["single_scale"]["flops"]
        pyramid = report["reports"]["pyramid"]
        assert pyramid["total_macs"] == pyramid["flops"] + pyramid["resample_flops"]
        assert report["reports"]["single_scale"]["resample_flops"] == 0
        timing = read_json(tmp_path / "bench_timing.json")
        assert timing["requested"]["n"] == 64
        assert timing["requested"]["naive_seconds"] >= 0.0
        assert "total" in (tmp_path / "bench_table.txt").read_text(encoding="utf-8")

    def test_report_is_deterministic(self, tmp_path):
        config = write_config(tmp_path, "bench.json", {"timing": False})
        for out in ("a", "b"):
            assert main(["bench", "--config", config, "--shape", "1,8,16,16", "--m", "4",
                         "--out", str(tmp_path / out)]) == 0
        assert read_bytes(tmp_path / "a" / "bench_report.json") == read_bytes(tmp_path / "b" / "bench_report.json")
        assert not (tmp_path / "a" / "bench_timing.json").exists()

    def test_dense_path_refused_above_cap(self, tmp_path):
        config = write_config(tmp_path, "bench.json", {"repeats": 1})
        args = ["bench", "--config", config, "--shape", "1,4,8,8", "--m", "2", "--levels", "2",
                "--oracle-cap", "16", "--out", str(tmp_path / "out")]
        assert main(args) == 0
        timing = read_json(tmp_path / "out" / "bench_timing.json")
        assert "naive_refused" in timing["requested"]
        assert "naive_seconds" not in timing["requested"]
        assert timing["reference"]["n"] == 16

    def test_too_many_levels(self, tmp_path):
        assert main(["bench", "--shape", "1,4,8,8", "--levels", "9", "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_tiny_run_writes_artifacts(self, tmp_path):
        config = write_config(tmp_path, "train.json", {
            "height": 32, "width": 32, "batch": 2, "test_samples": 2, "widths": [4, 4, 4, 4],
            "reduce_channels": 4, "embed_dim": 2, "log_every": 0,
        })
        out = tmp_path / "out"
        args = ["train", "--config", config, "--iters", "2", "--samples", "4", "--levels", "2",
                "--out", str(out)]
        assert main(args) == 0
        for name in ("trace.csv", "train_report.json", MANIFEST_FILENAME, "model/model.json"):
            assert (out / name).exists(), name
        lines = (out / "trace.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "iter,lr,loss,aux_loss,miou"
        assert len(lines) == 3
        manifest = read_json(out / MANIFEST_FILENAME)
        assert manifest["config"]["total_iters"] == 2
        assert manifest["config"]["pyramid_levels"] == 2

        again = tmp_path / "again"
        assert main(args[:-1] + [str(again)]) == 0
        for name in ("trace.csv", "train_report.json"):
            assert read_bytes(out / name) == read_bytes(again / name)

    def test_unknown_row(self, tmp_path):
        assert main(["train", "--ablation", "transformer", "--out", str(tmp_path)]) == 2


class TestAblate:
    TINY = {"height": 32, "width": 32, "batch": 2, "test_samples": 1, "widths": [4, 4, 4, 4],
            "reduce_channels": 4, "embed_dim": 2, "log_every": 0}

    def test_two_rows_three_seeds(self, tmp_path):
        config = write_config(tmp_path, "ablate.json", self.TINY)
        out = tmp_path / "out"
        args = ["ablate", "--config", config, "--ablation", "fcn,gcn", "--iters", "1", "--samples", "2",
                "--seed", "7", "--out", str(out)]
        assert main(args) == 0
        report = read_json(out / "ablation_report.json")
        assert report["seeds"] == [7, 8, 9]
        assert [row["row"] for row in report["table"]["rows"]] == ["fcn", "gcn"]
        assert report["table"]["gap_report"]["baseline"] == "fcn"
        table = (out / "ablation_table.md").read_text(encoding="utf-8")
        assert table.startswith("| row | mIoU mean |")

    def test_repeated_row(self, tmp_path):
        config = write_config(tmp_path, "ablate.json", self.TINY)
        assert main(["ablate", "--config", config, "--ablation", "fcn,pyramid,fcn",
                     "--out", str(tmp_path / "out")]) == 2

    def test_too_few_seeds(self, tmp_path):
        config = write_config(tmp_path, "ablate.json", dict(self.TINY, num_seeds=2))
        assert main(["ablate", "--config", config, "--out", str(tmp_path / "out")]) == 2


class TestHeatmap:
    def test_constant_input_is_flat(self, tmp_path):
        image = save_tensor(str(tmp_path / "flat.spgt"), Tensor.full((1, 4, 16, 16), 0.7))
        out = tmp_path / "out"
        args = ["heatmap", "--shape", "1,4,16,16", "--m", "3", "--levels", "2", "--image", image,
                "--out", str(out)]
        assert main(args) == 0
        for level in range(2):
            pixels = np.array(Image.open(out / f"level_{level}.pgm"))
            assert pixels.shape == (16, 16)
            assert not pixels.any()
            sidecar = read_json(out / f"level_{level}.json")
            assert sidecar["min"] == pytest.approx(sidecar["max"], rel=1e-12)

    def test_identical_bytes_across_runs(self, tmp_path):
        for out in ("a", "b"):
            args = ["heatmap", "--shape", "1,4,16,16", "--m", "3", "--levels", "3",
                    "--pixel", "5,9", "--out", str(tmp_path / out)]
            assert main(args) == 0
        for level in range(3):
            name = f"level_{level}.pgm"
            assert read_bytes(tmp_path / "a" / name) == read_bytes(tmp_path / "b" / name)
        report = read_json(tmp_path / "a" / "heatmap_report.json")
        assert [lv["pixel"] for lv in report["levels"]] == [[5, 9], [2, 4], [1, 2]]
        assert [lv["grid"] for lv in report["levels"]] == [[16, 16], [8, 8], [4, 4]]

    def test_pixel_out_of_range(self, tmp_path):
        assert main(["heatmap", "--pixel", "99,0", "--out", str(tmp_path)]) == 2

    def test_trained_model_directory(self, tmp_path):
        config = SegModelConfig(widths=(4, 4, 4, 4), reduce_channels=4, embed_dim=2,
                                ablation=AblationSpec(AblationRow.PYRAMID, 2))
        save_model(init_model(config, seed=0), str(tmp_path / "model"))
        out = tmp_path / "out"
        args = ["heatmap", "--params", str(tmp_path / "model"), "--shape", "1,3,32,32",
                "--pixel", "8,24", "--out", str(out)]
        assert main(args) == 0
        report = read_json(out / "heatmap_report.json")
        assert report["input_grid"] == [8, 8]
        assert report["output_size"] == [32, 32]
        assert report["levels"][0]["pixel"] == [2, 6]
        assert np.array(Image.open(out / "level_1.pgm")).shape == (32, 32)

    def test_fcn_model_has_nothing_to_show(self, tmp_path):
        config = SegModelConfig(widths=(4, 4, 4, 4), reduce_channels=4, embed_dim=2,
                                ablation=AblationSpec(AblationRow.FCN, 2))
        save_model(init_model(config, seed=0), str(tmp_path / "model"))
        assert main(["heatmap", "--params", str(tmp_path / "model"), "--out", str(tmp_path / "out")]) == 2


class TestHeatmapMath:
    def test_queried_pixel_is_brightest(self, rng):
        phi = np.abs(rng.standard_normal((20, 4))) + 0.01
        phi /= np.linalg.norm(phi, axis=1, keepdims=True)
        factors = SimilarityFactors(
            phi=Tensor(phi),
            lam=Tensor(np.ones(4)),
            degrees=Tensor(phi @ phi.sum(axis=0)),
            epsilon=0.0,
            height=4,
            width=5,
            weighted=False,
        )
        raw, norm = heatmap_from_factors(factors, 2, 3)
        assert raw.shape == (4, 5)
        assert np.unravel_index(np.argmax(raw), raw.shape) == (2, 3)
        assert raw[2, 3] == pytest.approx(1.0)
        assert norm[2, 3] == 1.0
        assert norm.min() == 0.0

    def test_flat_row_maps_to_zeros(self):
        np.testing.assert_array_equal(normalize_row(np.full(6, 3.25)), np.zeros(6))

    def test_pixel_outside_grid(self, rng):
        phi = np.abs(rng.standard_normal((6, 2)))
        factors = SimilarityFactors(Tensor(phi), Tensor(np.ones(2)), Tensor(phi @ phi.sum(axis=0)),
                                    0.0, 2, 3, False)
        with pytest.raises(ConfigError):
            heatmap_from_factors(factors, 2, 0)
