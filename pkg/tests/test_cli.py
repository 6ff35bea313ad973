import json

import numpy as np
import pytest

from patchood import textenc
from patchood.cli import main

BASE_CONFIG = {
    "schema_version": 1,
    "fixture": {
        "n_classes": 4, "d": 16, "d_k": 8, "n_patches": 8,
        "images_per_class": 4, "test_images_per_class": 2,
        "ood_images": 12, "ood_classes": 2, "seed": 7,
    },
    "train": {"tau": 0.5, "steps": 5, "batch_size": 4, "seed": 1},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(BASE_CONFIG))
    return str(path)


@pytest.fixture
def fixture_dir(tmp_path, config_path):
    out = tmp_path / "fixture"
    assert main(["fixture", "--config", config_path, "--out", str(out)]) == 0
    return out


class TestFixtureCommand:
    def test_writes_splits_and_manifest(self, fixture_dir):
        for name in ("train.fobo", "id_test.fobo", "ood_test.fobo", "manifest.json"):
            assert (fixture_dir / name).exists()
        manifest = json.loads((fixture_dir / "manifest.json").read_text())
        assert manifest["splits"]["train"]["records"] == 16
        assert manifest["config"]["fixture"]["n_classes"] == 4
        # defaults are filled in and echoed back
        assert "noise_sigma" in manifest["config"]["fixture"]

    def test_rerun_byte_identical(self, tmp_path, config_path, fixture_dir):
        other = tmp_path / "fixture2"
        assert main(["fixture", "--config", config_path, "--out", str(other)]) == 0
        for name in ("train.fobo", "id_test.fobo", "ood_test.fobo", "manifest.json"):
            assert (fixture_dir / name).read_bytes() == (other / name).read_bytes()

    def test_invalid_spec_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"fixture": {"n_classes": 1}}))
        assert main(["fixture", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"fixture": {"n_classes": 4, "bogus": 1}}))
        assert main(["fixture", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestTrainCommand:
    def test_writes_checkpoint_and_history(self, tmp_path, config_path, fixture_dir):
        ckpt = tmp_path / "ckpt.fobp"
        assert main(["train", "--config", config_path, "--data", str(fixture_dir),
                     "--out", str(ckpt)]) == 0
        assert ckpt.exists()
        history = (tmp_path / "ckpt.history.csv").read_text().splitlines()
        assert history[0] == "step,l_id,l_abs,l_cfr,l_total"
        assert len(history) == 6

    def test_zero_steps_writes_initial_context(self, tmp_path, config_path, fixture_dir):
        ckpt = tmp_path / "zero.fobp"
        assert main(["train", "--config", config_path, "--data", str(fixture_dir),
                     "--steps", "0", "--out", str(ckpt)]) == 0
        ctx = textenc.load_prompt(ckpt)
        init = textenc.init_prompt(16, 16, 0.02, seed=1)
        assert np.allclose(ctx.vectors, init.vectors, atol=1e-7)

    def test_rerun_byte_identical(self, tmp_path, config_path, fixture_dir):
        a, b = tmp_path / "a.fobp", tmp_path / "b.fobp"
        for out in (a, b):
            assert main(["train", "--config", config_path, "--data", str(fixture_dir),
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.history.csv").read_bytes() == (tmp_path / "b.history.csv").read_bytes()


class TestEvalCommand:
    def test_report(self, tmp_path, config_path, fixture_dir):
        ckpt = tmp_path / "ckpt.fobp"
        main(["train", "--config", config_path, "--data", str(fixture_dir), "--out", str(ckpt)])
        report_path = tmp_path / "report.json"
        assert main(["eval", "--config", config_path, "--data", str(fixture_dir),
                     "--checkpoint", str(ckpt), "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert "ood_test" in report["per_set"]["glmcm"]
        auroc = report["per_set"]["glmcm"]["ood_test"]["auroc"]
        assert 0.0 <= auroc <= 1.0

    def test_missing_checkpoint_flag_exits_2(self, config_path, fixture_dir, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--config", config_path, "--data", str(fixture_dir)])
        assert exc.value.code == 2


class TestScoreCommand:
    def test_jsonl_output(self, tmp_path, config_path, fixture_dir):
        out = tmp_path / "scores.jsonl"
        assert main(["score", "--config", config_path, "--data", str(fixture_dir),
                     "--input", str(fixture_dir / "ood_test.fobo"), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 12
        row = json.loads(lines[0])
        assert set(row) == {"record_index", "mcm", "lmcm", "glmcm", "label"}
        assert row["label"] is None
        assert row["glmcm"] == pytest.approx(row["mcm"] + row["lmcm"], abs=1e-8)


class TestDecomposeCommand:
    def test_dump(self, tmp_path, config_path, fixture_dir):
        out = tmp_path / "decomp.jsonl"
        assert main(["decompose", "--config", config_path, "--data", str(fixture_dir),
                     "--input", str(fixture_dir / "train.fobo"), "--out", str(out)]) == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(lines) == 16
        for row in lines:
            patches = sorted(row["fg"] + row["bg"])
            assert patches == list(range(8))
            assert len(row["ranks"]) == 8


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--seed", "3"]) == 0
        assert "max relative gradient error" in capsys.readouterr().out
