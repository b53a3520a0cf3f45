import json

import pytest

from ttgen.cli import TTG_LOSSES, build_parser, main
from ttgen.harness import read_jsonl
from ttgen.synthdata import export_datasets, make_rotated_domains


@pytest.fixture(scope="module")
def target_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("target")
    export_datasets(make_rotated_domains(7, [90.0], 40), d)
    return d


@pytest.fixture(scope="module")
def ckpt_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    rc = main(
        ["train", "--out", str(out), "--n-iter", "4", "--n-per-domain", "40",
         "--angles", "0,45,90"]
    )
    assert rc == 0
    return out


class TestParser:
    def test_loss_aliases(self):
        assert set(TTG_LOSSES) == {"entropy", "pseudo", "memo"}
        args = build_parser().parse_args(["train", "--out", "x", "--ttg-loss", "memo"])
        assert TTG_LOSSES[args.ttg_loss] == "augmentation_consistency"

    def test_gen_layers_restricted(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--out", "x", "--gen-layers", "3"])

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_unknown_protocol(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval", "nonsense"])


class TestCommands:
    def test_train_writes_checkpoint(self, ckpt_dir):
        manifest = json.loads((ckpt_dir / "manifest.json").read_text())
        assert manifest["config"]["n_iter"] == 4
        assert (ckpt_dir / "tensors.bin").exists()
        assert (ckpt_dir / "metrics.jsonl").exists()

    def test_train_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_iter": 2, "batch_size": 8, "model_selection": False}))
        out = tmp_path / "run"
        rc = main(["train", "--config", str(cfg), "--out", str(out),
                   "--angles", "0,90", "--n-per-domain", "30"])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["n_iter"] == 2

    def test_adapt_round_trip(self, ckpt_dir, target_dir, tmp_path, capsys):
        out = tmp_path / "adapt"
        rc = main(["adapt", "--ckpt", str(ckpt_dir), "--stream", str(target_dir),
                   "--strategy", "generalizeformer", "--out", str(out)])
        assert rc == 0
        assert "accuracy" in capsys.readouterr().out
        records = read_jsonl(out / "metrics.jsonl")
        assert records and all("n_correct" in r for r in records)
        assert (out / "summary.csv").read_text().startswith("strategy,")

    def test_adapt_corrupt_checkpoint(self, ckpt_dir, target_dir, tmp_path, capsys):
        import shutil

        bad = tmp_path / "bad"
        shutil.copytree(ckpt_dir, bad)
        blob = bytearray((bad / "tensors.bin").read_bytes())
        blob[64] ^= 0xFF
        (bad / "tensors.bin").write_bytes(bytes(blob))
        rc = main(["adapt", "--ckpt", str(bad), "--stream", str(target_dir)])
        assert rc == 1
        assert "checkpoint error" in capsys.readouterr().err

    def test_eval_timing_and_report(self, tmp_path, capsys):
        out = tmp_path / "timing"
        rc = main(["eval", "timing", "--out", str(out), "--seeds", "0",
                   "--n-iter", "2", "--n-per-domain", "30", "--angles", "0,45,90"])
        assert rc == 0
        assert "median_ms" in capsys.readouterr().out
        rc = main(["report", "--out", str(out)])
        assert rc == 0
        assert (out / "report").exists()
