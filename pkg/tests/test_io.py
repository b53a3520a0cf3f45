import json

import pytest
import torch

from ttgen.io import CheckpointError, config_hash, load_checkpoint, save_checkpoint


def _perturb(module):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn_like(p) * 0.01)


class TestRoundTrip:
    def test_state_restored_bitwise(self, backbone, generator, tmp_path):
        _perturb(backbone)
        _perturb(generator)
        save_checkpoint(tmp_path / "ckpt", backbone, generator, {"lr": 1e-4})
        ckpt = load_checkpoint(tmp_path / "ckpt")
        for a, b in zip(backbone.state_dict().items(), ckpt.backbone.state_dict().items()):
            assert a[0] == b[0]
            assert torch.equal(a[1], b[1]), a[0]
        for a, b in zip(generator.state_dict().items(), ckpt.generator.state_dict().items()):
            assert a[0] == b[0]
            assert torch.equal(a[1], b[1]), a[0]
        assert ckpt.config == {"lr": 1e-4}

    def test_predictions_identical(self, backbone, generator, batch, tmp_path):
        _perturb(backbone)
        save_checkpoint(tmp_path / "ckpt", backbone, generator)
        ckpt = load_checkpoint(tmp_path / "ckpt")
        with torch.no_grad():
            assert torch.equal(backbone.forward(batch), ckpt.backbone.forward(batch))

    def test_loaded_modules_in_eval_mode(self, backbone, generator, tmp_path):
        save_checkpoint(tmp_path / "ckpt", backbone, generator)
        ckpt = load_checkpoint(tmp_path / "ckpt")
        assert not ckpt.backbone.training
        assert not ckpt.generator.training


class TestErrors:
    def test_corrupted_blob_rejected(self, backbone, generator, tmp_path):
        save_checkpoint(tmp_path / "ckpt", backbone, generator)
        blob = bytearray((tmp_path / "ckpt" / "tensors.bin").read_bytes())
        blob[100] ^= 0xFF
        (tmp_path / "ckpt" / "tensors.bin").write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(tmp_path / "ckpt")

    def test_unknown_version_rejected(self, backbone, generator, tmp_path):
        save_checkpoint(tmp_path / "ckpt", backbone, generator)
        mpath = tmp_path / "ckpt" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["format_version"] = 99
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "nowhere")


class TestConfigHash:
    def test_stable_across_key_order(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})

    def test_distinguishes_values(self):
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_format(self):
        h = config_hash({})
        assert len(h) == 16
        int(h, 16)
