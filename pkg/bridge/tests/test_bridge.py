import json
import struct
import subprocess
import sys

import numpy as np
import pytest
import torch

from ere_bridge.cli import main
from ere_bridge.containers import (ContainerError, read_safetensors,
                                   read_torch_checkpoint, sniff_format,
                                   write_safetensors)
from ere_bridge.convert import ConversionManifest, from_tsa, to_tsa
from ere_bridge.tsa import read_tsa


def small_real_checkpoint(tmp_path, dtype=torch.float32, name="model.pt"):
    """A genuine torch.save state dict of a small MLP."""
    torch.manual_seed(0)
    model = torch.nn.Sequential(
        torch.nn.Linear(16, 32), torch.nn.Tanh(), torch.nn.Linear(32, 12))
    state = {k: v.to(dtype) for k, v in model.state_dict().items()}
    path = tmp_path / name
    torch.save(state, path)
    return path, {k: v.numpy() for k, v in state.items()}


class TestContainers:
    def test_safetensors_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.weight": rng.standard_normal((4, 6)).astype(np.float32),
                   "b.weight": rng.standard_normal((3, 2)).astype(np.float16)}
        path = tmp_path / "m.safetensors"
        write_safetensors(tensors, path)
        back = read_safetensors(path)
        for name, arr in tensors.items():
            tag, value = back[name]
            assert tag == ("f32" if arr.dtype == np.float32 else "f16")
            assert np.array_equal(value, arr)

    def test_safetensors_layout_is_documented_format(self, tmp_path):
        path = tmp_path / "m.safetensors"
        write_safetensors({"w": np.zeros((2, 2), dtype=np.float32)}, path)
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + hlen])
        assert header["w"] == {"dtype": "F32", "shape": [2, 2],
                               "data_offsets": [0, 16]}
        assert len(raw) == 8 + hlen + 16

    def test_bf16_widened_exactly(self, tmp_path):
        values = torch.randn(5, 3, dtype=torch.float32).to(torch.bfloat16)
        torch.save({"w": values}, tmp_path / "bf16.pt")
        back = read_torch_checkpoint(tmp_path / "bf16.pt")
        tag, arr = back["w"]
        assert tag == "bf16"
        assert np.array_equal(arr, values.to(torch.float32).numpy())

    def test_torch_nested_dict_flattened(self, tmp_path):
        torch.save({"state_dict": {"layer.weight": torch.ones(2, 2)}},
                   tmp_path / "nested.pt")
        back = read_torch_checkpoint(tmp_path / "nested.pt")
        assert list(back) == ["state_dict.layer.weight"]

    def test_sniff(self, tmp_path):
        st = tmp_path / "a.safetensors"
        write_safetensors({"w": np.zeros(2, dtype=np.float32)}, st)
        assert sniff_format(st) == "safetensors"
        pt, _ = small_real_checkpoint(tmp_path)
        assert sniff_format(pt) == "torch"


class TestConversion:
    def test_round_trip_preserves_everything(self, tmp_path):
        ckpt, reference = small_real_checkpoint(tmp_path)
        tsa = tmp_path / "model.tsa"
        record = to_tsa(ckpt, tsa)
        assert record["source_format"] == "torch"
        assert record["casts"] == {}
        assert (tmp_path / "model.tsa.manifest.json").is_file()

        out = tmp_path / "restored.safetensors"
        from_tsa(tsa, out)
        restored = read_safetensors(out)
        assert sorted(restored) == sorted(reference)
        for name, arr in reference.items():
            tag, value = restored[name]
            assert value.shape == arr.shape
            assert np.array_equal(value, arr)

    def test_f16_values_exact(self, tmp_path):
        ckpt, reference = small_real_checkpoint(tmp_path, dtype=torch.float16,
                                                name="half.pt")
        tsa = tmp_path / "half.tsa"
        to_tsa(ckpt, tsa)
        stored = read_tsa(tsa)
        for name, arr in reference.items():
            assert stored[name].dtype == np.float16
            assert np.array_equal(stored[name], arr)

    def test_f64_downcast_flagged(self, tmp_path):
        torch.save({"w": torch.randn(3, 3, dtype=torch.float64)}, tmp_path / "d.pt")
        record = to_tsa(tmp_path / "d.pt", tmp_path / "d.tsa")
        assert record["casts"]["w"]["from"] == "f64"
        assert record["casts"]["w"]["lossy"] is True

    def test_bf16_cast_not_lossy(self, tmp_path):
        torch.save({"w": torch.randn(3, 3).to(torch.bfloat16)}, tmp_path / "b.pt")
        record = to_tsa(tmp_path / "b.pt", tmp_path / "b.tsa")
        assert record["casts"]["w"] == {"from": "bf16", "to": "f32", "lossy": False}

    def test_unsupported_dtype_without_policy(self, tmp_path):
        torch.save({"ids": torch.arange(5)}, tmp_path / "ints.pt")
        with pytest.raises(ContainerError, match="cast policy"):
            to_tsa(tmp_path / "ints.pt", tmp_path / "ints.tsa")

    def test_rename_globs_symmetric(self, tmp_path):
        ckpt, reference = small_real_checkpoint(tmp_path)
        manifest_path = tmp_path / "manifest.json"
        manifest_path.write_text(json.dumps({"renames": [["0.*", "blocks.0.*"],
                                                         ["2.*", "blocks.1.*"]]}))
        manifest = ConversionManifest.load(manifest_path)
        tsa = tmp_path / "renamed.tsa"
        record = to_tsa(ckpt, tsa, manifest)
        assert record["renames"]["0.weight"] == "blocks.0.weight"
        assert "blocks.0.weight" in read_tsa(tsa)

        out = tmp_path / "back.safetensors"
        from_tsa(tsa, out, manifest)
        restored = read_safetensors(out)
        assert sorted(restored) == sorted(reference)
        for name, arr in reference.items():
            assert np.array_equal(restored[name][1], arr)

    def test_identity_manifest_preserves_names_shapes(self, tmp_path):
        ckpt, reference = small_real_checkpoint(tmp_path)
        tsa = tmp_path / "m.tsa"
        to_tsa(ckpt, tsa)
        stored = read_tsa(tsa)
        assert sorted(stored) == sorted(reference)
        assert all(stored[n].shape == reference[n].shape for n in reference)


class TestCli:
    def test_cli_round_trip(self, tmp_path):
        ckpt, reference = small_real_checkpoint(tmp_path)
        tsa = tmp_path / "m.tsa"
        out = tmp_path / "m.safetensors"
        assert main(["to-tsa", str(ckpt), str(tsa)]) == 0
        assert main(["from-tsa", str(tsa), str(out)]) == 0
        restored = read_safetensors(out)
        for name, arr in reference.items():
            assert np.array_equal(restored[name][1], arr)

    def test_cli_missing_file(self, tmp_path):
        assert main(["to-tsa", str(tmp_path / "nope.pt"), str(tmp_path / "x.tsa")]) == 1


class TestEndToEnd:
    def test_bridge_output_feeds_encoder(self, tmp_path):
        """Acceptance: bridge round trip, then the TSA pair drives `ere encode`."""
        torch.manual_seed(1)
        model = torch.nn.Sequential(
            torch.nn.Linear(16, 32), torch.nn.Tanh(), torch.nn.Linear(32, 12))
        base_state = model.state_dict()
        torch.save(base_state, tmp_path / "base.pt")
        finetuned_state = {k: v + 0.01 * torch.randn_like(v)
                           for k, v in base_state.items()}
        torch.save(finetuned_state, tmp_path / "ft.pt")

        assert main(["to-tsa", str(tmp_path / "base.pt"), str(tmp_path / "base.tsa")]) == 0
        assert main(["to-tsa", str(tmp_path / "ft.pt"), str(tmp_path / "ft.tsa")]) == 0

        # round trip preserves names, shapes, and values element-exact
        assert main(["from-tsa", str(tmp_path / "base.tsa"),
                     str(tmp_path / "base_back.safetensors")]) == 0
        restored = read_safetensors(tmp_path / "base_back.safetensors")
        for name, value in base_state.items():
            assert np.array_equal(restored[name][1], value.numpy())

        result = subprocess.run(
            [sys.executable, "-m", "ere.cli", "encode",
             "--base", str(tmp_path / "base.tsa"),
             "--finetuned", str(tmp_path / "ft.tsa"),
             "--rank", "4", "--out", str(tmp_path / "m.ere")],
            capture_output=True, text=True)
        assert result.returncode == 0, result.stderr
        assert (tmp_path / "m.ere").stat().st_size > 0

        result = subprocess.run(
            [sys.executable, "-m", "ere.cli", "verify",
             "--base", str(tmp_path / "base.tsa"),
             "--finetuned", str(tmp_path / "ft.tsa"),
             "--ere", str(tmp_path / "m.ere"), "--tol", "1"],
            capture_output=True, text=True)
        assert result.returncode == 0, result.stderr
