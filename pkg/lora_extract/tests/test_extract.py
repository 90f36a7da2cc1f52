import json

import numpy as np
import pytest
import torch

from lora_extract.extract import (
    ExtractConfig,
    _context_limit,
    _example_loss,
    _restore,
    extract_features,
    extract_gradients,
    load_dataset,
    warmup_adapter,
)
from lora_extract.lora import adapter_dim, base_weight_hash, flatten_adapter_grads
from lora_extract.tokenizer import ByteTokenizer, load_tokenizer


def make_config(tiny_model_dir, toy_dataset, tmp_path, **overrides):
    defaults = dict(
        model=tiny_model_dir,
        dataset=toy_dataset,
        rank=4,
        warmup_fraction=0.05,
        warmup_epochs=1,
        seed=0,
        adapter_path=str(tmp_path / "adapter.pt"),
        gradients_path=str(tmp_path / "grads.gsg"),
        features_path=str(tmp_path / "feats.gsg"),
    )
    defaults.update(overrides)
    return ExtractConfig(**defaults)


class TestWarmup:
    def test_base_weights_frozen(self, tiny_model_dir, toy_dataset, tmp_path):
        cfg = make_config(tiny_model_dir, toy_dataset, tmp_path)
        checkpoint = warmup_adapter(cfg)
        assert checkpoint["base_hash_before"] == checkpoint["base_hash_after"]
        assert (tmp_path / "adapter.pt").exists()

    def test_warmup_subset_arithmetic(self, tiny_model_dir, toy_dataset, tmp_path):
        cfg = make_config(tiny_model_dir, toy_dataset, tmp_path)
        n = len(load_dataset(cfg).ids)
        checkpoint = warmup_adapter(cfg)
        assert len(checkpoint["warmup_subset_ids"]) == max(1, round(0.05 * n))

    def test_same_seed_same_subset(self, tiny_model_dir, toy_dataset, tmp_path):
        a = warmup_adapter(
            make_config(tiny_model_dir, toy_dataset, tmp_path, adapter_path=str(tmp_path / "a.pt"))
        )
        b = warmup_adapter(
            make_config(tiny_model_dir, toy_dataset, tmp_path, adapter_path=str(tmp_path / "b.pt"))
        )
        assert a["warmup_subset_ids"] == b["warmup_subset_ids"]

    def test_adapter_actually_trains(self, tiny_model_dir, toy_dataset, tmp_path):
        cfg = make_config(tiny_model_dir, toy_dataset, tmp_path, warmup_fraction=0.5)
        checkpoint = warmup_adapter(cfg)
        b_norms = [
            float(v.norm()) for k, v in checkpoint["adapter"].items() if k.endswith("lora_B")
        ]
        assert any(n > 0 for n in b_norms)  # B starts at zero; training moved it


@pytest.fixture(scope="module")
def warmed(tiny_model_dir, toy_dataset, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("warmed")
    cfg = make_config(tiny_model_dir, toy_dataset, tmp)
    checkpoint = warmup_adapter(cfg)
    return cfg, checkpoint


class TestGradients:
    def test_stream_written_with_constant_dim(self, warmed):
        cfg, checkpoint = warmed
        count = extract_gradients(cfg, checkpoint)
        assert count == 60
        raw = open(cfg.gradients_path, "rb").read()
        assert raw[:4] == b"GSGR"
        model, _, wrapped = _restore(cfg, checkpoint)
        dim = adapter_dim(model, wrapped)
        import struct

        assert struct.unpack("<I", raw[6:10])[0] == dim

    def test_identical_examples_identical_gradients(
        self, tiny_model_dir, toy_dataset, tmp_path
    ):
        dup = tmp_path / "dup.jsonl"
        row = {"instruction": "add 1 and 2", "response": "3", "source_tag": "math"}
        with open(dup, "w") as fh:
            fh.write(json.dumps({**row, "id": 0}) + "\n")
            fh.write(json.dumps({**row, "id": 1}) + "\n")
        cfg = make_config(tiny_model_dir, str(dup), tmp_path)
        checkpoint = warmup_adapter(cfg)
        extract_gradients(cfg, checkpoint)
        from gspace.streams import read_stream

        recs = list(read_stream(cfg.gradients_path))
        assert len(recs) == 2
        assert np.array_equal(recs[0].vector, recs[1].vector)

    def test_gradient_matches_finite_difference(self, warmed):
        # perturb the single largest-gradient adapter scalar and compare the
        # loss slope against the autograd value (float64 for a clean oracle)
        cfg, checkpoint = warmed
        model, tokenizer, wrapped = _restore(cfg, checkpoint)
        model.double()
        data = load_dataset(cfg)
        limit = _context_limit(model)
        loss, _ = _example_loss(model, tokenizer, data.instructions[0], data.responses[0], limit)
        model.zero_grad(set_to_none=True)
        loss.backward()
        grad = flatten_adapter_grads(model, wrapped)
        j = int(np.argmax(np.abs(grad)))

        params = []
        for name in wrapped:
            mod = model.get_submodule(name)
            params.extend([mod.lora_A, mod.lora_B])
        offset = 0
        target, local = None, None
        for p in params:
            if j < offset + p.numel():
                target, local = p, j - offset
                break
            offset += p.numel()

        eps = 1e-6
        flat = target.data.view(-1)
        original = float(flat[local])
        losses = []
        for delta in (eps, -eps):
            with torch.no_grad():
                flat[local] = original + delta
            l, _ = _example_loss(
                model, tokenizer, data.instructions[0], data.responses[0], limit
            )
            losses.append(float(l.detach()))
        with torch.no_grad():
            flat[local] = original
        fd = (losses[0] - losses[1]) / (2 * eps)
        assert abs(fd - grad[j]) / max(abs(fd), 1e-12) < 1e-3

    def test_overlong_example_skipped(self, tiny_model_dir, tmp_path, capsys):
        data = tmp_path / "long.jsonl"
        with open(data, "w") as fh:
            fh.write(json.dumps({"id": 0, "instruction": "hi", "response": "ok"}) + "\n")
            fh.write(
                json.dumps({"id": 1, "instruction": "hi", "response": "x" * 500}) + "\n"
            )
        cfg = make_config(tiny_model_dir, str(data), tmp_path, warmup_fraction=1.0)
        checkpoint = warmup_adapter(cfg)
        count = extract_gradients(cfg, checkpoint)
        err = capsys.readouterr().err
        assert count == 1
        assert "skipping id 1" in err


class TestFeatures:
    def test_deterministic_and_aligned(self, warmed):
        cfg, checkpoint = warmed
        extract_gradients(cfg, checkpoint)
        extract_features(cfg, checkpoint)
        from gspace.streams import read_stream

        grads = list(read_stream(cfg.gradients_path))
        feats = list(read_stream(cfg.features_path))
        assert [r.id for r in grads] == [r.id for r in feats]

        import dataclasses

        feats_again_path = cfg.features_path + ".again.gsg"
        cfg2 = dataclasses.replace(cfg, features_path=feats_again_path)
        extract_features(cfg2, checkpoint)
        again = list(read_stream(feats_again_path))
        assert all(np.array_equal(a.vector, b.vector) for a, b in zip(feats, again))

    def test_feature_dim_is_hidden_size(self, warmed):
        cfg, checkpoint = warmed
        extract_features(cfg, checkpoint)
        from gspace.streams import read_header

        assert read_header(cfg.features_path).dim == 32


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        json.dump({"model": "x", "dataset": "y", "nonsense": 1}, open(path, "w"))
        with pytest.raises(ValueError, match="nonsense"):
            ExtractConfig.load(str(path))

    def test_rank_default_and_validation(self):
        assert ExtractConfig(model="m", dataset="d").rank == 32
        with pytest.raises(ValueError):
            ExtractConfig(model="m", dataset="d", rank=0)
        with pytest.raises(ValueError):
            ExtractConfig(model="m", dataset="d", warmup_fraction=0.0)


def test_byte_tokenizer_fallback(tiny_model_dir):
    tok = load_tokenizer(tiny_model_dir)
    assert isinstance(tok, ByteTokenizer)
    assert tok.encode("ab") == [97, 98]
