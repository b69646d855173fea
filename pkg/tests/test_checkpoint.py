import json
import struct

import numpy as np
import pytest

from masdt.checkpoint import (Checkpoint, CheckpointError, FingerprintMismatch, canonical_json,
                              decode_checkpoint, encode_checkpoint, fingerprint, load_checkpoint,
                              save_checkpoint)
from masdt.optim import AdamW
from masdt.vit import ViTClassifier, ViTConfig

CFG = ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=1, num_heads=2)


def make_checkpoint(config=CFG, seed=0):
    model = ViTClassifier(config, np.random.default_rng(seed))
    opt = AdamW(model.named_parameters(), lr=1e-3)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    opt.step()
    return Checkpoint({"vit": config.to_dict()}, model.state_dict(), opt.state_dict(), {"seed": seed})


def test_fingerprint_is_stable_and_order_free():
    a = {"b": 1, "a": [1.5, "x"]}
    b = {"a": [1.5, "x"], "b": 1}
    assert fingerprint(a) == fingerprint(b) and len(fingerprint(a)) == 16
    assert canonical_json(a) == '{"a":[1.5,"x"],"b":1}'
    assert fingerprint(a) != fingerprint({"b": 2, "a": [1.5, "x"]})


def test_layout_header():
    blob = encode_checkpoint(make_checkpoint())
    assert blob[:4] == b"MSDT"
    version, hlen = struct.unpack("<HI", blob[4:10])
    header = json.loads(blob[10:10 + hlen])
    assert version == 1
    assert {"fingerprint", "config", "tensors"} <= set(header)
    names = [t["name"] for t in header["tensors"]]
    assert names == sorted(n for n in names if n.startswith("param/")) + sorted(
        n for n in names if n.startswith("optim/"))
    offsets = [t["offset"] for t in header["tensors"]]
    assert offsets == sorted(offsets)


def test_save_load_save_byte_identical(tmp_path):
    ckpt = make_checkpoint()
    p1 = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in ckpt.params.items():
        assert np.array_equal(loaded.params[k], v)
    for k, v in ckpt.optimizer["arrays"].items():
        assert np.array_equal(loaded.optimizer["arrays"][k], v)
    assert loaded.optimizer["hyper"]["step"] == 1
    assert loaded.meta == {"seed": 0}


def test_optimizer_state_restores_training(tmp_path):
    ckpt = make_checkpoint()
    path = save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(path)
    model = ViTClassifier(CFG, np.random.default_rng(9))
    model.load_state_dict(back.params)
    opt = AdamW(model.named_parameters(), lr=1e-3)
    opt.load_state_dict(back.optimizer)
    assert opt.state.step == 1
    assert np.array_equal(opt.state.m[0], ckpt.optimizer["arrays"][f"m/{opt.names[0]}"])


def test_strict_fingerprint_mismatch_reports_both(tmp_path):
    path = save_checkpoint(make_checkpoint(), tmp_path / "d.ckpt")
    other = fingerprint({"vit": ViTConfig(image_size=8, patch_size=4, embed_dim=32, depth=1,
                                          num_heads=2).to_dict()})
    with pytest.raises(FingerprintMismatch) as info:
        load_checkpoint(path, other, strict=True)
    stored = fingerprint({"vit": CFG.to_dict()})
    assert other in str(info.value) and stored in str(info.value)
    load_checkpoint(path, other, strict=False)  # lenient load still works


def test_corrupt_files_rejected(tmp_path):
    blob = encode_checkpoint(make_checkpoint())
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(blob[:4] + struct.pack("<H", 2) + blob[6:])
    with pytest.raises(CheckpointError, match="header"):
        decode_checkpoint(blob[:10] + b"}" + blob[11:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_atomic_save_leaves_no_temp_files(tmp_path):
    save_checkpoint(make_checkpoint(), tmp_path / "e.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["e.ckpt"]


def test_checkpoint_without_optimizer(tmp_path):
    ckpt = Checkpoint({"a": 1}, {"w": np.arange(3.0)}, None, {})
    back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "f.ckpt"))
    assert back.optimizer is None and np.array_equal(back.params["w"], np.arange(3.0))
