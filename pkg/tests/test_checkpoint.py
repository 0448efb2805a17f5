import hashlib
import json

import numpy as np
import pytest

from uniclam.checkpoint import (CheckpointError, CompatibilityError, decode_checkpoint, encode_checkpoint,
                                load_into, read_checkpoint, write_checkpoint)
from uniclam.config import ConfigError, RunConfig, load_config
from uniclam.optim import build_train_state

TOY = RunConfig(K=2, h=8, heads=2, proj_dim=4, image_size=8, vocab_size=12, q_max=6, N_v=2, N_t=2,
                mask_channels=3, text_mask_layers=1, batch=2, seed=3)


def test_train_state_round_trip(tmp_path):
    tensors = build_train_state(TOY).named_tensors()
    write_checkpoint(tmp_path / "m.uclm", tensors)
    back = read_checkpoint(tmp_path / "m.uclm")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == np.float32
        assert back[k].tobytes() == tensors[k].astype(np.float32).tobytes()


def test_non_ascii_name_and_scalar():
    t = {"ĉapeau.λ": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5)}
    back = decode_checkpoint(encode_checkpoint(t))
    np.testing.assert_array_equal(back["ĉapeau.λ"], t["ĉapeau.λ"])
    assert back["s"].shape == () and back["s"] == 2.5


def test_hash_stable_across_writes(tmp_path):
    for name in ("a.uclm", "b.uclm"):
        write_checkpoint(tmp_path / name, build_train_state(TOY).named_tensors())
    h = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in ("a.uclm", "b.uclm")]
    assert h[0] == h[1]


def test_layout():
    buf = encode_checkpoint({"w": np.ones((2, 3), np.float32)})
    assert buf[:4] == b"UCLM"
    assert buf[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert buf[12:14] == (1).to_bytes(2, "little") and buf[14:15] == b"w"
    assert buf[15] == 2 and buf[16:24] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(buf[24:], "<f4").tolist() == [1.0] * 6


def test_corruption_rejected():
    buf = encode_checkpoint({"w": np.ones(3, np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"UCLD" + buf[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(buf[:4] + (9).to_bytes(4, "little") + buf[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(buf[:-1])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(buf + b"\0")
    with pytest.raises(CheckpointError, match="non-finite"):
        encode_checkpoint({"w": np.array([np.nan])})


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "nope.uclm")


def test_load_into_names_offending_tensor():
    dst = {"a": np.zeros(2), "b": np.zeros((2, 2))}
    with pytest.raises(CompatibilityError) as e:
        load_into(dst, {"p.a": np.ones(2), "p.b": np.ones((3, 2))}, "p.")
    assert e.value.tensor == "p.b"
    with pytest.raises(CompatibilityError, match="p.b: missing"):
        load_into(dst, {"p.a": np.ones(2)}, "p.")
    load_into(dst, {"p.a": np.ones(2), "p.b": np.ones((2, 2)), "q.z": np.ones(1)}, "p.")
    assert dst["a"].tolist() == [1.0, 1.0]


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = RunConfig(beta=0.5, sharing="hard")
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"beta": 0.2, "stpes": 10}))
    with pytest.raises(ConfigError, match="stpes"):
        load_config(p)
    p.write_text(json.dumps({"beta": 0.2}))
    assert load_config(p, seed=9) == RunConfig(beta=0.2, seed=9)


def test_config_defaults():
    c = RunConfig()
    assert (c.K, c.h, c.heads, c.proj_dim, c.N_v, c.N_t) == (4, 32, 4, 16, 4, 2)
    assert (c.tau, c.beta, c.lam, c.lr, c.weight_decay, c.batch, c.steps) == (0.1, 0.3, 1e-3, 1e-3, 5e-4, 16, 2000)
    assert (c.mask_semantics, c.augmentation, c.sharing, c.unified) == ("occlude", "adversarial", "gradual", "joint")


@pytest.mark.parametrize("bad", [dict(beta=1.5), dict(lam=-1.0), dict(tau=0.0), dict(N_v=0), dict(N_t=0),
                                 dict(sharing="soft"), dict(augmentation="none"), dict(h=30)])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)
