import json

import numpy as np
import pytest

from mcgcn import checkpoint
from mcgcn import message_passing as mp


def _model():
    cfg = mp.ModelConfig(in_dim=12, hidden=5, depth=2)
    return cfg, mp.init_params(cfg, 4)


def test_bit_exact_round_trip(tmp_path):
    cfg, params = _model()
    checkpoint.save(tmp_path, cfg, params, seed=4)
    cfg2, params2, manifest = checkpoint.load(tmp_path)
    assert cfg2 == cfg
    assert list(params2) == list(params)
    for k in params:
        assert params2[k].data.tobytes() == params[k].data.tobytes()
    assert manifest["seed"] == 4


def test_manifest_layout(tmp_path):
    cfg, params = _model()
    path = checkpoint.save(tmp_path, cfg, params, seed=4)
    manifest = json.loads(path.read_text())
    total = sum(p.data.size for p in params.values())
    assert (tmp_path / "model.bin").stat().st_size == 8 * total
    assert manifest["layers"][-1]["offset"] + manifest["layers"][-1]["count"] == total
    assert manifest["hyperparameters"]["depth"] == 2


def test_same_params_same_bytes(tmp_path):
    cfg, params = _model()
    checkpoint.save(tmp_path / "a", cfg, params, seed=4)
    checkpoint.save(tmp_path / "b", cfg, params, seed=4)
    for f in ("model.json", "model.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_corrupt_blob_detected(tmp_path):
    cfg, params = _model()
    checkpoint.save(tmp_path, cfg, params, seed=4)
    blob = bytearray((tmp_path / "model.bin").read_bytes())
    blob[3] ^= 1
    (tmp_path / "model.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        checkpoint.load(tmp_path)


def test_loaded_model_predicts_identically(tmp_path):
    from test_message_passing import _random_items

    cfg, params = _model()
    checkpoint.save(tmp_path, cfg, params, seed=4)
    cfg2, params2, _ = checkpoint.load(tmp_path)
    batch = mp.make_batch(_random_items(0, 2))
    a = mp.forward(cfg, params, batch)
    b = mp.forward(cfg2, params2, batch)
    assert np.array_equal(a.graph_logits.data, b.graph_logits.data)
