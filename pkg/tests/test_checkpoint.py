import json
import struct

import numpy as np
import pytest

from gsgcn.checkpoint import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                              CheckpointVersionError, load_checkpoint, read_manifest, save_checkpoint)
from gsgcn.model import GSGCN, MICRO_CONFIG, ModelConfig
from gsgcn.training import EpochRecord, TrainConfig, TrainState


@pytest.fixture
def saved(tmp_path):
    model = GSGCN(MICRO_CONFIG)
    params = model.init_params(5)
    rng = np.random.default_rng(0)
    for t in params.values():
        t.data[...] = rng.normal(size=t.shape)
    for b in params.buffers.values():
        b[...] = rng.uniform(0.5, 2, size=b.shape)
    state = TrainState(params, 7, {"fc.weight": rng.normal(size=(12, 3)).astype(np.float32)},
                       [EpochRecord(6, 0.05, 0.3, 0.5)])
    path = save_checkpoint(state, MICRO_CONFIG, TrainConfig(seed=3), tmp_path / "m.ckpt")
    return state, path


def test_round_trip_is_bit_exact(saved):
    state, path = saved
    ck = load_checkpoint(path)
    assert ck.model_config == MICRO_CONFIG
    assert ck.epoch == 7 and ck.train_config["seed"] == 3
    assert ck.history == [{"epoch": 6, "lr": 0.05, "loss": 0.3, "accuracy": 0.5}]
    assert set(ck.params.names()) == set(state.params.names())
    for n in state.params.names():
        a, b = state.params[n].data, ck.params[n].data
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    for n, buf in state.params.buffers.items():
        assert buf.tobytes() == ck.params.buffers[n].tobytes()
    assert ck.momentum["fc.weight"].tobytes() == state.momentum["fc.weight"].tobytes()


def test_saving_twice_gives_identical_bytes(saved, tmp_path):
    state, path = saved
    again = save_checkpoint(state, MICRO_CONFIG, TrainConfig(seed=3), tmp_path / "again.ckpt")
    assert path.read_bytes() == again.read_bytes()


def test_layout_is_documented_prefix_and_manifest(saved):
    _, path = saved
    raw = path.read_bytes()
    magic, version, mlen = struct.unpack_from("<8sIQ", raw)
    assert magic == b"GSGCNCKP" and version == 1
    manifest = json.loads(raw[20:20 + mlen])
    assert manifest == read_manifest(path)
    entry = next(e for e in manifest["arrays"] if e["name"] == "param:fc.bias")
    start = 20 + mlen + entry["offset"]
    arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype=entry["dtype"])
    assert entry["dtype"] == "<f4"
    np.testing.assert_array_equal(arr, load_checkpoint(path).params["fc.bias"].data)


def test_truncated_file(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(b"GSGC")
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_version_mismatch(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 8, 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_bad_magic(saved):
    _, path = saved
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_shape_mismatch_names_parameter(saved):
    _, path = saved
    other = ModelConfig(num_persons=2, num_frames=8, layout="crowdpose14", channels=(6, 12), fusion_channels=12,
                        num_classes=3)
    with pytest.raises(CheckpointShapeError, match=r"person0\.block1\.g3d3\.mask"):
        load_checkpoint(path, other)


def test_error_classes_are_distinct():
    assert len({CheckpointTruncatedError, CheckpointVersionError, CheckpointShapeError}) == 3
    for cls in (CheckpointTruncatedError, CheckpointVersionError, CheckpointShapeError):
        assert issubclass(cls, CheckpointError)


def test_bare_params_can_be_saved(tmp_path):
    params = GSGCN(MICRO_CONFIG).init_params(0)
    path = save_checkpoint(params, MICRO_CONFIG, None, tmp_path / "p.ckpt")
    ck = load_checkpoint(path)
    assert ck.epoch == 0 and ck.train_config is None and ck.momentum == {}
