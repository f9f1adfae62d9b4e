import struct
import numpy as np
import pytest
from checkpoint import MAGIC, load_checkpoint, save_checkpoint
from efpn_model import build
from tensor import Tensor
from errors import CheckpointFileError


@pytest.fixture
def saved(tmp_path, tinyConfig):
    model = build(tinyConfig, seed=9)
    path = tmp_path / 'model.efpn'
    save_checkpoint(model, str(path), {'epoch': 4, 'classes': ['Background', 'Crack', 'Hole']})
    return model, path


def test_round_trip_is_exact(saved):
    model, path = saved
    loaded = load_checkpoint(str(path))
    assert loaded.config == model.config
    assert list(loaded.parameters) == list(model.parameters)
    for name, p in model.parameters.items():
        assert loaded.parameters[name].tensor.dtype == np.float32
        np.testing.assert_array_equal(loaded.parameters[name].tensor.data, p.tensor.data)
    assert loaded.metadata == {'epoch': 4, 'classes': ['Background', 'Crack', 'Hole']}


def test_loaded_model_predicts_identically(saved, rng):
    model, path = saved
    x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(load_checkpoint(str(path)).forward(x).data, model.forward(x).data)


def test_header_starts_with_magic_and_version(saved):
    data = saved[1].read_bytes()
    assert data[:4] == MAGIC
    assert struct.unpack('<I', data[4:8])[0] == 1


def test_truncated_file(saved):
    path = saved[1]
    data = path.read_bytes()
    for cut in (2, 10, len(data) - 3):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointFileError, match='truncated'):
            load_checkpoint(str(path))


def test_bad_magic(saved):
    path = saved[1]
    path.write_bytes(b'XXXX' + path.read_bytes()[4:])
    with pytest.raises(CheckpointFileError, match='magic'):
        load_checkpoint(str(path))


def test_unsupported_version(saved):
    path = saved[1]
    data = path.read_bytes()
    path.write_bytes(data[:4] + struct.pack('<I', 7) + data[8:])
    with pytest.raises(CheckpointFileError, match='version 7'):
        load_checkpoint(str(path))


def test_shape_mismatch_with_config(saved):
    path = saved[1]
    data = path.read_bytes()
    patched = data.replace(b'"num_classes": 3', b'"num_classes": 4', 1)
    assert patched != data
    path.write_bytes(patched)
    with pytest.raises(CheckpointFileError, match='classifier.weight has shape'):
        load_checkpoint(str(path))


def test_trailing_bytes(saved):
    path = saved[1]
    path.write_bytes(path.read_bytes() + b'\x00\x01')
    with pytest.raises(CheckpointFileError, match='2 trailing bytes'):
        load_checkpoint(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointFileError, match='cannot be read'):
        load_checkpoint(str(tmp_path / 'absent.efpn'))
