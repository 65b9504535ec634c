"""Parameter store, SGD with momentum, and the binary tensor format."""

import numpy as np
import pytest

from labeldistill.params import MissingGradientError, ParameterStore, sgd_update
from labeldistill.serialize import load_tensors, save_tensors
from labeldistill.train import TrainConfig


def test_plain_gradient_step():
    st = ParameterStore()
    p = st.add("w", np.array([2.0]))
    p.grad = np.array([0.5])
    sgd_update(st, lr=1.0, momentum=0.0, weight_decay=0.0)
    assert np.allclose(p.data, [1.5])
    assert p.grad is None


def test_two_momentum_steps_unroll():
    # v1 = g, w1 = -g; v2 = 0.9 g + g, w2 = -(g + 1.9 g) = -2.9 g
    st = ParameterStore()
    p = st.add("w", np.zeros(3))
    g = np.array([0.5, -1.0, 2.0])
    for _ in range(2):
        p.grad = g.copy()
        sgd_update(st, lr=1.0, momentum=0.9, weight_decay=0.0)
    assert np.allclose(p.data, -2.9 * g)


def test_weight_decay_enters_velocity():
    st = ParameterStore()
    p = st.add("w", np.array([10.0]))
    p.grad = np.array([0.0])
    sgd_update(st, lr=0.1, momentum=0.0, weight_decay=0.01)
    assert np.allclose(p.data, 10.0 - 0.1 * (0.01 * 10.0))


def test_default_hyperparameters():
    tc = TrainConfig()
    assert tc.momentum == 0.9
    assert tc.weight_decay == 1e-4


def test_frozen_entries_untouched():
    st = ParameterStore()
    a = st.add("frozen.w", np.array([1.0]))
    b = st.add("live.w", np.array([1.0]))
    b.grad = np.array([1.0])
    sgd_update(st, lr=0.5, momentum=0.0, weight_decay=0.0, frozen={"frozen.w"})
    assert a.data[0] == 1.0
    assert np.allclose(st._momentum["frozen.w"], 0.0)
    assert b.data[0] == 0.5


def test_missing_gradient_rejected():
    st = ParameterStore()
    st.add("w", np.array([1.0]))
    with pytest.raises(MissingGradientError):
        sgd_update(st, lr=0.1, momentum=0.9, weight_decay=0.0)


def test_duplicate_name_rejected():
    st = ParameterStore()
    st.add("w", np.ones(2))
    with pytest.raises(ValueError):
        st.add("w", np.ones(2))


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "student.backbone.block1.w": rng.normal(size=(3, 3, 3, 16)),
        "head.cls.b": rng.normal(size=(3,)),
        "scalar": np.array(4.25),
    }
    path = tmp_path / "t.bin"
    save_tensors(path, arrays)
    back = load_tensors(path)
    assert sorted(back) == sorted(arrays)
    for name in arrays:
        assert back[name].shape == np.asarray(arrays[name]).shape
        assert np.array_equal(back[name], arrays[name])


def test_serialization_layout_is_little_endian(tmp_path):
    path = tmp_path / "one.bin"
    save_tensors(path, {"ab": np.array([1.0, 2.0])})
    blob = path.read_bytes()
    # u64 name length, name bytes, u64 rank, u64 extent, two f64 values
    assert blob[:8] == (2).to_bytes(8, "little")
    assert blob[8:10] == b"ab"
    assert blob[10:18] == (1).to_bytes(8, "little")
    assert blob[18:26] == (2).to_bytes(8, "little")
    assert np.frombuffer(blob[26:42], dtype="<f8").tolist() == [1.0, 2.0]


def test_serialization_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {f"t{i}": rng.normal(size=(4, 4)) for i in range(5)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(p1, dict(sorted(arrays.items(), reverse=True)))
    save_tensors(p2, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_arrays_shape_mismatch():
    st = ParameterStore()
    st.add("w", np.ones((2, 2)))
    with pytest.raises(ValueError):
        st.load_arrays({"w": np.ones((3, 3))})
    with pytest.raises(KeyError):
        st.load_arrays({"w": np.ones((2, 2)), "extra": np.ones(1)})
    with pytest.raises(KeyError):
        st.load_arrays({})
