import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camp.errors import DataError
from camp.models import (ENCODER_LAYERS, TABLE_I, TABLE_II, build, build_camp1, build_camp2,
                         checkpoint_bytes, checkpoint_name, count_parameters, load_checkpoint,
                         save_checkpoint, transfer_encoder_weights, verify_architecture)

CAMP1_COUNTS = [640, 18464, 9248, 18496, 577]
CAMP2_COUNTS = [640, 18464, 128, 4128, 128, 8256, 4194368, 65]


def test_camp1_counts_match_table():
    per_layer, total = count_parameters(build_camp1(seed=0))
    assert [c for _, c in per_layer] == CAMP1_COUNTS == [c for _, _, c in TABLE_I if c]
    assert total == 47425


def test_camp2_counts_match_table():
    m = build_camp2(seed=0)
    per_layer, total = count_parameters(m)
    assert [c for _, c in per_layer] == CAMP2_COUNTS == [c for _, _, c in TABLE_II if c]
    assert total == 4226177 == m.total_parameters()
    assert m.layer("flatten").out_shape == (65536,)


def test_camp1_full_scale_forward_shape(rng):
    y = build_camp1(seed=1).forward(rng.random((1, 256, 256)))
    assert y.shape == (1, 256, 256, 1)
    assert np.all((y.data > 0) & (y.data < 1))


@pytest.mark.parametrize("size", [8, 12, 32, 64])
def test_camp1_is_shape_preserving(size, rng):
    assert build_camp1(seed=0, size=size).forward(rng.random((2, size, size))).shape == (2, size, size, 1)


def test_camp2_output_is_probability(rng):
    m = build_camp2(seed=3, size=32).train()
    y = m.forward(rng.random((4, 32, 32)), rng=np.random.default_rng(0)).data
    assert y.shape == (4, 1) and np.all((y > 0) & (y < 1))


def test_same_seed_same_parameters():
    a, b, c = build_camp2(seed=9, size=32), build_camp2(seed=9, size=32), build_camp2(seed=10, size=32)
    for name in a.parameters:
        assert a.parameters[name].data.tobytes() == b.parameters[name].data.tobytes()
    assert a.parameters["conv1.kernel"].data.tobytes() != c.parameters["conv1.kernel"].data.tobytes()


def test_biases_zero_and_he_uniform_bounds():
    m = build_camp1(seed=0, size=16)
    for name, p in m.parameters.items():
        if name.endswith(".bias"):
            assert not p.data.any()
        else:
            k = p.shape
            assert np.abs(p.data).max() <= np.sqrt(6.0 / (k[0] * k[1] * k[2]))


def test_dropout_layers_optional():
    kinds = [s.kind for s in build_camp2(seed=0, size=32, dropout=0.25).layers]
    assert kinds.count("dropout") == 3
    strict = build_camp2(seed=0, size=32, dropout=0.0)
    assert "dropout" not in [s.kind for s in strict.layers]
    assert strict.total_parameters() == build_camp2(seed=0, size=32).total_parameters()


def test_bad_sizes_rejected():
    with pytest.raises(ValueError):
        build_camp1(size=30)
    with pytest.raises(ValueError):
        build_camp2(size=36)


def test_verify_architecture_catches_tampering():
    m = build_camp1(seed=0, size=16)
    m.layers[1].param_count += 1
    with pytest.raises(AssertionError):
        verify_architecture(m)


# --------------------------------------------------------------------------
# transfer
# --------------------------------------------------------------------------

def test_transfer_copies_encoder_only():
    src, dst = build_camp1(seed=1, size=32), build_camp2(seed=2, size=32)
    before = {n: p.data.copy() for n, p in dst.parameters.items()}
    transfer_encoder_weights(src, dst)
    for name, p in dst.parameters.items():
        if name.split(".")[0] in ENCODER_LAYERS:
            assert np.array_equal(p.data, src.parameters[name].data)
        else:
            assert np.array_equal(p.data, before[name])
    # copies, not aliases
    dst.parameters["conv1.kernel"].data[...] = 0
    assert src.parameters["conv1.kernel"].data.any()


def test_transfer_activations_equal(rng):
    src, dst = build_camp1(seed=4, size=32), build_camp2(seed=5, size=32)
    transfer_encoder_weights(src, dst)
    x = rng.random((3, 32, 32))
    a = src.eval().run(x, until="pool2")
    b = dst.eval().run(x, until="pool2")
    for layer in ("conv1_act", "pool1", "conv2_act", "pool2"):
        assert np.max(np.abs(a[layer].data - b[layer].data)) < 1e-6


def test_transfer_direction_and_shapes():
    with pytest.raises(ValueError):
        transfer_encoder_weights(build_camp2(size=32), build_camp1(size=32))
    with pytest.raises(ValueError, match="shape"):
        transfer_encoder_weights(build_camp1(size=32), _widened_camp2())


def _widened_camp2():
    m = build_camp2(size=32)
    p = m.parameters["conv1.kernel"]
    p.value.data = np.zeros((3, 3, 1, 65), dtype=p.data.dtype)
    return m


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    m = build_camp2(seed=77, size=32)
    m.parameters["bn1.running_mean"].data[...] = 0.125
    m.parameters["bn1.running_var"].data[...] = 3.5
    save_checkpoint(m, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.name == "camp2-32" and back.seed == 77
    for name, p in m.parameters.items():
        assert back.parameters[name].data.tobytes() == p.data.tobytes()
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert checkpoint_name(tmp_path / "a.ckpt") == "camp2-32"


def test_checkpoint_size_accounting():
    m = build_camp2(seed=0)
    raw = checkpoint_bytes(m)
    header = 4 + 2 + 4 + len("camp2-256") + 8 + 4
    per_tensor = sum(4 + len(n) + 1 + 4 * p.data.ndim for n, p in m.parameters.items())
    assert len(raw) == header + per_tensor + 4 * 4226177
    assert raw[:4] == b"CAMP"


def test_checkpoint_errors(tmp_path):
    save_checkpoint(build_camp1(seed=0, size=16), tmp_path / "ae.ckpt")
    with pytest.raises(DataError, match="expected"):
        load_checkpoint(tmp_path / "ae.ckpt", expected_name="camp2-16")
    raw = (tmp_path / "ae.ckpt").read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(DataError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\x00")
    with pytest.raises(DataError, match="trailing"):
        load_checkpoint(tmp_path / "long.ckpt")
    # a camp1 payload relabelled as camp2 disagrees on tensor count/shapes
    name = b"camp1-16"
    (tmp_path / "arch.ckpt").write_bytes(raw.replace(name, b"camp2-16", 1))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "arch.ckpt")


def test_build_by_name():
    assert build("camp1-32", seed=1, dropout=0.5).name == "camp1-32"
    with pytest.raises(DataError):
        build("camp3-32")


@settings(max_examples=10)
@given(st.integers(0, 2**64 - 1))
def test_checkpoint_keeps_full_seed(tmp_path_factory, seed):
    d = tmp_path_factory.mktemp("seed")
    save_checkpoint(build_camp1(seed=seed, size=8), d / "m.ckpt")
    assert load_checkpoint(d / "m.ckpt").seed == seed
