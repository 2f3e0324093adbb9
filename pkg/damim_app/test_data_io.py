"""
数据读写测试：检查点格式、PPM 解析、数据集目录、合成数据与扁平配置
"""

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from modules.checkpoint import (
    HEADER,
    MAGIC,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from modules.config_loader import load_config, parse_flat_config
from modules.dataset import LabeledDataset
from modules.errors import (
    CheckpointCorruptionError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    DataError,
    PPMParseError,
    ShapeError,
)
from modules.image_loader import load_images, parse_ppm, save_dataset, to_uint8
from modules.synthetic_data import SyntheticSpec, generate_synthetic
from modules.trainer import PretrainModel, TrainConfig


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


# ---------------------------------------------------------------- 检查点

arrays_strategy = st.dictionaries(
    keys=st.text(min_size=1, max_size=12),
    values=hnp.arrays(
        dtype=st.sampled_from([np.float32, np.float64]),
        shape=hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
        elements=st.floats(allow_nan=True, allow_infinity=True, width=32),
    ),
    max_size=5,
)


@settings(max_examples=50, deadline=None)
@given(arrays=arrays_strategy)
def test_checkpoint_round_trip_is_bitwise(arrays):
    loaded = load_checkpoint(save_checkpoint(arrays))
    assert list(loaded) == sorted(arrays)
    for name, array in arrays.items():
        assert loaded[name].dtype == array.dtype
        assert loaded[name].shape == array.shape
        assert loaded[name].tobytes() == np.ascontiguousarray(array).tobytes()


def test_checkpoint_bytes_do_not_depend_on_insertion_order():
    a = {"x": np.ones(2, np.float32), "y": np.zeros((1, 2))}
    b = {"y": np.zeros((1, 2)), "x": np.ones(2, np.float32)}
    assert save_checkpoint(a) == save_checkpoint(b)


def test_empty_checkpoint():
    payload = save_checkpoint({})
    assert len(payload) == HEADER.size + 4 == 17
    assert payload.startswith(MAGIC)
    assert load_checkpoint(payload) == {}


@pytest.mark.parametrize("position", [0, 9, 20, -6, -1])
def test_bit_flip_is_detected(position):
    payload = bytearray(save_checkpoint({"w": np.arange(6, dtype=np.float32)}))
    payload[position] ^= 0x10
    with pytest.raises(CheckpointCorruptionError):
        load_checkpoint(bytes(payload))


def test_too_short_payload():
    with pytest.raises(CheckpointCorruptionError):
        load_checkpoint(save_checkpoint({})[:16])


def test_unknown_version_is_refused():
    body = save_checkpoint({"w": np.ones(3)})[:-4]
    body = MAGIC + struct.pack("<H", 2) + body[len(MAGIC) + 2:]
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(with_crc(body))


def test_truncated_body_with_valid_crc():
    body = save_checkpoint({"w": np.ones(3)})[:-4]
    with pytest.raises(CheckpointCorruptionError, match="截断"):
        load_checkpoint(with_crc(body[:-4]))


def test_trailing_bytes_with_valid_crc():
    body = save_checkpoint({"w": np.ones(3)})[:-4]
    with pytest.raises(CheckpointCorruptionError, match="多余"):
        load_checkpoint(with_crc(body + b"\x00\x00"))


def test_save_rejects_duplicates_and_unsupported_dtypes():
    with pytest.raises(ContractError):
        save_checkpoint([("a", np.ones(1)), ("a", np.zeros(1))])
    with pytest.raises(ContractError):
        save_checkpoint({"ints": np.arange(3)})


def test_model_state_round_trip(tmp_path, tiny_config):
    source = PretrainModel(tiny_config(seed=1))
    path = tmp_path / "ckpt" / "model.damim"
    write_checkpoint(path, source.state_arrays())
    restored = PretrainModel(tiny_config(seed=9))
    restored.load_state_arrays(read_checkpoint(path))
    for (name, a), (_, b) in zip(source.named_parameters(), restored.named_parameters()):
        assert np.array_equal(a.data, b.data), name


# ---------------------------------------------------------------- PPM

def test_parse_small_ppm():
    raster = bytes(range(0, 240, 20))
    image = parse_ppm(b"P6\n2 2\n255\n" + raster)
    assert image.shape == (2, 2, 3)
    assert image.dtype == np.float32
    np.testing.assert_allclose(image.reshape(-1), np.frombuffer(raster, np.uint8) / 255.0, rtol=1e-6)
    np.testing.assert_allclose(image[0, 1], np.array([60, 80, 100]) / 255.0, rtol=1e-6)


def test_parse_sixteen_bit_ppm():
    samples = np.array([0, 65535, 32768, 1, 2, 3], dtype=">u2")
    image = parse_ppm(b"P6 2 1 65535\n" + samples.tobytes())
    np.testing.assert_allclose(image.reshape(-1), samples.astype(np.float64) / 65535.0, rtol=1e-6)


def test_parse_ppm_with_comments():
    image = parse_ppm(b"P6\n# made by hand\n1 1\n# depth\n255\n" + bytes([255, 0, 51]))
    np.testing.assert_allclose(image[0, 0], [1.0, 0.0, 0.2], rtol=1e-6)


@pytest.mark.parametrize("data, offset", [
    (b"P3\n1 1\n255\n\x00\x00\x00", 0),
    (b"P6\n1 1\n255\n\x00\x00", 13),
    (b"P6\n1 1\n70000\n\x00\x00\x00", 6),
    (b"P6\nx 1\n255\n\x00\x00\x00", 3),
])
def test_ppm_errors_carry_offsets(data, offset):
    with pytest.raises(PPMParseError) as excinfo:
        parse_ppm(data)
    assert excinfo.value.offset == offset
    assert isinstance(excinfo.value, DataError)


# ---------------------------------------------------------------- 数据集目录

def test_save_and_load_dataset(tmp_path, tiny_domains):
    dataset = tiny_domains.domain_b.subset(np.arange(0, 40, 4))
    save_dataset(dataset, tmp_path / "B")
    loaded = load_images(tmp_path / "B")
    assert len(loaded) == 10
    assert loaded.domain == "B"
    assert loaded.filenames[0] == "B_00000_c0.ppm"
    np.testing.assert_array_equal(loaded.labels, dataset.labels)
    np.testing.assert_allclose(loaded.images, to_uint8(dataset.images) / 255.0, atol=1e-7)


def test_grayscale_is_written_as_rgb(tmp_path):
    dataset = LabeledDataset(np.full((1, 2, 2, 1), 0.5), [3], domain="g")
    save_dataset(dataset, tmp_path)
    loaded = load_images(tmp_path)
    assert loaded.images.shape == (1, 2, 2, 3)
    assert loaded.labels.tolist() == [3]


def test_save_rejects_unsupported_channel_count(tmp_path):
    dataset = LabeledDataset(np.zeros((1, 2, 2, 4)), [0], domain="rgba")
    with pytest.raises(ShapeError):
        save_dataset(dataset, tmp_path)
    assert not (tmp_path / "labels.csv").exists()


def test_empty_labels_give_empty_dataset(tmp_path):
    (tmp_path / "labels.csv").write_text("filename,class_index\n")
    assert len(load_images(tmp_path)) == 0


def test_missing_files_are_listed(tmp_path):
    (tmp_path / "labels.csv").write_text("a.ppm,0\nb.ppm,1\n")
    with pytest.raises(DataError, match="2 个图像文件缺失"):
        load_images(tmp_path)


def test_missing_labels_file(tmp_path):
    with pytest.raises(DataError):
        load_images(tmp_path / "nowhere")


def test_bad_class_index(tmp_path):
    (tmp_path / "labels.csv").write_text("a.ppm,cat\n")
    with pytest.raises(DataError):
        load_images(tmp_path)


def test_dataset_validation():
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((2, 2, 2, 3)), [0])
    with pytest.raises(DataError):
        LabeledDataset(np.full((1, 2, 2, 3), np.inf), [0])


# ---------------------------------------------------------------- 合成数据

def test_synthetic_domains(tiny_domains):
    a, b = tiny_domains.domain_a, tiny_domains.domain_b
    assert len(a) == len(b) == 40
    assert np.array_equal(a.labels, b.labels)
    assert sorted(a.classes.tolist()) == [0, 1, 2, 3, 4]
    assert tiny_domains.unclamped_mean_gap == pytest.approx(0.3, abs=0.02)
    for images in (a.images, b.images):
        assert images.min() >= 0.0 and images.max() <= 1.0
    assert not np.allclose(a.images, b.images)


def test_synthetic_generation_is_seeded():
    spec = SyntheticSpec(image_size=8, per_class=2)
    first, second = generate_synthetic(spec, seed=3), generate_synthetic(spec, seed=3)
    assert np.array_equal(first.domain_a.images, second.domain_a.images)
    assert np.array_equal(first.domain_b.images, second.domain_b.images)
    assert not np.array_equal(first.domain_a.images, generate_synthetic(spec, seed=4).domain_a.images)


@pytest.mark.parametrize("channels", [2, 4])
def test_synthetic_spec_rejects_channels_other_than_gray_or_rgb(channels):
    with pytest.raises(ValueError):
        SyntheticSpec(channels=channels)


def test_synthetic_spec_accepts_comma_lists():
    spec = SyntheticSpec(channel_gains="1.0, 0.5, 0.25", channel_permutation="1,2,0")
    assert spec.channel_gains == (1.0, 0.5, 0.25)
    assert spec.channel_permutation == (1, 2, 0)
    with pytest.raises(ValueError):
        SyntheticSpec(channel_permutation="0,0,1")


# ---------------------------------------------------------------- 扁平配置

def test_parse_flat_config(caplog):
    text = "# comment\n\nsteps = 10\nregime=pixel\nsteps = 20\n"
    with caplog.at_level("WARNING"):
        values = parse_flat_config(text)
    assert values == {"steps": "20", "regime": "pixel"}
    assert "重复" in caplog.text


@pytest.mark.parametrize("text", ["steps 10", " = 3"])
def test_parse_flat_config_errors(text):
    with pytest.raises(ConfigError):
        parse_flat_config(text)


def test_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("steps = 10\nbatch_size = 8\nregime = pixel\n")
    config = load_config(TrainConfig, path, {"steps": 3, "regime": None})
    assert (config.steps, config.batch_size, config.regime) == (3, 8, "pixel")
    assert config.mask_ratio == 0.75


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("stpes = 10\n")
    with pytest.raises(ConfigError, match="stpes"):
        load_config(TrainConfig, path)
    with pytest.raises(ConfigError):
        load_config(TrainConfig, tmp_path / "missing.cfg")
