import warnings

import numpy as np
import pytest

from tfanet.backbone import (
    BackboneConfig,
    FeaturePyramid,
    FrozenBackbone,
    export_features,
    fuse,
    import_features,
)
from tfanet.config import preset
from tfanet.datakit.formats import FormatError, write_tensor
from tfanet.numerics import DimensionError


@pytest.fixture
def image():
    return np.random.default_rng(0).normal(size=(64, 64, 3))


def test_stride_arithmetic_for_unit_stem(image):
    cfg = BackboneConfig(stages=((8, 1), (16, 2), (32, 2)), kernel_size=3)
    pyr = FrozenBackbone(cfg).extract(image)
    assert pyr.shapes() == [(64, 64, 8), (32, 32, 16), (16, 16, 32)]
    fm = fuse(pyr)
    assert fm.shape == (64, 64, 56)


def test_desk_preset_fuses_to_16x16(image):
    st = preset("desk")
    fm = FrozenBackbone(st.backbone).fused(image)
    assert fm.shape == (16, 16, 56) == (st.embed.height, st.embed.width, st.embed.channels)


def test_full_preset_channel_layout():
    st = preset("full")
    assert st.backbone.fused_shape(256, 256) == (64, 64, 1856)
    assert [s[:2] for s in st.backbone.level_shapes(256, 256)] == [(64, 64), (64, 64), (32, 32), (16, 16)]


def test_deterministic(image):
    cfg = BackboneConfig(seed=3)
    a, b = FrozenBackbone(cfg).extract(image), FrozenBackbone(cfg).extract(image)
    assert all(np.array_equal(x, y) for x, y in zip(a.levels, b.levels))


def test_divisibility_error_names_stage():
    cfg = BackboneConfig(stages=((4, 2), (4, 4)))
    with pytest.raises(DimensionError, match="stage 1"):
        FrozenBackbone(cfg).extract(np.zeros((12, 12, 3)))


def test_needs_two_levels():
    with pytest.raises(ValueError):
        BackboneConfig(stages=((8, 1),))


def test_channel_partition_and_level1_untouched(image):
    pyr = FrozenBackbone(BackboneConfig()).extract(image)
    fm = fuse(pyr)
    ranges = [(s, e) for _, s, e in fm.channel_offsets]
    assert ranges[0][0] == 0 and ranges[-1][1] == fm.shape[2]
    assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
    assert np.array_equal(fm.level(0), pyr.levels[0])
    assert fm.shape[:2] == pyr.levels[0].shape[:2]


def test_duplicated_level_gives_identical_copies():
    lvl = np.random.default_rng(1).normal(size=(4, 4, 3))
    fm = fuse(FeaturePyramid([lvl, lvl.copy()]))
    assert np.array_equal(fm.data[..., :3], fm.data[..., 3:])


def test_reference_extractor_shapes_fuse_to_1856():
    # stem + three stages of a wide-resnet at 256 x 256 input
    shapes = [(64, 64, 64), (64, 64, 256), (32, 32, 512), (16, 16, 1024)]
    pyr = FeaturePyramid([np.zeros(s) for s in shapes])
    assert fuse(pyr).shape == (64, 64, 1856)


def test_export_import_round_trip(tmp_path, image):
    fm = FrozenBackbone(BackboneConfig()).fused(image, "template")
    fm.data = fm.data.astype(np.float32).astype(np.float64)
    export_features(fm, tmp_path / "f.ten")
    back = import_features(tmp_path / "f.ten")
    assert np.array_equal(back.data, fm.data)
    assert back.channel_offsets == fm.channel_offsets
    assert back.source == "template"


def test_import_rejects_two_axis(tmp_path):
    write_tensor(tmp_path / "x.ten", np.zeros((4, 4)))
    with pytest.raises(FormatError):
        import_features(tmp_path / "x.ten")


def test_import_truncated_reports_byte_counts(tmp_path):
    write_tensor(tmp_path / "x.ten", np.zeros((2, 2, 2)))
    buf = (tmp_path / "x.ten").read_bytes()
    (tmp_path / "x.ten").write_bytes(buf[:-6])
    with pytest.raises(FormatError, match=r"expected \d+ bytes, found \d+"):
        import_features(tmp_path / "x.ten")


def test_missing_sidecar_warns_and_defaults(tmp_path):
    write_tensor(tmp_path / "x.ten", np.ones((2, 2, 5)))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        fm = import_features(tmp_path / "x.ten")
    assert rec and fm.channel_offsets == [(0, 0, 5)]


def test_weights_are_read_only():
    bb = FrozenBackbone(BackboneConfig())
    with pytest.raises(ValueError):
        bb.kernels[0][0, 0, 0, 0] = 1.0
