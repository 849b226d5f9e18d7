import math
import struct
from pathlib import Path

import numpy as np
import pytest

from costmap_racer.exceptions import InvalidInputError, MapFormatError, TruncatedPayloadError
from costmap_racer.models.geometry import Centerline, Pose2D
from costmap_racer.models.maps import PatchSpec, SchematicMap
from costmap_racer.services.schematic_map import (
    MAP_HEADER,
    build_map,
    decode_map,
    encode_map,
    extract_local_patch,
    extract_local_patches,
    load_centerline,
    load_map,
    patch_offsets,
    query_cost,
    query_costs,
    save_centerline,
    save_map,
)


@pytest.mark.unit
class TestBuildMap:
    def test_geometry_of_rectangle_map(self, rectangle_map: SchematicMap):
        """Extent covers the loop plus margin; cell (0, 0) sits on the lower-left corner."""
        assert rectangle_map.origin_x == -3.0
        assert rectangle_map.origin_y == -3.0
        assert rectangle_map.width_px == 26 * 5 + 1
        assert rectangle_map.height_px == 16 * 5 + 1
        assert rectangle_map.cost.dtype == np.float32

    def test_cost_zero_on_centerline(self, rectangle_map: SchematicMap):
        """Cells centred on the centerline cost 0."""
        assert query_cost(rectangle_map, 5.0, 0.0) == pytest.approx(0.0, abs=1e-6)
        assert query_cost(rectangle_map, 20.0, 4.0) == pytest.approx(0.0, abs=1e-6)

    def test_cost_ramps_linearly_to_halfwidth(self, rectangle_map: SchematicMap):
        """One meter off a straight is half the 2 m halfwidth."""
        assert query_cost(rectangle_map, 10.0, 1.0) == pytest.approx(0.5, abs=1e-6)

    def test_cost_saturates_off_track(self, rectangle_map: SchematicMap):
        assert query_cost(rectangle_map, 10.0, 5.0) == 1.0

    def test_outside_map_costs_one(self, rectangle_map: SchematicMap):
        """Points beyond the raster footprint read as cost 1."""
        assert query_cost(rectangle_map, 100.0, 100.0) == 1.0
        values, valid = query_costs(rectangle_map, np.array([-50.0, 5.0]), np.array([0.0, 0.0]))
        assert values[0] == 1.0
        assert not valid[0]
        assert valid[1]

    def test_kdtree_method_close_to_exact(self, rectangle_centerline: Centerline):
        """The approximate distance transform stays within a fraction of a cell of the exact one."""
        exact = build_map(rectangle_centerline, resolution=5.0, method="exact")
        approx = build_map(rectangle_centerline, resolution=5.0, method="kdtree")
        assert np.max(np.abs(exact.cost - approx.cost)) < 0.05

    def test_ramp_exponent_shapes_cost(self, rectangle_centerline: Centerline):
        squared = build_map(rectangle_centerline, resolution=5.0, ramp_exponent=2.0)
        assert query_cost(squared, 10.0, 1.0) == pytest.approx(0.25, abs=1e-6)

    @pytest.mark.parametrize(
        "kwargs",
        [{"resolution": 0.0}, {"track_halfwidth": -1.0}, {"extent_margin": -0.5}, {"ramp_exponent": 0.0}],
    )
    def test_invalid_parameters_rejected(self, rectangle_centerline: Centerline, kwargs):
        with pytest.raises(InvalidInputError):
            build_map(rectangle_centerline, **kwargs)

    def test_unknown_method_rejected(self, rectangle_centerline: Centerline):
        with pytest.raises(InvalidInputError):
            build_map(rectangle_centerline, method="magic")


@pytest.mark.unit
class TestLocalPatches:
    def test_pixel_offsets_follow_egocentric_convention(self):
        """Row 0 is farthest ahead and the centre column lies on the heading line."""
        spec = PatchSpec(width_px=4, height_px=3, resolution=2.0, longitudinal_offset=1.0)
        forward, left = patch_offsets(spec)
        forward = forward.reshape(spec.shape)
        left = left.reshape(spec.shape)
        assert forward[0, 0] == pytest.approx(1.0 + 2.5 / 2.0)
        assert forward[-1, 0] == pytest.approx(1.0 + 0.5 / 2.0)
        assert left[0, 2] == 0.0
        assert left[0, 0] == pytest.approx(1.0)
        assert left[0, 3] == pytest.approx(-0.5)

    def test_patch_on_straight_is_left_right_symmetric(self, rectangle_map: SchematicMap):
        """Driving along the bottom straight, columns mirrored about the centre see the same cost."""
        spec = PatchSpec(width_px=41, height_px=20, resolution=8.0)
        patch = extract_local_patch(rectangle_map, Pose2D(6.0, 0.0, 0.0), spec)
        np.testing.assert_allclose(patch.values[:, :20], patch.values[:, 21:][:, ::-1], atol=1e-6)
        assert patch.validity.all()

    def test_batched_extraction_matches_single(self, rectangle_map: SchematicMap):
        spec = PatchSpec()
        poses = np.array([[5.0, 0.0, 0.0], [20.0, 5.0, math.pi / 2], [-2.9, 8.0, 2.0]])
        values, valid = extract_local_patches(rectangle_map, poses, spec)
        for row, pose in enumerate(poses):
            single = extract_local_patch(rectangle_map, Pose2D(*pose), spec)
            np.testing.assert_array_equal(values[row], single.values)
            np.testing.assert_array_equal(valid[row], single.validity)

    def test_patch_leaving_map_marks_invalid(self, rectangle_map: SchematicMap):
        """Pixels off the raster are flagged invalid and read as cost 1."""
        patch = extract_local_patch(rectangle_map, Pose2D(20.0, 5.0, 0.0), PatchSpec())
        assert not patch.validity.all()
        assert np.all(patch.values[~patch.validity] == 1.0)


@pytest.mark.unit
class TestMapCodec:
    def test_round_trip_is_bit_exact(self, rectangle_map: SchematicMap):
        """Decoding an encoded map gives back an equal map."""
        assert decode_map(encode_map(rectangle_map)) == rectangle_map

    def test_file_round_trip(self, tiny_map: SchematicMap, tmp_path: Path):
        path = tmp_path / "tiny.smap"
        save_map(tiny_map, path)
        assert load_map(path) == tiny_map

    def test_bad_magic_reports_offset_zero(self, tiny_map: SchematicMap):
        data = b"XMAP" + encode_map(tiny_map)[4:]
        with pytest.raises(MapFormatError) as exc_info:
            decode_map(data)
        assert exc_info.value.offset == 0

    def test_unsupported_version_reports_offset_four(self, tiny_map: SchematicMap):
        data = bytearray(encode_map(tiny_map))
        data[4:8] = struct.pack("<I", 99)
        with pytest.raises(MapFormatError) as exc_info:
            decode_map(bytes(data))
        assert exc_info.value.offset == 4

    def test_short_header(self, tiny_map: SchematicMap):
        with pytest.raises(MapFormatError) as exc_info:
            decode_map(encode_map(tiny_map)[:10])
        assert exc_info.value.offset == 10

    def test_truncated_payload(self, tiny_map: SchematicMap):
        """A payload shorter than width x height floats raises TruncatedPayloadError."""
        with pytest.raises(TruncatedPayloadError) as exc_info:
            decode_map(encode_map(tiny_map)[:-4])
        assert exc_info.value.expected == 48
        assert exc_info.value.actual == 44

    def test_trailing_bytes_rejected(self, tiny_map: SchematicMap):
        with pytest.raises(MapFormatError) as exc_info:
            decode_map(encode_map(tiny_map) + b"\x00" * 4)
        assert exc_info.value.offset == MAP_HEADER.size + 48

    def test_cost_out_of_range_rejected(self, tiny_map: SchematicMap):
        data = bytearray(encode_map(tiny_map))
        data[MAP_HEADER.size : MAP_HEADER.size + 4] = struct.pack("<f", 1.5)
        with pytest.raises(MapFormatError):
            decode_map(bytes(data))


@pytest.mark.unit
class TestCenterlineFiles:
    def test_save_and_load(self, rectangle_centerline: Centerline, tmp_path: Path):
        path = tmp_path / "centerline.txt"
        save_centerline(rectangle_centerline, path)
        assert load_centerline(path) == rectangle_centerline

    def test_unparseable_file(self, tmp_path: Path):
        """Garbage in a centerline file surfaces as InvalidInputError."""
        path = tmp_path / "bad.txt"
        path.write_text("0 0\n1 one\n2 2\n")
        with pytest.raises(InvalidInputError):
            load_centerline(path)
