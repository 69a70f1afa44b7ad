import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowrefine.errors import FlowFormatError, TruncatedFileError
from flowrefine.flow_io import (
    decode_flo,
    decode_kitti_png,
    encode_flo,
    encode_kitti_png,
    flow_to_color,
    flow_to_hsv,
    read_flo,
    read_flow,
    read_image,
    read_kitti_png,
    write_flo,
    write_image,
    write_kitti_png,
)
from flowrefine.png import decode_png, encode_png


class TestPng:
    @pytest.mark.parametrize("dtype", [np.uint8, np.uint16])
    @pytest.mark.parametrize("channels", [1, 2, 3, 4])
    def test_round_trip(self, rng, dtype, channels):
        px = rng.integers(0, np.iinfo(dtype).max, size=(5, 7, channels), endpoint=True).astype(dtype)
        out = decode_png(encode_png(px))
        assert out.dtype == dtype
        np.testing.assert_array_equal(out, px)

    def test_deterministic_bytes(self, rng):
        px = rng.integers(0, 255, size=(4, 4, 3)).astype(np.uint8)
        assert encode_png(px) == encode_png(px.copy())

    @pytest.mark.parametrize("shape", [(9, 13, 3), (6, 5, 4), (8, 8)])
    def test_decodes_filtered_images_from_pillow(self, rng, tmp_path, shape):
        Image = pytest.importorskip("PIL.Image")
        # smooth content makes the encoder pick Sub/Up/Average/Paeth filters
        yy, xx = np.mgrid[: shape[0], : shape[1]]
        base = (yy * 17 + xx * 29) % 256
        px = (base[..., None] + rng.integers(0, 3, size=shape if len(shape) == 3 else shape + (1,))) % 256
        px = px.astype(np.uint8).reshape(shape)
        Image.fromarray(px).save(tmp_path / "x.png", optimize=True)
        np.testing.assert_array_equal(decode_png((tmp_path / "x.png").read_bytes()).reshape(shape), px)

    def test_decodes_16bit_from_opencv(self, rng, tmp_path):
        cv2 = pytest.importorskip("cv2")
        px = rng.integers(0, 65535, size=(6, 9, 3)).astype(np.uint16)
        px[:, :, 0] = np.arange(9) * 1000  # smooth channel
        cv2.imwrite(str(tmp_path / "k.png"), px[..., ::-1])
        np.testing.assert_array_equal(decode_png((tmp_path / "k.png").read_bytes()), px)

    def test_our_output_reads_in_pillow(self, rng):
        Image = pytest.importorskip("PIL.Image")
        import io

        px = rng.integers(0, 255, size=(5, 6, 3)).astype(np.uint8)
        np.testing.assert_array_equal(np.asarray(Image.open(io.BytesIO(encode_png(px)))), px)

    def test_bad_signature(self):
        with pytest.raises(FlowFormatError):
            decode_png(b"GIF89a" + b"\0" * 40)

    def test_truncated(self, rng):
        blob = encode_png(rng.integers(0, 255, size=(4, 4, 3)).astype(np.uint8))
        with pytest.raises(TruncatedFileError):
            decode_png(blob[:-20])

    def test_crc_mismatch(self, rng):
        blob = bytearray(encode_png(rng.integers(0, 255, size=(4, 4, 3)).astype(np.uint8)))
        blob[20] ^= 0xFF  # inside IHDR payload
        with pytest.raises(FlowFormatError):
            decode_png(bytes(blob))

    def test_interlaced_rejected(self):
        ihdr = struct.pack(">IIBBBBB", 1, 1, 8, 0, 0, 0, 1)
        chunk = lambda k, p: struct.pack(">I", len(p)) + k + p + struct.pack(">I", zlib.crc32(k + p) & 0xFFFFFFFF)
        blob = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(b"\0\0")) + chunk(b"IEND", b"")
        with pytest.raises(FlowFormatError, match="interlaced"):
            decode_png(blob)

    @settings(max_examples=200, deadline=None)
    @given(st.binary(max_size=200))
    def test_garbage_never_crashes(self, blob):
        try:
            decode_png(b"\x89PNG\r\n\x1a\n" + blob)
        except FlowFormatError:
            pass


class TestFlo:
    def test_one_pixel_layout(self, tmp_path):
        write_flo(tmp_path / "a.flo", np.zeros((1, 1, 2), dtype=np.float32))
        blob = (tmp_path / "a.flo").read_bytes()
        assert len(blob) == 20
        assert blob[:4] == b"PIEH"
        assert struct.unpack("<ii", blob[4:12]) == (1, 1)

    def test_ramp_round_trip(self, tmp_path):
        ys, xs = np.mgrid[0:3, 0:4].astype(np.float32)
        arr = np.stack([xs * 0.25, -ys * 1.5], axis=-1)
        write_flo(tmp_path / "r.flo", arr)
        back = read_flo(tmp_path / "r.flo")
        assert back.shape == (1, 2, 3, 4)
        assert back.to_hw2().tobytes() == arr.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)), elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
    def test_bitwise_round_trip(self, arr):
        blob = encode_flo(arr)
        assert encode_flo(decode_flo(blob)) == blob
        assert decode_flo(blob).to_hw2().tobytes() == arr.tobytes()

    def test_bad_magic(self):
        blob = bytearray(encode_flo(np.zeros((2, 2, 2), np.float32)))
        blob[0] ^= 1
        with pytest.raises(FlowFormatError, match="magic"):
            decode_flo(bytes(blob))

    @pytest.mark.parametrize("cut", [0, 5, 11, 12, 30])
    def test_truncated(self, cut):
        blob = encode_flo(np.zeros((2, 3, 2), np.float32))
        with pytest.raises(TruncatedFileError):
            decode_flo(blob[:cut])

    def test_implausible_header(self):
        blob = struct.pack("<fii", 202021.25, -1, 4)
        with pytest.raises(FlowFormatError):
            decode_flo(blob)

    def test_trailing_bytes(self):
        with pytest.raises(FlowFormatError):
            decode_flo(encode_flo(np.zeros((1, 1, 2), np.float32)) + b"\0")


class TestKittiPng:
    def test_offset_identity(self):
        px = np.full((1, 1, 3), 2 ** 15, dtype=np.uint16)
        px[..., 2] = 1
        f = decode_kitti_png(encode_png(px))
        assert f.to_hw2().tolist() == [[[0.0, 0.0]]]

    def test_one_pixel_unit(self):
        px = np.array([[[2 ** 15 + 64, 2 ** 15 - 128, 1]]], dtype=np.uint16)
        assert decode_kitti_png(encode_png(px)).to_hw2().tolist() == [[[1.0, -2.0]]]

    def test_validity_channel(self, tmp_path):
        valid = np.array([[True, False, True]])
        write_kitti_png(tmp_path / "k.png", np.zeros((1, 3, 2)), valid=valid)
        f = read_kitti_png(tmp_path / "k.png")
        np.testing.assert_array_equal(f.valid[0, 0], valid)

    def test_round_trip_representable(self, rng, tmp_path):
        q = rng.integers(-30000, 30000, size=(4, 5, 2)) / 64.0
        valid = rng.random((4, 5)) > 0.2
        write_kitti_png(tmp_path / "k.png", q, valid=valid)
        f = read_flow(tmp_path / "k.png")
        np.testing.assert_array_equal(f.to_hw2(), q)
        np.testing.assert_array_equal(f.valid[0, 0], valid)
        assert encode_kitti_png(f) == (tmp_path / "k.png").read_bytes()

    def test_quantizes_to_sixty_fourths(self):
        f = decode_kitti_png(encode_kitti_png(np.array([[[0.3, -0.01]]])))
        np.testing.assert_array_equal(f.to_hw2(), [[[19 / 64, -1 / 64]]])

    def test_wrong_depth(self):
        with pytest.raises(FlowFormatError, match="16-bit"):
            decode_kitti_png(encode_png(np.zeros((2, 2, 3), np.uint8)))

    def test_wrong_channels(self):
        with pytest.raises(FlowFormatError, match="3 channels"):
            decode_kitti_png(encode_png(np.zeros((2, 2, 4), np.uint16)))

    def test_unknown_extension(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"")
        with pytest.raises(FlowFormatError):
            read_flow(tmp_path / "x.bin")


class TestImages:
    def test_rgb_round_trip(self, rng, tmp_path):
        img = rng.integers(0, 255, size=(4, 6, 3)).astype(np.uint8)
        write_image(tmp_path / "i.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "i.png"), img)

    def test_gray_and_alpha_become_rgb(self, tmp_path):
        write_image(tmp_path / "g.png", np.full((2, 2), 7, np.uint8))
        assert read_image(tmp_path / "g.png").shape == (2, 2, 3)
        (tmp_path / "a.png").write_bytes(encode_png(np.full((2, 2, 4), 9, np.uint8)))
        np.testing.assert_array_equal(read_image(tmp_path / "a.png"), np.full((2, 2, 3), 9))

    def test_float_images_are_quantized(self, tmp_path):
        write_image(tmp_path / "f.png", np.array([[[0.0, 0.5, 1.0]]]))
        assert read_image(tmp_path / "f.png").tolist() == [[[0, 128, 255]]]


class TestColor:
    def test_zero_field_is_white(self):
        assert np.all(flow_to_color(np.zeros((3, 4, 2))) == 255)

    def test_antipodal_vectors_complementary(self, rng):
        for _ in range(20):
            u, v = rng.normal(size=2)
            hsv = flow_to_hsv(np.array([[[u, v], [-u, -v]]]), max_magnitude=10.0)
            dh = abs(hsv[0, 0, 0] - hsv[0, 1, 0])
            assert dh == pytest.approx(0.5, abs=1e-12)
            rgb = flow_to_color(np.array([[[u, v], [-u, -v]]]), max_magnitude=float(np.hypot(u, v)))
            # fully saturated complementary colors sum to white per channel
            assert np.all(np.abs(rgb[0, 0].astype(int) + rgb[0, 1] - 255) <= 1)

    def test_doubling_flow_doubles_saturation_until_clipped(self, rng):
        f = rng.uniform(-1, 1, size=(4, 4, 2))
        s1 = flow_to_hsv(f, max_magnitude=3.0)[..., 1]
        s2 = flow_to_hsv(2 * f, max_magnitude=3.0)[..., 1]
        np.testing.assert_allclose(s2, np.minimum(2 * s1, 1.0), rtol=1e-12)

    def test_direction_hues(self):
        hsv = flow_to_hsv(np.array([[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]]))
        np.testing.assert_allclose(hsv[0, :, 0], [0.0, 0.25, 0.5, 0.75], atol=1e-12)
