import numpy as np
import pytest

from fcncascade import tensor_nn as tn
from fcncascade.cascade import stage1_net
from fcncascade.imageio import (
    ImageFormatError, decode_pnm, encode_pnm, read_image, write_image, write_scoremap_csv,
    write_scoremap_pgm,
)
from fcncascade.pyramid import (
    DegenerateImage, EmptyPyramid, PyramidConfig, build_pyramid, crop_resize, resize, run_streams,
    scaled_size,
)
from fcncascade.synth import SynthParams, quantize, read_dataset, synth_dataset, write_dataset


class TestResize:
    def test_identity_copy(self):
        img = np.random.default_rng(0).random((7, 9, 3))
        out = resize(img, 9, 7)
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_constant_preserved(self):
        out = resize(np.full((13, 17, 3), 0.4), 40, 29)
        np.testing.assert_allclose(out, 0.4)

    def test_halving_averages_pairs(self):
        img = np.random.default_rng(1).random((8, 8, 3))
        out = resize(img, 4, 4)
        ref = img.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_linear_ramp_exact(self):
        ramp = np.tile(np.arange(20.0)[None, :, None], (5, 1, 3))
        out = crop_resize(ramp, (4, 0, 10, 5), 20, 5)
        # sample centres at 4 + (j + 0.5) / 2 - 0.5
        np.testing.assert_allclose(out[0, :, 0], 4 + (np.arange(20) + 0.5) / 2 - 0.5)


class TestPyramid:
    def test_levels_and_scales(self):
        img = np.zeros((300, 400, 3))
        levels = build_pyramid(img)
        assert [max(lv.size) for lv in levels] == [600, 400, 260, 170, 100, 60]
        for lv in levels:
            assert lv.original_size == (400, 300)
            assert lv.scale_factor == pytest.approx(max(lv.size) / 400)

    def test_upscale_cap(self):
        levels = build_pyramid(np.zeros((50, 60, 3)))
        assert max(levels[0].size) == 100

    def test_portrait(self):
        assert scaled_size(300, 600, 300) == (150, 300, 0.5)

    def test_degenerate(self):
        with pytest.raises(DegenerateImage):
            build_pyramid(np.zeros((5, 100, 3)))
        with pytest.raises(DegenerateImage):
            build_pyramid(np.zeros((50, 50)))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            PyramidConfig((100, 200))

    def test_small_levels_skipped(self):
        net = tn.init_network(stage1_net(), 0)
        streams = run_streams(net, build_pyramid(np.zeros((40, 40, 3)), PyramidConfig((80, 40, 20))))
        assert [max(s.level.size) for s in streams] == [80, 40]
        with pytest.raises(EmptyPyramid):
            run_streams(net, build_pyramid(np.zeros((20, 20, 3)), PyramidConfig((20,))))

    def test_stream_matches_net_forward(self):
        net = tn.init_network(stage1_net(), 1)
        img = np.random.default_rng(2).random((90, 120, 3))
        s = run_streams(net, build_pyramid(img, PyramidConfig((120,))))[0]
        np.testing.assert_allclose(s.heatmap, tn.net_forward(net, img)[:, :, 0], rtol=1e-12)


class TestPnm:
    def test_round_trip(self, tmp_path):
        img = np.rint(np.random.default_rng(3).random((11, 13, 3)) * 255) / 255
        write_image(img, tmp_path / "a.ppm")
        np.testing.assert_allclose(read_image(tmp_path / "a.ppm"), img, atol=1e-12)

    def test_grey_replicated_and_comments(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5\n# hi\n2 1\n# there\n255\n\x00\xff")
        img = read_image(tmp_path / "g.pgm")
        assert img.shape == (1, 2, 3)
        np.testing.assert_array_equal(img[0, 1], [1, 1, 1])

    def test_maxval_scaling(self):
        raw, maxval = decode_pnm(b"P5 1 1 15\n\x0f")
        assert maxval == 15 and raw[0, 0, 0] == 15

    @pytest.mark.parametrize("data", [b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n255\n\x00", b"P6\n2", b"P6\nx 2\n255\n",
                                      b"P6\n1 1\n65535\n\x00\x00"])
    def test_rejects(self, data):
        with pytest.raises(ImageFormatError):
            decode_pnm(data)

    def test_red_pixel(self, tmp_path):
        (tmp_path / "r.ppm").write_bytes(b"P6\n1 1\n255\n\xff\x00\x00")
        np.testing.assert_array_equal(read_image(tmp_path / "r.ppm"), [[[1.0, 0.0, 0.0]]])

    def test_grey_gradient(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5\n2 2\n255\n\x00\x55\xaa\xff")
        img = read_image(tmp_path / "g.pgm")
        assert img.shape == (2, 2, 3)
        np.testing.assert_array_equal(img[..., 0], img[..., 2])
        np.testing.assert_allclose(img[..., 1].ravel(), [0, 1 / 3, 2 / 3, 1])

    def test_byte_round_trip(self, tmp_path):
        body = np.random.default_rng(9).integers(0, 256, 5 * 7 * 3, dtype=np.uint8).tobytes()
        original = b"P6\n7 5\n255\n" + body
        (tmp_path / "a.ppm").write_bytes(original)
        write_image(read_image(tmp_path / "a.ppm"), tmp_path / "b.ppm")
        assert (tmp_path / "b.ppm").read_bytes() == original

    def test_encode_header(self):
        assert encode_pnm(np.zeros((2, 3, 3))).startswith(b"P6\n3 2\n255\n")

    def test_scoremap_dumps(self, tmp_path):
        v = np.array([[0.0, 1.5], [3.0, 0.75]])
        scale = write_scoremap_pgm(v, tmp_path / "s.pgm")
        data = (tmp_path / "s.pgm").read_bytes()
        grey = np.frombuffer(data[-8:], dtype=">u2").reshape(2, 2)
        np.testing.assert_allclose(grey * scale, v, atol=scale)
        assert grey.max() == 65535
        write_scoremap_csv(v, tmp_path / "s.csv")
        back = np.loadtxt(tmp_path / "s.csv", delimiter=",")
        np.testing.assert_array_equal(back, v)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(7, 4), synth_dataset(7, 4)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            assert x.image_id == y.image_id and x.boxes == y.boxes
            np.testing.assert_array_equal(x.image, y.image)

    def test_boxes_valid(self):
        ann, bg = synth_dataset(3, 12)
        assert len(ann) == 12 and len(bg) == 3
        for a in ann:
            h, w = a.image.shape[:2]
            assert 320 <= max(h, w) <= 480
            assert 1 <= len(a.boxes) <= 3
            for x, y, bw, bh in a.boxes:
                assert bw == bh and 30 <= bw <= min(300, 0.7 * min(h, w))
                assert x >= 0 and y >= 0 and x + bw <= w and y + bh <= h
        assert all(not b.boxes for b in bg)

    def test_faces_respect_params(self):
        ann, _ = synth_dataset(4, 6, SynthParams(faces=(2, 2), face_side=(40, 50)))
        assert all(len(a.boxes) == 2 and all(40 <= b[2] <= 50 for b in a.boxes) for a in ann)

    def test_disk_round_trip(self, tmp_path):
        ann, bg = synth_dataset(5, 3)
        quantize(ann)
        quantize(bg)
        write_dataset(tmp_path, ann, bg)
        ann2, bg2 = read_dataset(tmp_path)
        assert [a.image_id for a in ann2] == [a.image_id for a in ann]
        assert len(bg2) == len(bg)
        for a, b in zip(ann, ann2):
            assert a.boxes == b.boxes
            np.testing.assert_allclose(a.image, b.image, atol=1e-12)
