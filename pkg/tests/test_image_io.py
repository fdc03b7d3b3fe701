import json

import numpy as np
import pytest
from PIL import Image as PILImage
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from obalex.errors import IoError, ShapeMismatch, UnsupportedFormat
from obalex.image_io import (
    Image,
    decode_heatmap,
    encode_heatmap,
    load_heatmap,
    load_image,
    load_mask,
    mask_contour,
    read_dataset,
    render_overlay,
    resample_bilinear,
    save_heatmap,
    save_image,
    save_overlay,
    validate_dataset_dir,
    write_dataset,
)
from obalex.metric import ActivationMap, ExplanationMap
from obalex.synth import SynthSpec, generate


def write_png(path, array):
    PILImage.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


class TestLoad:
    def test_grayscale_bytes(self, tmp_path):
        p = write_png(tmp_path / "g.png", [[0, 255], [128, 64]])
        im = load_image(p)
        assert im.channels == 1
        np.testing.assert_array_equal(im.values[0], np.array([[0, 255], [128, 64]]) / 255)

    def test_rgb(self, tmp_path):
        p = write_png(tmp_path / "c.png", [[[255, 0, 0]]])
        im = load_image(p)
        assert im.channels == 3
        np.testing.assert_array_equal(im.values[:, 0, 0], [1.0, 0.0, 0.0])

    def test_truncated(self, tmp_path):
        p = write_png(tmp_path / "t.png", np.arange(64 * 64).reshape(64, 64) % 256)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(IoError):
            load_image(p)

    def test_missing(self, tmp_path):
        with pytest.raises(IoError):
            load_image(tmp_path / "nope.png")

    def test_unsupported_mode(self, tmp_path):
        p = tmp_path / "la.png"
        PILImage.new("LA", (2, 2)).save(p)
        with pytest.raises(UnsupportedFormat):
            load_image(p)

    def test_mask(self, tmp_path):
        p = write_png(tmp_path / "m.png", [[255, 0]])
        np.testing.assert_array_equal(load_mask(p).values, [[1.0, 0.0]])

    def test_zero_mask_is_legal(self, tmp_path):
        p = write_png(tmp_path / "m.png", np.zeros((3, 3)))
        assert not load_mask(p).values.any()

    def test_rgb_mask_rejected(self, tmp_path):
        p = write_png(tmp_path / "m.png", np.zeros((2, 2, 3)))
        with pytest.raises(UnsupportedFormat):
            load_mask(p)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.sampled_from([1, 3]), st.integers(1, 9), st.integers(1, 9)),
                  elements=st.floats(0, 1)))
    def test_round_trip_within_one_level(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("rt") / "x.png"
        save_image(p, Image(values))
        back = load_image(p).values
        assert back.shape == values.shape
        assert np.abs(back - values).max() <= 1 / 255


class TestHeatmap:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 1)))
    def test_codec_within_one_code(self, values):
        codes, scale = encode_heatmap(values)
        back = decode_heatmap(codes, scale)
        assert np.abs(back - values).max() <= scale / 65535

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.uniform(size=(17, 13))
        values[3, 4] = 1.0
        save_heatmap(tmp_path / "h.png", values, "img7")
        back, meta = load_heatmap(tmp_path / "h.png")
        assert meta == {"image_id": "img7", "scale": 1.0}
        assert np.abs(back - values).max() <= 1 / 65535
        assert json.loads((tmp_path / "h.json").read_text())["image_id"] == "img7"

    def test_raw_scale_preserved(self, tmp_path):
        values = np.array([[0.0, 3.5], [7.0, 1.0]])
        save_heatmap(tmp_path / "h.png", values, "a")
        back, meta = load_heatmap(tmp_path / "h.png")
        assert meta["scale"] == 7.0
        assert np.abs(back - values).max() <= 7.0 / 65535

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            encode_heatmap([[-1.0, 1.0]])


class TestResample:
    def test_constant(self):
        np.testing.assert_array_equal(resample_bilinear([[0.3]], 4, 5), np.full((4, 5), 0.3))

    def test_middle_column(self):
        out = resample_bilinear([[0, 1], [0, 1]], 2, 3)
        np.testing.assert_array_equal(out, [[0, 0.5, 1], [0, 0.5, 1]])

    def test_identity(self):
        g = np.random.default_rng(1).normal(size=(5, 6))
        np.testing.assert_array_equal(resample_bilinear(g, 5, 6), g)

    def test_corner_aligned(self):
        g = np.random.default_rng(2).normal(size=(4, 3))
        out = resample_bilinear(g, 10, 7)
        for (i, j), (k, l) in [((0, 0), (0, 0)), ((0, -1), (0, -1)), ((-1, 0), (-1, 0)), ((-1, -1), (-1, -1))]:
            assert out[i, j] == g[k, l]

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-5, 5)),
           st.integers(1, 20), st.integers(1, 20))
    def test_range_preserved(self, g, h, w):
        out = resample_bilinear(g, h, w)
        assert out.shape == (h, w)
        assert out.min() >= g.min() and out.max() <= g.max()

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            resample_bilinear([[1.0]], 0, 3)


class TestOverlay:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.image = Image(rng.uniform(size=(1, 6, 6)))
        m = np.zeros((6, 6))
        m[1:5, 1:5] = 1.0
        self.mask = ActivationMap(m)

    def test_zero_explanation_keeps_pixels_except_contour(self):
        out = render_overlay(self.image, ExplanationMap(np.zeros((6, 6))), self.mask, None)
        contour = mask_contour(self.mask)
        base = np.repeat(self.image.values, 3, axis=0)
        np.testing.assert_array_equal(out.values[:, ~contour], base[:, ~contour])
        assert (out.values[:, contour].T == [0.0, 1.0, 0.0]).all()
        assert contour.sum() == 12  # ring of a 4x4 square

    def test_blend_formula(self):
        b = np.zeros((6, 6))
        b[0, 0] = 1.0
        out = render_overlay(self.image, ExplanationMap(b), self.mask, 0.3)
        orig = self.image.values[0, 0, 0]
        assert out.values[0, 0, 0] == pytest.approx(0.5 * orig + 0.5)
        assert out.values[1, 0, 0] == pytest.approx(0.5 * orig)
        assert out.metadata["obalex_score"] == 0.3

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            render_overlay(self.image, ExplanationMap(np.zeros((5, 6))), self.mask, 0.0)

    def test_score_in_png_text(self, tmp_path):
        out = render_overlay(self.image, ExplanationMap(np.ones((6, 6))), self.mask, 0.25)
        save_overlay(tmp_path / "o.png", out)
        assert PILImage.open(tmp_path / "o.png").text["obalex_score"] == "0.25"


class TestDatasetDir:
    def test_round_trip(self, tmp_path):
        samples = generate(SynthSpec(samples_per_class=3, noise_std=0.0))
        write_dataset(tmp_path / "ds", samples)
        assert validate_dataset_dir(tmp_path / "ds") == []
        back = read_dataset(tmp_path / "ds")
        assert [s.image_id for s in back] == [s.image_id for s in samples]
        assert [s.label for s in back] == [s.label for s in samples]
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.mask.values, b.mask.values)
            assert np.abs(a.image.values - b.image.values).max() <= 1 / 255
        assert (tmp_path / "ds" / "labels.csv").read_text().startswith("id,label\n")

    def test_validation_reports_missing(self, tmp_path):
        samples = generate(SynthSpec(samples_per_class=1))
        write_dataset(tmp_path / "ds", samples)
        (tmp_path / "ds" / "masks" / f"{samples[0].image_id}.png").unlink()
        problems = validate_dataset_dir(tmp_path / "ds")
        assert len(problems) == 1 and "masks" in problems[0]
