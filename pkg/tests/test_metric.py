import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from obalex.errors import EmptyExplanation, NoCorrectClassifications, ShapeMismatch
from obalex.metric import (
    ActivationMap,
    ExplanationMap,
    ScoredImage,
    avg_score,
    mask_from_gray,
    normalize_explanation,
    score,
)


def naive_score(a, b):
    """Double-loop evaluation of sum(a*b) / sum(b)."""
    num = 0.0
    den = 0.0
    for i in range(len(a)):
        for j in range(len(a[0])):
            num += float(a[i][j]) * float(b[i][j])
            den += float(b[i][j])
    return num / den


unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def mask_and_explanation(draw, max_side=16):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    a = draw(arrays(np.float64, (h, w), elements=unit))
    raw = draw(arrays(np.float64, (h, w), elements=st.floats(-1.0, 10.0, allow_nan=False)))
    raw.flat[draw(st.integers(0, h * w - 1))] = draw(st.floats(0.01, 10.0))
    return ActivationMap(a), normalize_explanation(raw)


class TestScore:
    def test_hand_case(self):
        a = ActivationMap([[1, 0], [0, 1]])
        b = np.array([[0.5, 0.5], [0, 1]])
        assert score(a, b) == 0.75

    def test_full_coverage(self):
        b = normalize_explanation([[0.2, 3.0], [1.0, 0.0]])
        assert score(ActivationMap(np.ones((2, 2))), b) == 1.0

    def test_disjoint(self):
        assert score(ActivationMap([[1, 0]]), ExplanationMap([[0, 1]])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            score(ActivationMap(np.ones((2, 2))), ExplanationMap(np.ones((2, 3))))

    def test_empty_explanation_raises(self):
        with pytest.raises(EmptyExplanation):
            score(ActivationMap(np.ones((2, 2))), ExplanationMap(np.zeros((2, 2))))

    @settings(max_examples=200, deadline=None)
    @given(mask_and_explanation())
    def test_range_and_oracle(self, pair):
        a, b = pair
        s = score(a, b)
        assert 0.0 <= s <= 1.0
        assert s == pytest.approx(naive_score(a.values, b.values), rel=1e-12, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(mask_and_explanation())
    def test_full_mask_identity(self, pair):
        _, b = pair
        assert score(np.ones(b.shape), b) == 1.0

    @settings(max_examples=200, deadline=None)
    @given(mask_and_explanation(), st.data())
    def test_moving_mass_inside_never_lowers_score(self, pair, data):
        a, b = pair
        binary = (a.values >= 0.5).astype(float)
        inside = np.flatnonzero(binary)
        outside = np.flatnonzero(binary == 0)
        if len(inside) == 0 or len(outside) == 0:
            return
        i = data.draw(st.sampled_from(list(inside)))
        o = data.draw(st.sampled_from(list(outside)))
        moved = b.values.copy().ravel()
        delta = min(moved[o], 1.0 - moved[i])
        moved[o] -= delta
        moved[i] += delta
        before = score(binary, b)
        after = score(binary, moved.reshape(b.shape))
        assert after >= before - 1e-12

    @pytest.mark.parametrize("c", [2.0, 0.25, 1024.0])
    def test_power_of_two_scaling_is_exact(self, c):
        rng = np.random.default_rng(3)
        raw = rng.uniform(-1, 5, size=(9, 7))
        a = ActivationMap(rng.uniform(size=(9, 7)))
        assert score(a, normalize_explanation(c * raw)) == score(a, normalize_explanation(raw))

    @pytest.mark.parametrize("c", [3.0, 0.1, 7.77e5])
    def test_general_scaling_to_rounding(self, c):
        rng = np.random.default_rng(4)
        raw = rng.uniform(-1, 5, size=(9, 7))
        a = ActivationMap(rng.uniform(size=(9, 7)))
        s1 = score(a, normalize_explanation(c * raw))
        assert s1 == pytest.approx(score(a, normalize_explanation(raw)), rel=1e-14)

    def test_accepts_float32_storage(self):
        a = np.array([[1, 0], [0, 1]], dtype=np.float32)
        b = np.array([[0.5, 0.5], [0, 1]], dtype=np.float32)
        assert score(a, b) == 0.75


class TestAvgScore:
    def test_two_correct(self):
        r = avg_score([ScoredImage("x", 0.2, True), ScoredImage("y", 0.8, True)])
        assert (r.avg_score, r.n_correct, r.n_total) == (0.5, 2, 2)

    def test_excludes_wrong(self):
        r = avg_score([ScoredImage(1, 0.4, True), ScoredImage(2, 0.9, False), ScoredImage(3, 0.6, True)])
        assert r.avg_score == pytest.approx(0.5, abs=1e-15)
        assert (r.n_correct, r.n_total) == (2, 3)

    def test_single(self):
        assert avg_score([ScoredImage(0, 0.75, True)]).avg_score == 0.75

    def test_no_correct(self):
        with pytest.raises(NoCorrectClassifications):
            avg_score([ScoredImage(0, 0.5, False)])
        with pytest.raises(NoCorrectClassifications):
            avg_score([])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(unit, min_size=1, max_size=20), st.lists(unit, max_size=20))
    def test_wrong_entries_do_not_matter(self, good, bad):
        base = [ScoredImage(i, s, True) for i, s in enumerate(good)]
        noisy = base + [ScoredImage(-1 - i, s, False) for i, s in enumerate(bad)]
        r0, r1 = avg_score(base), avg_score(noisy)
        assert r0.avg_score == r1.avg_score
        assert r0.n_correct == r1.n_correct
        assert r1.n_total == len(good) + len(bad)

    def test_score_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ScoredImage(0, 1.5, True)


class TestNormalize:
    def test_rescale(self):
        np.testing.assert_array_equal(normalize_explanation([[2, 4]]).values, [[0.5, 1.0]])

    def test_clamp(self):
        np.testing.assert_array_equal(normalize_explanation([[-1, 2]]).values, [[0.0, 1.0]])

    def test_all_zero(self):
        e = normalize_explanation([[0, 0]])
        assert e.is_empty
        np.testing.assert_array_equal(e.values, [[0.0, 0.0]])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
    def test_max_exactly_one(self, raw):
        e = normalize_explanation(raw)
        assert e.values.min() >= 0.0
        assert e.values.max() == (1.0 if (raw > 0).any() else 0.0)


class TestMaskFromGray:
    def test_binary(self):
        np.testing.assert_array_equal(mask_from_gray(np.array([[255, 0]], dtype=np.uint8)).values, [[1.0, 0.0]])

    def test_fuzzy(self):
        assert mask_from_gray(np.array([[128]], dtype=np.uint8)).values[0, 0] == pytest.approx(0.50196, abs=1e-5)

    def test_all_object(self):
        assert (mask_from_gray(np.full((3, 4), 255, dtype=np.uint8)).values == 1.0).all()


class TestTypes:
    def test_mask_range_checked(self):
        with pytest.raises(ValueError):
            ActivationMap([[1.5]])

    def test_explanation_peak_checked(self):
        with pytest.raises(ValueError):
            ExplanationMap([[0.5, 0.2]])

    def test_immutable(self):
        m = ActivationMap([[1.0]])
        with pytest.raises(ValueError):
            m.values[0, 0] = 0.0
