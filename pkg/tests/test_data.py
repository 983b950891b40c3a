import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayesdid.data import (
    NEVER,
    DiDSample,
    PanelDataset,
    StaggeredPanel,
    load_panel_csv,
    load_staggered_csv,
    staggered_transform,
    to_canonical,
    trim_by_propensity,
    trim_mask,
)
from bayesdid.exceptions import DataError, UnusableSampleError


def write(tmp_path, text, name="panel.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadPanelCsv:
    def test_three_rows(self, tmp_path):
        path = write(tmp_path, "y1,y2,d,x1\n1,2,1,0.5\n2,2,0,1.5\n3,5,0,-1\n")
        panel = load_panel_csv(path)
        assert (panel.n, panel.p) == (3, 1)
        np.testing.assert_array_equal(panel.y2, [2, 2, 5])
        np.testing.assert_array_equal(panel.d, [1, 0, 0])

    def test_nonbinary_treatment_names_row(self, tmp_path):
        path = write(tmp_path, "y1,y2,d,x1\n1,2,1,0\n2,2,2,1\n")
        with pytest.raises(DataError) as err:
            load_panel_csv(path)
        assert err.value.row == 2 and err.value.column == "d"
        assert "row 2" in str(err.value)

    def test_shuffled_columns_with_schema(self, tmp_path):
        a = write(tmp_path, "y1,y2,d,x1,x2\n1,2,1,0,3\n2,2,0,1,4\n0,1,0,2,5\n", "a.csv")
        b = write(tmp_path, "cov2,treat,post,cov1,pre\n3,1,2,0,1\n4,0,2,1,2\n5,0,1,2,0\n", "b.csv")
        pa = load_panel_csv(a)
        pb = load_panel_csv(b, {"y1": "pre", "y2": "post", "d": "treat", "x": ["cov1", "cov2"]})
        for f in ("y1", "y2", "d", "x"):
            np.testing.assert_array_equal(getattr(pa, f), getattr(pb, f))

    def test_covariates_ordered_numerically(self, tmp_path):
        path = write(tmp_path, "x10,y1,y2,d,x2\n10,0,0,1,2\n20,0,0,0,4\n")
        np.testing.assert_array_equal(load_panel_csv(path).x, [[2, 10], [4, 20]])

    @pytest.mark.parametrize("text,row,col", [
        ("y1,y2,d\n1,2,1\n1,x,0\n", 2, "y2"),
        ("y1,y2,d\n1,2,1\n1,,0\n", 2, "y2"),
        ("y1,d\n1,1\n2,0\n", None, "y2"),
    ])
    def test_errors_carry_location(self, tmp_path, text, row, col):
        with pytest.raises(DataError) as err:
            load_panel_csv(write(tmp_path, text))
        assert err.value.row == row and err.value.column == col

    def test_too_few_rows(self, tmp_path):
        with pytest.raises(DataError, match="at least 2"):
            load_panel_csv(write(tmp_path, "y1,y2,d\n1,2,1\n"))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError) as err:
            load_panel_csv(write(tmp_path, "y1,y2,d\n1,2,1\n1,2\n"))
        assert err.value.row == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="nope.csv"):
            load_panel_csv(tmp_path / "nope.csv")

    def test_unit_id(self, tmp_path):
        path = write(tmp_path, "id,y1,y2,d\na,1,2,1\nb,2,2,0\n")
        assert list(load_panel_csv(path, {"unit_id": "id"}).unit_id) == ["a", "b"]


class TestPanelTypes:
    def test_non_finite_covariate_rejected(self):
        with pytest.raises(DataError):
            PanelDataset(y1=[1, 2], y2=[1, 2], d=[0, 1], x=[[np.nan], [1]])

    def test_arrays_are_read_only(self):
        s = DiDSample(dy=[1.0, 2.0, 3.0], d=[1, 0, 0], x=np.zeros((3, 1)))
        with pytest.raises(ValueError):
            s.dy[0] = 5

    def test_counts(self):
        s = DiDSample(dy=[1.0, 2.0, 3.0, 4.0], d=[1, 0, 1, 0], x=np.zeros((4, 0)))
        assert (s.n_treated, s.n_control, s.p) == (2, 2, 0)


class TestToCanonical:
    def test_too_few_controls(self):
        panel = PanelDataset(y1=[1, 2], y2=[3, 2], d=[1, 0], x=np.zeros((2, 1)))
        with pytest.raises(UnusableSampleError):
            to_canonical(panel)

    def test_no_change(self):
        panel = PanelDataset(y1=[1, 2, 3], y2=[1, 2, 3], d=[1, 0, 0], x=np.zeros((3, 1)))
        np.testing.assert_array_equal(to_canonical(panel).dy, 0)

    def test_elementwise_difference(self, rng):
        y1, y2 = rng.normal(size=50), rng.normal(size=50)
        d = np.r_[np.ones(20), np.zeros(30)]
        s = to_canonical(PanelDataset(y1=y1, y2=y2, d=d, x=rng.normal(size=(50, 2))))
        np.testing.assert_array_equal(s.dy, np.array([b - a for a, b in zip(y1, y2)]))
        assert (s.n_treated, s.n_control) == (20, 30)


class TestTrim:
    def sample(self, n):
        return DiDSample(dy=np.arange(n, dtype=float), d=np.arange(n) % 2, x=np.zeros((n, 1)))

    def test_threshold_arithmetic(self):
        out = trim_by_propensity(self.sample(3), [0.99, 0.5, 0.96], 0.05)
        np.testing.assert_array_equal(out.dy, [1.0])

    def test_zero_threshold_drops_only_zero_scores(self):
        out = trim_by_propensity(self.sample(4), [0.0, 1.0, 0.3, 0.0], 0.0)
        np.testing.assert_array_equal(out.dy, [1.0, 2.0])

    def test_everything_dropped(self):
        with pytest.raises(UnusableSampleError):
            trim_by_propensity(self.sample(2), [0.99, 0.98], 0.05)

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.floats(0, 0.5))
    def test_nested_idempotent_order_preserving(self, ps, t):
        s = self.sample(len(ps))
        ps = np.array(ps)
        try:
            loose = trim_mask(ps, t / 5)
        except UnusableSampleError:
            return
        try:
            strict = trim_mask(ps, t)
        except UnusableSampleError:
            strict = np.zeros_like(loose)
        assert np.all(loose[strict])
        if strict.any():
            once = trim_by_propensity(s, ps, t)
            twice = trim_by_propensity(once, ps[strict], t)
            np.testing.assert_array_equal(once.dy, twice.dy)
            assert np.all(np.diff(once.dy) > 0)


class TestStaggered:
    def test_two_period_reduction_matches_canonical(self, rng):
        y = rng.normal(size=(10, 2))
        cohort = np.where(np.arange(10) < 4, 2.0, NEVER)
        x = rng.normal(size=(10, 1))
        st_sample = staggered_transform(StaggeredPanel(y=y, cohort=cohort, x=x), 2, 2)
        canon = to_canonical(PanelDataset(y1=y[:, 0], y2=y[:, 1], d=cohort == 2, x=x))
        for f in ("dy", "d", "x"):
            np.testing.assert_array_equal(getattr(st_sample, f), getattr(canon, f))

    def test_long_difference(self):
        y = np.array([[1, 4, 9], [0, 0, 0], [1, 1, 1], [2, 2, 5]], dtype=float)
        panel = StaggeredPanel(y=y, cohort=[3, NEVER, NEVER, 3], x=np.zeros((4, 0)))
        s = staggered_transform(panel, 3, 3)
        np.testing.assert_array_equal(s.dy, [5, 0, 0, 3])

    def test_other_cohorts_excluded(self):
        y = np.arange(18, dtype=float).reshape(6, 3) ** 2
        cohort = [2, 3, NEVER, 2, 3, NEVER]
        s = staggered_transform(StaggeredPanel(y=y, cohort=cohort, x=np.arange(6.0)[:, None]), 2, 3)
        np.testing.assert_array_equal(s.x.ravel(), [0, 2, 3, 5])
        np.testing.assert_array_equal(s.d, [1, 0, 1, 0])

    def test_needs_never_treated(self):
        panel = StaggeredPanel(y=np.zeros((3, 3)), cohort=[2, 3, 3], x=np.zeros((3, 0)))
        with pytest.raises(UnusableSampleError, match="never"):
            staggered_transform(panel, 2, 2)

    def test_invalid_cohort_label(self):
        with pytest.raises(DataError):
            StaggeredPanel(y=np.zeros((2, 3)), cohort=[1, NEVER], x=np.zeros((2, 0)))

    def test_csv(self, tmp_path):
        path = write(tmp_path, "t1,t2,t3,cohort,x1\n1,4,9,3,0\n0,0,0,never,1\n1,1,2,never,2\n")
        panel = load_staggered_csv(path)
        assert panel.n_periods == 3 and np.isposinf(panel.cohort[1])
        np.testing.assert_array_equal(staggered_transform(panel, 3, 3).dy, [5, 0, 1])
