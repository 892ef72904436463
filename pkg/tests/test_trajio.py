import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trispace.trajio import (DataError, NormParams, Trajectory, fit_normalizer, pad_and_mask, parse_labels,
                             parse_points, write_labels, write_points)

HEADER = "traj_id,t,lon,lat,speed,heading,event\n"


def _parse(text, **kw):
    return parse_points(io.StringIO(text, newline=""), **kw)


def test_two_rows_group_into_one_trajectory():
    res = _parse(HEADER + "a,0,113,22,10,90,0\na,10,113.1,22.1,12,95,0\n")
    assert len(res.trajectories) == 1
    assert len(res.trajectories[0]) == 2


def test_rows_are_sorted_by_time_within_a_trajectory():
    res = _parse(HEADER + "a,10,1,1,1,1,0\nb,0,1,1,1,1,0\na,0,2,2,2,2,0\n")
    a = next(t for t in res.trajectories if t.id == "a")
    assert a.points[:, 0].tolist() == [0.0, 10.0]
    assert a.points[0, 1] == 2.0


def test_bad_event_code_is_rejected_with_line_number():
    res = _parse(HEADER + "a,0,1,1,1,1,0\na,5,1,1,1,1,7\n")
    assert len(res.trajectories[0]) == 1
    assert [i.line for i in res.issues] == [3]
    assert "event" in res.issues[0].message


@pytest.mark.parametrize("row, fragment", [
    ("a,0,1,1,1,1", "fields"),
    ("a,x,1,1,1,1,0", "non-numeric"),
    ("a,0,1,1,-3,1,0", "speed"),
    ("a,0,1,1,1,360,0", "heading"),
    ("a,0,nan,1,1,1,0", "non-finite"),
])
def test_malformed_rows_are_reported(row, fragment):
    res = _parse(HEADER + "a,1,1,1,1,1,0\n" + row + "\n")
    assert len(res.issues) == 1
    assert res.issues[0].line == 3
    assert fragment in res.issues[0].message


def test_strict_mode_raises_on_first_bad_row():
    with pytest.raises(DataError, match="line 2"):
        _parse(HEADER + "a,0,1,1,1,1,9\n", strict=True)


def test_duplicate_timestamps_keep_first_and_are_counted():
    res = _parse(HEADER + "a,0,1,1,1,1,0\na,0,2,2,2,2,0\na,0,3,3,3,3,0\n")
    assert res.n_duplicates == 2
    assert res.trajectories[0].points[0, 1] == 1.0


def test_trajectories_without_valid_rows_are_dropped():
    res = _parse(HEADER + "a,0,1,1,1,1,0\nb,0,1,1,1,1,8\n")
    assert [t.id for t in res.trajectories] == ["a"]
    assert res.n_dropped == 1


def test_wrong_header_is_a_data_error():
    with pytest.raises(DataError, match="header"):
        _parse("id,t\n")


def test_crlf_and_bytes_input_are_accepted():
    raw = (HEADER + "a,0,1,1,1,1,0\n").replace("\n", "\r\n").encode()
    assert len(parse_points(raw).trajectories) == 1
    assert len(parse_points(io.BytesIO(raw)).trajectories) == 1


def test_labels_and_regions_attach_to_trajectories():
    labels = parse_labels(io.StringIO("traj_id,arrival_time,region\na,120.5,north\n"))
    res = _parse(HEADER + "a,0,1,1,1,1,0\n", labels=labels)
    assert res.trajectories[0].label == 120.5
    assert res.trajectories[0].region == "north"


def test_round_trip_is_bit_identical(small_trajs):
    buf, lab = io.StringIO(), io.StringIO()
    write_points(small_trajs, buf)
    write_labels(small_trajs, lab)
    lab.seek(0)
    back = parse_points(io.StringIO(buf.getvalue()), labels=lab).trajectories
    by_id = {t.id: t for t in back}
    for tr in small_trajs:
        other = by_id[tr.id]
        assert np.array_equal(tr.points, other.points)
        assert tr.label == other.label and tr.region == other.region
    buf2 = io.StringIO()
    write_points(back, buf2)
    assert buf2.getvalue() == buf.getvalue()


def test_unsorted_trajectory_is_rejected():
    with pytest.raises(DataError):
        Trajectory("x", np.array([[5, 0, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0]], float))


def _traj(tid, speeds, label=None):
    n = len(speeds)
    pts = np.zeros((n, 6))
    pts[:, 0] = np.arange(n) * 10.0
    pts[:, 3] = speeds
    return Trajectory(tid, pts, label)


def test_constant_feature_normalizes_to_half():
    norm = fit_normalizer([_traj("a", [50, 50, 50])])
    x = norm.transform(_traj("a", [50, 50, 50]).offsets())
    assert np.all(x[:, 3] == 0.5)


def test_speed_extremes_map_to_zero_and_one():
    norm = fit_normalizer([_traj("a", [0, 100])])
    x = norm.transform(_traj("a", [0, 100]).offsets())
    assert x[:, 3].tolist() == [0.0, 1.0]


def test_empty_training_set_is_an_error():
    with pytest.raises(DataError):
        fit_normalizer([])


def test_normalizer_serialization_round_trip():
    norm = fit_normalizer([_traj("a", [3, 7], label=10.0), _traj("b", [1, 9], label=30.0)])
    back = NormParams.from_dict(norm.to_dict())
    assert np.array_equal(back.mins, norm.mins) and back.label_max == 30.0
    assert np.allclose(norm.inverse_labels(norm.transform_labels([10.0, 20.0, 30.0])), [10, 20, 30])


def test_mean_padding_and_mask():
    tr = _traj("a", [10, 20, 60])
    norm = fit_normalizer([tr])
    tt = pad_and_mask([tr], norm, cap=5)
    assert tt.mask[0].tolist() == [True, True, True, False, False]
    observed = tt.values[0, :3]
    assert np.allclose(tt.values[0, 3], observed.mean(axis=0))
    assert np.allclose(tt.values[0, 4], observed.mean(axis=0))
    assert tt.values.shape == (1, 5, 6)


def test_truncation_keeps_first_cap_points():
    tr = _traj("a", np.arange(7) * 10.0)
    norm = fit_normalizer([tr])
    tt = pad_and_mask([tr], norm, cap=5)
    assert tt.mask.all()
    assert np.allclose(tt.values[0, :, 3], norm.transform(tr.offsets()[:5])[:, 3])


trajectory_sets = st.lists(
    st.lists(st.tuples(st.floats(0, 100), st.floats(-1, 1), st.floats(0, 120), st.floats(0, 359.9),
                       st.integers(0, 5)), min_size=1, max_size=12),
    min_size=1, max_size=5)


def _build(raw):
    trajs = []
    for i, rows in enumerate(raw):
        pts = np.array([[10.0 * j + r[0] / 1000, 113 + r[1], 22 - r[1], r[2], r[3], r[4]]
                        for j, r in enumerate(rows)])
        trajs.append(Trajectory(f"t{i}", pts))
    return trajs


@given(trajectory_sets)
def test_training_cells_normalize_into_unit_interval(raw):
    trajs = _build(raw)
    norm = fit_normalizer(trajs)
    tt = pad_and_mask(trajs, norm, cap=12)
    observed = tt.values[tt.mask]
    assert observed.min() >= 0.0 and observed.max() <= 1.0


@given(trajectory_sets)
def test_padding_preserves_per_feature_means(raw):
    trajs = _build(raw)
    tt = pad_and_mask(trajs, fit_normalizer(trajs), cap=12)
    for i in range(len(trajs)):
        m = tt.mask[i]
        full = tt.values[i].mean(axis=0)
        obs = tt.values[i, m].mean(axis=0)
        assert np.allclose(full, obs, rtol=1e-9, atol=1e-12)


@given(trajectory_sets)
def test_observed_cells_are_only_normalized(raw):
    trajs = _build(raw)
    norm = fit_normalizer(trajs)
    tt = pad_and_mask(trajs, norm, cap=12)
    for i, tr in enumerate(trajs):
        assert np.array_equal(tt.values[i, : len(tr)], norm.transform(tr.offsets()))
