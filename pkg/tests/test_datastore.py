import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from precipext.datastore import (
    CatchmentPolygon,
    CubeFormatError,
    GridGeometry,
    PrecipCube,
    filter_months,
    load_cube,
    preprocess,
    recombine,
    split_intensity_occurrence,
    write_cube,
    zero_proportion_table,
)
from precipext.synthetic import SyntheticTruth, constant_marginal, flat_probit, generate_synthetic


def make_cube(values, nx=2, ny=None, mask=None, kind="precip"):
    values = np.asarray(values, float)
    ny = ny or values.shape[1] // nx
    n_t = values.shape[0]
    return PrecipCube(GridGeometry(nx, ny), np.arange(n_t), 152 + np.arange(n_t) // 24,
                      np.full(n_t, 6), values, mask, kind)


def test_grid_index_roundtrip():
    g = GridGeometry(7, 4)
    idx = np.arange(g.n_sites)
    r, c = g.rowcol(idx)
    assert np.array_equal(g.index(r, c), idx)
    with pytest.raises(IndexError):
        g.rowcol(g.n_sites)
    with pytest.raises(ValueError):
        GridGeometry(0, 3)
    with pytest.raises(ValueError):
        GridGeometry(2, 3, cell_size=0)


def test_coords_are_cell_centres():
    g = GridGeometry(3, 2, cell_size=2.0, origin=(10.0, -4.0))
    assert np.allclose(g.coords[0], [11.0, -3.0])
    assert np.allclose(g.coords[5], [15.0, -1.0])
    assert np.allclose(g.distances_from(0)[1], 2.0)


def test_neighbors4_edges():
    g = GridGeometry(3, 3)
    nb = g.neighbors4()
    assert sorted(nb[4].tolist()) == [1, 3, 5, 7]
    assert (nb[0] >= 0).sum() == 2


def test_cube_all_ones_roundtrip(tmp_path):
    cube = make_cube(np.ones((3, 4)))
    assert cube.observed().sum() == 12
    for fmt in ("columnar-text", "binary-grid"):
        p = tmp_path / f"c.{fmt}"
        write_cube(cube, p, fmt)
        back = load_cube(p)
        assert back.equals(cube)


def test_negative_value_rejected_with_location(tmp_path):
    with pytest.raises(CubeFormatError, match="time row 1, site 2"):
        make_cube([[0, 0, 0, 0], [0, 0, -0.1, 0]])
    cube = make_cube(np.ones((2, 4)))
    p = tmp_path / "c.txt"
    write_cube(cube, p, "columnar-text")
    text = p.read_text().replace("1 152 6 2 1.0", "1 152 6 2 -0.1")
    p.write_text(text)
    with pytest.raises(CubeFormatError, match="site 2"):
        load_cube(p)


def test_nonmonotone_time_rejected():
    with pytest.raises(CubeFormatError, match="strictly increasing"):
        PrecipCube(GridGeometry(1, 1), [0, 2, 1], [1, 1, 1], [6, 6, 6], np.ones((3, 1)))


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# precipext-cube v1\nnx 2\ncolumns hour day month site value\n")
    with pytest.raises(CubeFormatError, match="header"):
        load_cube(p)
    p.write_bytes(b"PXCUBE01garbage")
    with pytest.raises(CubeFormatError):
        load_cube(p)


def test_missing_values_roundtrip(tmp_path):
    v = np.array([[np.nan, 0.5, 0.0, 2.0]])
    cube = make_cube(v, mask=[True, True, False, True])
    for fmt in ("columnar-text", "binary-grid"):
        write_cube(cube, tmp_path / "x", fmt)
        back = load_cube(tmp_path / "x")
        assert back.equals(cube)
        assert np.isnan(back.values[0, 2])


def test_preprocess_floor_is_strict():
    cube = make_cube([[0.09, 0.1, 0.5, 0.0]])
    out = preprocess(cube, 0.1)
    assert out.values[0].tolist() == [0.0, 0.1, 0.5, 0.0]
    assert cube.values[0, 0] == 0.09


def test_preprocess_exclusion_radius():
    g = GridGeometry(12, 1)
    cube = PrecipCube(g, [0], [152], [6], np.ones((1, 12)))
    # centre at x=0.6 puts site 4 (x=4.5) at 3.9 km, site 5 at 4.9 km, site 6 at 5.9 km
    out = preprocess(cube, 0.1, (0.4, 0.5), 5.0)
    d = np.abs(g.coords[:, 0] - 0.4)
    assert np.isclose(d[5], 5.1) and np.isclose(d[4], 4.1)
    assert not out.site_mask[4]
    assert out.site_mask[5]
    out = preprocess(cube, 0.1, (0.6, 0.5), 5.0)
    assert np.isclose(np.abs(g.coords[5, 0] - 0.6), 4.9)
    assert not out.site_mask[5] and out.site_mask[6]


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 6), elements=st.floats(0, 5)), st.floats(0, 1))
def test_preprocess_idempotent(values, floor):
    cube = make_cube(values, nx=3)
    once = preprocess(cube, floor, (1.0, 1.0), 1.0)
    assert preprocess(once, floor, (1.0, 1.0), 1.0).equals(once)


def test_split_examples():
    cube = make_cube([[0.0, 0.5, 2.0, 0.0]])
    inten, occ = split_intensity_occurrence(cube)
    assert occ.values[0].tolist() == [0, 1, 1, 0]
    assert np.isnan(inten.values[0, 0]) and inten.values[0, 1:3].tolist() == [0.5, 2.0]
    zero = make_cube(np.zeros((2, 4)))
    inten, occ = split_intensity_occurrence(zero)
    assert np.all(occ.values == 0) and np.all(np.isnan(inten.values))


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 4), elements=st.one_of(st.just(0.0), st.floats(0.1, 50))))
def test_split_recombine_identity(values):
    cube = preprocess(make_cube(values), 0.1)
    assert recombine(*split_intensity_occurrence(cube)).equals(cube)


def test_zero_proportion_examples():
    cube = make_cube([[0, 0, 1, 2], [np.nan, np.nan, np.nan, np.nan]])
    t = zero_proportion_table(cube, [0.0, 0.1, 1.0])
    assert t[0].tolist() == [0.5, 0.5, 0.75]
    assert np.all(np.isnan(t[1]))
    with pytest.raises(ValueError):
        zero_proportion_table(cube, [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5, 4), elements=st.floats(0, 3)), st.lists(st.floats(0, 3), min_size=1, max_size=5))
def test_zero_proportion_monotone(values, thr):
    t = zero_proportion_table(make_cube(values), sorted(thr))
    assert np.all((t >= 0) & (t <= 1))
    assert np.all(np.diff(t, axis=1) >= 0)


def test_filter_months():
    cube = PrecipCube(GridGeometry(1, 1), [0, 1, 2], [100, 160, 250], [5, 6, 9], np.ones((3, 1)))
    assert filter_months(cube).hours.tolist() == [1]


def test_polygon_boundary_inside():
    poly = CatchmentPolygon([[0, 0], [4, 0], [4, 3], [1, 5]])
    v = poly.vertices
    mids = (v + np.roll(v, -1, axis=0)) / 2
    assert poly.contains(v).all()
    assert poly.contains(mids).all()
    assert not poly.contains([[5, 5]])[0]
    with pytest.raises(ValueError):
        CatchmentPolygon([[0, 0], [1, 1]])
    with pytest.raises(ValueError, match="self-intersecting"):
        CatchmentPolygon([[0, 0], [2, 2], [2, 0], [0, 2]])


def test_polygon_text_roundtrip(tmp_path):
    poly = CatchmentPolygon.rectangle(0, 0, 3.5, 2)
    poly.to_text(tmp_path / "p.txt")
    back = CatchmentPolygon.from_text(tmp_path / "p.txt")
    assert np.array_equal(back.vertices, poly.vertices)
    mask = back.site_mask(GridGeometry(5, 3))
    assert mask.sum() == 8  # x = 3.5 centres sit on the boundary


def test_generator_deterministic_and_nonzero():
    days = np.arange(152, 160)
    truth = SyntheticTruth(constant_marginal(days), seed=4)
    g = GridGeometry(4, 4)
    a = generate_synthetic(truth, g, 50)
    b = generate_synthetic(truth, g, 50)
    assert a.equals(b)
    assert np.all(a.values > 0)


def test_generator_zero_rate():
    days = np.arange(152, 160)
    truth = SyntheticTruth(constant_marginal(days), occurrence=flat_probit(0.7), seed=5)
    cube = generate_synthetic(truth, GridGeometry(10, 10), 100)
    zp = zero_proportion_table(cube, [0.0])
    # s0 is forced wet, so the expected rate is 0.3 * 99 / 100
    assert abs(np.mean(zp) - 0.3 * 0.99) < 0.02


def test_generator_gamma_quantile_matches_truth():
    days = np.arange(152, 153)
    truth = SyntheticTruth(constant_marginal(days, psi=2.0), seed=6)
    cube = generate_synthetic(truth, GridGeometry(10, 10), 1000)
    assert abs(np.quantile(cube.values, 0.95) / 2.0 - 1) < 0.03
