import csv

import numpy as np
import pytest
from scipy.interpolate import LinearNDInterpolator

from seirmpc.integrate import ControlSignal, simulate
from seirmpc.model import ControlValue, Params, State, vector_field
from seirmpc.sets import (
    BarrierError,
    BarrierState,
    DegenerateGeometryError,
    DomainError,
    OracleOptions,
    RegionKind,
    SetKind,
    adversary_family,
    admissible_membership,
    barrier_curve,
    boundary_cloud,
    grid_membership,
    in_gpi_tol,
    mrpi_membership,
    pi_grid,
    region_contains,
    tangency_points,
    write_cloud_csv,
    write_grid_csv,
)

P = Params()
CASE = State(0.50, 0.18, 0.01, 0.31)


@pytest.fixture(scope="module")
def mrpi_cloud():
    return boundary_cloud(SetKind.MRPI, P, 10)


@pytest.fixture(scope="module")
def admissible_cloud():
    return boundary_cloud(SetKind.ADMISSIBLE, P, 10)


def test_terminal_set_examples():
    assert region_contains(RegionKind.TERMINAL_SET, State(0.9, 0, 0, 0.1), P)
    assert region_contains(RegionKind.TERMINAL_SET, State(0.3, 0.03, 0.04, 0.63), P)
    assert not region_contains(RegionKind.TERMINAL_SET, CASE, P)
    # box edges are inclusive, one ulp past is not
    assert region_contains(RegionKind.TERMINAL_SET, State.from_sei(P.s_bar, P.e_cap, P.i_max), P)
    assert not region_contains(RegionKind.TERMINAL_SET, State.from_sei(np.nextafter(P.s_bar, 1), 0.01, 0.01), P)


def test_other_regions():
    assert region_contains(RegionKind.EQUILIBRIA_SET, State(0.5, 1e-13, 0, 0.5 - 1e-13), P)
    assert not region_contains(RegionKind.EQUILIBRIA_SET, State(0.5, 1e-6, 0, 0.5 - 1e-6), P)
    assert not region_contains(RegionKind.G, State.from_sei(0.5, 0.1, 0.06), P)
    assert region_contains(RegionKind.GPI, CASE, P)
    assert in_gpi_tol((0.5, -1e-10, 0.05 + 1e-10), P)
    assert not in_gpi_tol((0.5, 0.0, 0.051), P)


def test_adversary_family_is_seeded_and_starts_with_nominal():
    b1, g1 = adversary_family(P, OracleOptions(seed=3))
    b2, g2 = adversary_family(P, OracleOptions(seed=3))
    b3, _ = adversary_family(P, OracleOptions(seed=4))
    assert np.array_equal(b1, b2) and np.array_equal(g1, g2)
    assert not np.array_equal(b1, b3)
    assert b1.shape == (65, 300)
    assert np.all(b1[0] == P.beta_nom) and np.all(g1[0] == P.gamma_nom)
    assert set(np.unique(b1)) == {P.beta_min, P.beta_nom}


def test_mrpi_examples():
    assert mrpi_membership(State(0.8, 0, 0, 0.2), P).inside
    assert mrpi_membership(State(0.3, 0.03, 0.04, 0.63), P).inside
    m = mrpi_membership(CASE, P)
    assert not m.inside
    assert m.certificate == pytest.approx(0.050195073715562977, rel=1e-6)


def test_mrpi_requires_gpi():
    with pytest.raises(DomainError):
        mrpi_membership(State.from_sei(0.5, 0.1, 0.06), P)


def test_admissible_examples():
    assert not admissible_membership(State.from_sei(0.5, 0.1, 0.06), P).inside
    assert admissible_membership(State(0.8, 0, 0, 0.2), P).inside
    a = admissible_membership(CASE, P)
    assert a.inside
    assert a.certificate == pytest.approx(0.045265798403210565, rel=1e-6)


def test_admissible_monotone_in_i0(rng):
    checked = 0
    while checked < 40:
        s, e, i = rng.uniform(0, 0.7), rng.uniform(0, 0.2), rng.uniform(0, P.i_max)
        if s + e + i > 1 or not admissible_membership(State.from_sei(s, e, i), P).inside:
            continue
        lower = rng.uniform(0, i)
        assert admissible_membership(State.from_sei(s, e, lower), P).inside
        checked += 1


def test_tangency_values():
    m = tangency_points(SetKind.MRPI, P)
    a = tangency_points(SetKind.ADMISSIBLE, P)
    assert abs(m.e_star - 0.035384615384615384) <= 1e-12
    assert abs(a.e_star - 0.115) <= 1e-12
    assert m.s_max == pytest.approx(P.s_bar)
    assert a.s_max == pytest.approx(1 - 0.115 - 0.05)
    for t in (m, a):
        x = t.point(0.5 * t.s_max)
        f = vector_field(x, ControlValue(t.beta_ext, t.gamma_ext), P)
        assert f[2] == pytest.approx(0.0, abs=1e-18)


def test_tangency_degenerate_geometry():
    p = Params(eta=0.01, i_max=0.5)
    with pytest.raises(DegenerateGeometryError):
        tangency_points(SetKind.ADMISSIBLE, p)


def test_barrier_rejects_bad_starts():
    with pytest.raises(BarrierError):
        barrier_curve(BarrierState(State.from_sei(0.2, 0.03, 0.04)), SetKind.MRPI, P)
    with pytest.raises(BarrierError):
        barrier_curve(BarrierState(State.from_sei(0.2, 0.05, 0.05)), SetKind.MRPI, P)
    start = tangency_points(SetKind.MRPI, P).point(0.2)
    with pytest.raises(BarrierError):
        barrier_curve(BarrierState(start, lam=(0.0, 0.0, 0.0)), SetKind.MRPI, P)


def test_barrier_first_step_stays_below_cap():
    start = tangency_points(SetKind.MRPI, P).point(0.2)
    c = barrier_curve(BarrierState(start), SetKind.MRPI, P)
    assert c.points[0, 2] == P.i_max
    assert np.all(c.points[1:, 2] <= P.i_max + 1e-12)


def test_cloud_points_in_gpi(mrpi_cloud, admissible_cloud):
    for cloud in (mrpi_cloud, admissible_cloud):
        assert len(cloud.points) > 0
        assert not cloud.errors
        assert all(in_gpi_tol(x, P) for x in cloud.points)


def test_single_start_cloud_equals_curve():
    cloud = boundary_cloud(SetKind.MRPI, P, 1)
    tang = tangency_points(SetKind.MRPI, P)
    c = barrier_curve(BarrierState(tang.point(tang.starts(1)[0])), SetKind.MRPI, P)
    assert np.array_equal(cloud.points, c.points)
    with pytest.raises(ValueError):
        boundary_cloud(SetKind.MRPI, P, 0)


def test_mrpi_boundary_below_admissible_boundary(mrpi_cloud, admissible_cloud):
    adm = admissible_cloud.points
    e_of = LinearNDInterpolator(adm[:, [0, 2]], adm[:, 1])
    e_adm = e_of(mrpi_cloud.points[:, 0], mrpi_cloud.points[:, 2])
    defined = ~np.isnan(e_adm)
    assert defined.sum() > 10
    assert np.all(mrpi_cloud.points[defined, 1] <= e_adm[defined] + 1e-9)


def test_barrier_matches_oracle(mrpi_cloud):
    rng = np.random.default_rng(1)
    pts = mrpi_cloud.points[rng.choice(len(mrpi_cloud.points), 20, replace=False)]
    disagreements = 0
    for s, e, i in pts:
        up = mrpi_membership(State.from_sei(s, e + 1e-3, i), P).inside
        down = mrpi_membership(State.from_sei(s, max(e - 1e-3, 0.0), i), P).inside
        disagreements += up or not down
    assert disagreements <= 2


def test_terminal_points_decay_exponentially(rng):
    for _ in range(20):
        x0 = State.from_sei(rng.uniform(0, P.s_bar), rng.uniform(0, P.e_cap), rng.uniform(1e-4, P.i_max))
        for _ in range(5):
            u = ControlValue(rng.uniform(P.beta_min, P.beta_nom), rng.uniform(P.gamma_nom, P.gamma_max))
            traj = simulate(x0, ControlSignal.constant(u), 60.0, P)
            keep = traj.times >= 5
            slope = np.polyfit(traj.times[keep], np.log(traj.e[keep] + traj.i[keep]), 1)[0]
            assert slope < 0


def test_grid_and_csv_outputs(tmp_path, mrpi_cloud):
    pts = pi_grid(6)
    assert np.all(pts.sum(axis=1) <= 1 + 1e-12)
    table = grid_membership(pts, P, OracleOptions(n_samples=4))
    assert table.shape == (len(pts), 3)
    assert not np.any(table[:, 1] & ~table[:, 0])
    rows = list(csv.reader(write_grid_csv(tmp_path / "g.csv", pts, table).open()))
    assert rows[0] == ["S", "E", "I", "in_admissible", "in_mrpi", "in_terminal"]
    rows = list(csv.reader(write_cloud_csv(tmp_path / "c.csv", [mrpi_cloud]).open()))
    assert rows[0] == ["kind", "curve_id", "S", "E", "I"]
    assert rows[1][0] == "Mrpi"
    assert len(rows) == len(mrpi_cloud.points) + 1
