import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdmesa.georef import NODATA, GridSpec, WorldGrid, density_per_m2
from crowdmesa.pressure import max_pressure, pressure_map, velocity_variance
from oracles import local_variance_loop

SPEC = GridSpec(0.0, 10.0, 0.5, 6, 5)


def field(values, spec=SPEC):
    return WorldGrid(spec, np.asarray(values, dtype=np.float64))


def random_fields(seed, n=3, h=5, w=6, holes=True):
    rng = np.random.default_rng(seed)
    fs = [rng.normal(size=(h, w, 2)) for _ in range(n)]
    if holes:
        for f in fs:
            f[rng.random((h, w)) < 0.2] = NODATA
    return fs


def test_uniform_motion_has_zero_variance():
    v = np.zeros((5, 6, 2))
    v[..., 0], v[..., 1] = 1.3, -0.4
    var = velocity_variance([field(v), field(v)], 1.0)
    assert np.all(var.values == 0)


def test_plus_minus_one_samples_give_unit_variance():
    spec = GridSpec(0.0, 1.0, 1.0, 1, 1)
    a, b = np.full((1, 1, 2), 0.0), np.full((1, 1, 2), 0.0)
    a[0, 0, 0], b[0, 0, 0] = 1.0, -1.0
    assert velocity_variance([field(a, spec), field(b, spec)], 0.5).values[0, 0] == 1.0


def test_radius_zero_single_field_is_zero():
    f = random_fields(0, n=1, holes=False)[0]
    assert np.all(velocity_variance([field(f)], 0.0).values == 0)


def test_pressure_product_example():
    spec = GridSpec(0.0, 1.0, 1.0, 1, 1)
    p = pressure_map(WorldGrid(spec, np.array([[2.0]])), WorldGrid(spec, np.array([[3.0]])))
    assert p.values[0, 0] == 6.0


def test_pressure_propagates_nodata():
    spec = GridSpec(0.0, 1.0, 1.0, 2, 1)
    p = pressure_map(WorldGrid(spec, np.array([[2.0, NODATA]])), WorldGrid(spec, np.array([[NODATA, 1.0]])))
    assert np.all(p.values == NODATA)
    with pytest.raises(ValueError):
        pressure_map(WorldGrid(spec, np.ones((1, 2))), WorldGrid(SPEC, np.ones((5, 6))))


def test_density_units():
    d = WorldGrid(GridSpec(0.0, 1.0, 0.5, 2, 1), np.array([[1.0, NODATA]]))
    out = density_per_m2(d)
    assert out.values[0, 0] == 4.0 and out.values[0, 1] == NODATA


def test_validation():
    with pytest.raises(ValueError):
        velocity_variance([])
    with pytest.raises(ValueError):
        velocity_variance([field(np.zeros((5, 6, 2)))], -1.0)
    with pytest.raises(ValueError):
        velocity_variance([field(np.zeros((5, 6)))])
    with pytest.raises(ValueError):
        velocity_variance([field(np.zeros((5, 6, 2))), field(np.zeros((2, 2, 2)), GridSpec(0, 0, 1, 2, 2))])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.5, 1.0, 1.2]))
def test_variance_matches_loop_oracle(seed, radius_m):
    fs = random_fields(seed)
    got = velocity_variance([field(f) for f in fs], radius_m).values
    ref = local_variance_loop(fs, NODATA, radius_m / SPEC.cell_size)
    assert np.allclose(got, ref, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2 * np.pi))
def test_variance_invariant_to_added_velocity_and_rotation(seed, ve, vn, theta):
    fs = random_fields(seed, holes=False)
    base = velocity_variance([field(f) for f in fs], 1.0).values
    shifted = [f + np.array([ve, vn]) for f in fs]
    assert np.allclose(velocity_variance([field(f) for f in shifted], 1.0).values, base, atol=1e-9)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    turned = [f @ rot.T for f in fs]
    assert np.allclose(velocity_variance([field(f) for f in turned], 1.0).values, base, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
def test_pressure_scales_with_density_and_speed(seed, alpha, beta):
    fs = random_fields(seed, holes=False)
    rng = np.random.default_rng(seed)
    rho = WorldGrid(SPEC, rng.random((5, 6)))
    var = velocity_variance([field(f) for f in fs], 1.0)
    p = pressure_map(rho, var).values
    assert np.all(p >= 0)
    rho2 = WorldGrid(SPEC, alpha * rho.values)
    var2 = velocity_variance([field(beta * f) for f in fs], 1.0)
    assert np.allclose(pressure_map(rho2, var2).values, alpha * beta**2 * p, rtol=1e-9, atol=1e-12)


def test_max_pressure_location_and_ties():
    spec = GridSpec(100.0, 200.0, 1.0, 3, 2)
    p = WorldGrid(spec, np.array([[1.0, 4.0, 4.0], [NODATA, 2.0, 0.0]]))
    assert max_pressure(p) == (4.0, 0, 1, 101.5, 199.5)
    with pytest.raises(ValueError):
        max_pressure(WorldGrid(spec, np.full((2, 3), NODATA)))
