import numpy as np
import pytest

from ellipticmc.domain import Ball, Box, Implicit, domain_from_config
from ellipticmc.errors import ConfigError, NoCrossing, OutsideDomain


@pytest.fixture
def disk():
    return Ball(np.zeros(2), 1.0)


@pytest.fixture
def square():
    return Box(np.zeros(2), np.ones(2))


def test_contains(disk, square):
    assert disk.contains([0.0, 0.0])
    assert not disk.contains([1.0, 0.0])      # the boundary counts as exited
    assert square.contains([0.5, 0.5])
    assert not square.contains([0.0, 0.5])
    np.testing.assert_array_equal(disk.contains(np.array([[0.0, 0.0], [2.0, 0.0]])), [True, False])


def test_boundary_distance(disk, square):
    assert disk.boundary_distance([0.0, 0.0]) == pytest.approx(1.0)
    assert disk.boundary_distance([0.5, 0.0]) == pytest.approx(0.5)
    assert square.boundary_distance([0.1, 0.4]) == pytest.approx(0.1)
    with pytest.raises(OutsideDomain):
        disk.boundary_distance([1.5, 0.0])


def test_box_faces_are_exact():
    # signed distance is exactly zero on the faces, even for offset boxes
    box = Box(np.array([-0.1, -0.1]), np.array([1.1, 1.1]))
    assert box.signed_distance([-0.1, 0.5]) == 0.0
    assert box.signed_distance([1.1, 0.3]) == 0.0


def test_project_exit(disk):
    np.testing.assert_allclose(disk.project_exit([0.0, 0.0], [2.0, 0.0]), [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(disk.project_exit([0.6, 0.0], [0.6, 1.2]), [0.6, 0.8], atol=1e-12)
    interval = Box(np.array([0.0]), np.array([1.0]))
    np.testing.assert_allclose(interval.project_exit([0.9], [1.3]), [1.0], atol=1e-12)


def test_crossing_fraction_on_segment(disk, square):
    rng = np.random.default_rng(1)
    for dom in (disk, square):
        lo, hi = dom.bounding_box
        x_in = rng.uniform(lo, hi, (200, 2))
        x_in = x_in[dom.contains(x_in)]
        x_out = x_in + 3.0 * rng.standard_normal(x_in.shape)
        x_out = x_out[~dom.contains(x_out)]
        x_in = x_in[: x_out.shape[0]]
        pts, theta = dom.crossing(x_in, x_out)
        assert np.all((theta >= 0) & (theta <= 1))
        np.testing.assert_allclose(pts, x_in + theta[:, None] * (x_out - x_in), atol=1e-12)
        assert np.max(np.abs(dom.signed_distance(pts))) <= 1e-9
        # distance to the boundary bounds the length to any crossing
        assert np.all(dom.boundary_distance(x_in) <= np.linalg.norm(pts - x_in, axis=1) + 1e-12)


def test_closest_boundary_point(disk, square):
    np.testing.assert_allclose(disk.closest_boundary_point([0.5, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(square.closest_boundary_point([0.2, 0.5]), [0.0, 0.5])


def test_implicit_domain():
    with pytest.raises(ConfigError):
        Implicit(lambda x: np.linalg.norm(x, axis=1) - 1.0, [-1, -1], [1, 1])
    dom = Implicit(lambda x: np.linalg.norm(x, axis=1) - 1.0, [-1, -1], [1, 1], assume_regular=True)
    assert dom.contains([0.0, 0.0])
    np.testing.assert_allclose(dom.project_exit([0.6, 0.0], [0.6, 1.2]), [0.6, 0.8], atol=1e-10)
    assert dom.eikonal_defect() < 0.1
    with pytest.raises(NoCrossing):
        dom.project_exit([0.0, 0.0], [0.1, 0.0])


def test_bounding_boxes(disk):
    lo, hi = disk.bounding_box
    np.testing.assert_array_equal(lo, [-1, -1])
    np.testing.assert_array_equal(hi, [1, 1])


def test_domain_from_config():
    assert isinstance(domain_from_config({"type": "ball", "center": [0, 0], "radius": 1}), Ball)
    iv = domain_from_config({"type": "interval", "lo": -1, "hi": 1})
    assert iv.d == 1 and iv.contains([0.0])
    with pytest.raises(ConfigError):
        domain_from_config({"type": "torus"})
    with pytest.raises(ConfigError):
        Box([1.0], [0.0])
