import numpy as np
import pytest
from numpy.testing import assert_array_equal
from scipy import ndimage

from ccm_utilities.errors import GenerationError
from ccm_utilities.phantoms import render_beads, render_neuron, disk_coverage, BeadPhantom


def test_beads_basic():
    assert_array_equal(render_beads(32, 0), 0)
    one = render_beads(32, 1, 3.0, seed=4)
    assert abs(one.sum() - np.pi * 1.5 ** 2) < 0.15 * np.pi * 1.5 ** 2
    assert one.max() == 1
    assert_array_equal(render_beads(32, 5, seed=9), render_beads(32, 5, seed=9))


def test_beads_do_not_overlap():
    img = render_beads(32, 6, 3.0, seed=1)
    # beads combine by maximum, so overlap would show up as missing intensity
    assert abs(img.sum() - 6 * np.pi * 1.5 ** 2) < 0.2 * 6 * np.pi * 1.5 ** 2
    assert img.max() <= 1


def test_bead_errors():
    with pytest.raises(GenerationError):
        render_beads(8, 50, 3.0, seed=0)
    with pytest.raises(ValueError):
        render_beads(8, 1, 0.5)


def test_disk_coverage_area():
    cov = disk_coverage((40, 40), 20.0, 20.0, 10.0)
    assert abs(cov.sum() - np.pi * 100) < 0.01 * np.pi * 100


@pytest.mark.parametrize('seed', range(100))
def test_neuron_is_connected(seed):
    img = render_neuron(32, seed=seed)
    fg = img >= 0.5 * img.max()
    _, n = ndimage.label(fg, structure=np.ones((3, 3)))
    assert n == 1
    assert 0.01 <= fg.mean() <= 0.25


def test_neuron_determinism_and_errors():
    assert_array_equal(render_neuron(32, seed=3), render_neuron(32, seed=3))
    assert render_neuron(32, seed=3).max() == 1
    with pytest.raises(ValueError):
        render_neuron(32, n_branches=0)


def test_bead_phantom_windows():
    p = BeadPhantom(16, 700.0)
    p.add_bead(8.0, 8.0, 300.0)
    assert p.layer_beads(300.0) == [0]
    assert p.layer_beads(320.0) == [0]
    assert p.layer_beads(250.0) == []
    window = p.window(200.0)
    assert [float(i.max()) for i in window] == [0.0, 0.0, 1.0]
    assert all(not np.any(i) for i in p.window(400.0))
    with pytest.raises(GenerationError):
        BeadPhantom(16, 0.0)


def test_bead_phantom_is_seeded():
    a = BeadPhantom(16, 700.0, n_beads=20, seed=2)
    b = BeadPhantom(16, 700.0, n_beads=20, seed=2)
    assert a.beads == b.beads
    assert all(0 <= z < 700 for _, _, z in a.beads)
