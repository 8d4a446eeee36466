import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ccm_utilities.errors import DimensionError, StateError, GenerationError
from ccm_utilities.ForwardModel import make_forward_model
from ccm_utilities.networks import NetworkSpec, build_model
from ccm_utilities.phantoms import BeadPhantom
from ccm_utilities import volumes
from ccm_utilities.training import infer_reconstruct
from ccm_utilities.volumes import Volume, scan_depths, insertion_scan, assemble_volume, read_volume, export_pgm, \
    read_pgm


@pytest.fixture(scope='module')
def forward_model():
    return make_forward_model(256, 256, seed=0)


def star_model():
    model = build_model(NetworkSpec('ann1_r', extent=16, depth=2, base_channels=4), seed=0)
    model.step = 1
    return model


def test_scan_depths():
    assert len(scan_depths(0.0, 50.0, 700.0)) == 15
    assert scan_depths(100.0, 50.0, 200.0) == [100.0, 150.0, 200.0]


def test_insertion_scan_reconstructs_every_depth(forward_model, monkeypatch):
    calls = []

    def counting(model, ccm, timings=None):
        calls.append(np.array(ccm))
        return infer_reconstruct(model, ccm, timings)

    monkeypatch.setattr(volumes, 'infer_reconstruct', counting)
    vol = insertion_scan(star_model(), BeadPhantom(16, 700.0), forward_model)
    assert len(vol) == 15
    assert len(calls) == 15
    assert vol.depth_of(14) == 700.0
    # an empty window still yields a noisy measurement
    assert all(c.shape == (16, 16) and c.max() == 1.0 for c in calls)
    assert all(s.shape == (16, 16) and s.min() > 0 and s.max() < 1 for s in vol.slices)


def test_insertion_scan_finds_a_bead_at_its_depth(monkeypatch):
    noiseless = make_forward_model(256, 256, seed=0, noise_sigma=0.0)
    monkeypatch.setattr(volumes, 'infer_reconstruct', lambda model, ccm: ccm)
    phantom = BeadPhantom(16, 700.0)
    phantom.add_bead(8.0, 8.0, 300.0)
    vol = insertion_scan(star_model(), phantom, noiseless)
    lit = [vol.depth_of(d) for d, s in enumerate(vol.slices) if s.max() > 0]
    # the windows at 200, 250 and 300 um reach the bead
    assert lit == [200.0, 250.0, 300.0]


def test_insertion_scan_errors(forward_model):
    untrained = build_model(NetworkSpec('ann1_r', extent=16, depth=2, base_channels=4))
    with pytest.raises(StateError):
        insertion_scan(untrained, BeadPhantom(16, 700.0), forward_model)
    with pytest.raises(GenerationError):
        insertion_scan(star_model(), None, forward_model)


def test_assemble_and_read_volume(tmp_path):
    rng = np.random.default_rng(0)
    slices = [rng.uniform(size=(32, 32)) for _ in range(15)]
    path = str(tmp_path / 'v.tnsr')
    assemble_volume(slices, path, z_step_um=50.0, z0_um=25.0)
    assert os.path.exists(path + '.meta')
    vol = read_volume(path)
    assert vol.to_array().shape == (15, 32, 32)
    assert vol.z_step_um == 50.0 and vol.z0_um == 25.0
    for a, b in zip(slices, vol.slices):
        assert a.tobytes() == b.tobytes()
    with pytest.raises(DimensionError):
        assemble_volume([np.zeros((4, 4)), np.zeros((4, 5))], path)
    with pytest.raises(ValueError):
        Volume([])


def test_export_pgm(tmp_path):
    path = str(tmp_path / 'a.pgm')
    export_pgm(np.zeros((3, 5)), path)
    with open(path, 'rb') as f:
        raw = f.read()
    assert raw.startswith(b'P5\n5 3\n255\n')
    assert raw[len(b'P5\n5 3\n255\n'):] == bytes(15)

    export_pgm(np.ones((2, 2)), path)
    assert_array_equal(read_pgm(path), 255)

    img = np.array([[0.0, 0.5], [0.25, 1.0]])
    export_pgm(img, path)
    assert_array_equal(read_pgm(path), np.round(255 * img))
    with pytest.raises(ValueError):
        export_pgm(np.full((2, 2), 1.5), path)
