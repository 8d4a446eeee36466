import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ccm_utilities.errors import DimensionError, ConfigError
from ccm_utilities.ForwardModel import make_forward_model, calibration_scan, save_forward_model, load_forward_model, \
    footprint_width
from ccm_utilities.opticsim import SceneStack, Sample, simulate_measurement, merge_layers, measurement_correlation, \
    DatasetConfig, build_dataset, make_single_sample, make_merged_sample, stratified_splits
from ccm_utilities.DatasetManifest import ManifestReader
from ccm_utilities.TensorContainer import read_tensors
from ccm_utilities.phantoms import render_beads
from ccm_utilities.utilities import normalize_unit


@pytest.fixture(scope='module')
def model():
    return make_forward_model(64, 64, seed=5, noise_sigma=0.0)


def numerical_rank(a):
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.sum(s > 1e-3 * s[0]))


def test_forward_model_construction(model):
    again = make_forward_model(64, 64, seed=5, noise_sigma=0.0)
    for a, b in zip(model.matrices, again.matrices):
        assert a.tobytes() == b.tobytes()
        assert np.all(a >= 0)
        assert_allclose(a.sum(axis=1), 1, atol=1e-6)
    assert max(model.layer_correlations()) < 0.99
    assert model.meas_extent == 8 and model.object_extent == 8


def test_conditioning_controls_numerical_rank():
    flat = make_forward_model(256, 256, seed=2, conditioning=0.5)
    steep = make_forward_model(256, 256, seed=2, conditioning=2.0)
    assert numerical_rank(flat.matrices[0]) > numerical_rank(steep.matrices[0])


def test_point_sources_spread_wider_with_depth():
    fm = make_forward_model(256, 256, seed=1, noise_sigma=0.0)
    assert footprint_width(1) < footprint_width(2) < footprint_width(3)
    rows, cols = np.divmod(np.arange(256), 16)
    spreads = []
    for a in fm.matrices:
        spot = a[:, 8 * 16 + 8]
        cy = np.sum(spot * rows) / spot.sum()
        cx = np.sum(spot * cols) / spot.sum()
        # the light stays under the source
        assert abs(cy - 8) < 1.5 and abs(cx - 8) < 1.5
        spreads.append(np.sum(spot * ((rows - cy) ** 2 + (cols - cx) ** 2)) / spot.sum())
    assert spreads[0] < spreads[1] < spreads[2]


def test_forward_model_file_round_trip(tmp_path, model):
    path = str(tmp_path / 'fm.ccmf')
    save_forward_model(model, path)
    back = load_forward_model(path)
    assert back.seed == model.seed and back.noise_sigma == model.noise_sigma
    for a, b in zip(model.matrices, back.matrices):
        assert_array_equal(a, b)


def test_calibration_scan(model):
    inputs, outputs = calibration_scan(model, 2)
    assert inputs.shape == (64, 8, 8)
    assert outputs.tobytes() == model.matrices[1].tobytes()

    noisy = make_forward_model(256, 256, seed=5, noise_sigma=0.05)
    _, measured = calibration_scan(noisy, 1)
    err = measured[:, :100] - noisy.matrices[0][:, :100]
    assert abs(err.std(axis=0).mean() - 0.05) < 0.005


def test_simulate_measurement_linearity(model):
    empty = SceneStack([np.zeros((8, 8))] * 3)
    assert_array_equal(simulate_measurement(empty, model, normalize=False), 0)
    assert_array_equal(simulate_measurement(empty, model), 0)

    x = np.zeros((8, 8))
    x.flat[13] = 1.0
    raw = simulate_measurement(SceneStack.single(x, 2), model, normalize=False)
    assert_allclose(raw.ravel(), model.matrices[1][:, 13])

    rng = np.random.default_rng(0)
    x1 = [rng.uniform(size=(8, 8)) for _ in range(3)]
    x2 = [rng.uniform(size=(8, 8)) for _ in range(3)]
    both = simulate_measurement(SceneStack([a + b for a, b in zip(x1, x2)]), model, normalize=False)
    parts = simulate_measurement(SceneStack(x1), model, normalize=False) + \
        simulate_measurement(SceneStack(x2), model, normalize=False)
    assert_allclose(both, parts, atol=1e-6)

    y = simulate_measurement(SceneStack(x1), model)
    assert y.min() == 0 and y.max() == 1
    with pytest.raises(DimensionError):
        simulate_measurement(SceneStack([np.zeros((4, 4))] * 3), model)


def test_scene_stack_validation():
    with pytest.raises(ValueError):
        SceneStack([np.zeros((4, 4))] * 2)
    with pytest.raises(DimensionError):
        SceneStack([np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((5, 5))])


def _samples(model, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for z in (1, 2, 3):
        obj = render_beads(8, 1, 3.0, rng=rng)
        out.append(Sample(simulate_measurement(SceneStack.single(obj, z), model), obj, z, 50.0 * (z - 1)))
    return out


def test_merge_layers(model):
    s = _samples(model)
    merged = merge_layers(s)
    assert merged.layer_label == 'merged'
    assert_allclose(merged.ref.max(), 1)

    shuffled = merge_layers([s[2], s[0], s[1]])
    assert_array_equal(merged.ccm, shuffled.ccm)
    assert_array_equal(merged.ref, shuffled.ref)

    raw = merge_layers(s, normalize=False)
    assert raw.ccm.max() <= sum(i.ccm.max() for i in s) + 1e-12

    zero = [Sample(np.zeros((8, 8)), np.zeros((8, 8)), z, 0.0) for z in (2, 3)]
    alone = merge_layers([s[0]] + zero)
    assert_allclose(alone.ccm, s[0].ccm)
    assert_allclose(alone.ref, s[0].ref)

    with pytest.raises(ValueError):
        merge_layers([s[0], s[0], s[1]])


def test_layers_are_separable(model):
    images = [render_beads(8, 2, 3.0, seed=i) for i in range(4)]
    assert measurement_correlation(model, images) < 0.95


def test_split_arithmetic():
    assert DatasetConfig(per_layer=100, n_test=30).split_sizes() == (243, 27, 30)
    assert DatasetConfig().split_sizes() == (1458, 162, 180)
    with pytest.raises(ConfigError):
        DatasetConfig(per_layer=10, n_test=30).split_sizes()
    with pytest.raises(ConfigError):
        DatasetConfig(kind='stacked')
    with pytest.raises(ConfigError):
        DatasetConfig(extent=2)


def test_samples_are_pure_functions_of_seed_and_index():
    config = DatasetConfig(extent=16, seed=3)
    fm = make_forward_model(256, 256, seed=3)
    a = make_single_sample(config, fm, 7, 2)
    b = make_single_sample(config, fm, 7, 2)
    assert_array_equal(a.ccm, b.ccm)
    assert_array_equal(a.ref, b.ref)
    assert a.z_um == 50.0


@pytest.fixture(scope='module')
def small_dataset(tmp_path_factory):
    config = DatasetConfig(extent=16, per_layer=10, n_test=3, seed=1)
    return build_dataset(config, str(tmp_path_factory.mktemp('single')))


def test_build_dataset(small_dataset, tmp_path):
    m = ManifestReader(small_dataset.directory).read()
    assert m.split_counts() == {'train': 25, 'validation': 2, 'test': 3}
    assert m.label_counts() == {'1': 10, '2': 10, '3': 10}
    assert sorted(s.layer for s in m.split('test')) == [1, 2, 3]
    assert len(set(s.sample_id for s in m.samples)) == 30
    for s in m.samples:
        ccm, ref = m.load(s)
        assert ccm.shape == ref.shape == (16, 16)
        assert ccm.min() >= 0 and ccm.max() <= 1
        assert ref.max() == 1

    again = build_dataset(DatasetConfig(extent=16, per_layer=10, n_test=3, seed=1), str(tmp_path))
    assert again.digest() == small_dataset.digest()
    first = small_dataset.samples[0].path
    assert read_tensors(os.path.join(str(tmp_path), first))[0].tobytes() == \
        read_tensors(os.path.join(small_dataset.directory, first))[0].tobytes()


def test_parallel_generation_matches_serial(tmp_path):
    serial = build_dataset(DatasetConfig(extent=16, per_layer=4, n_test=2, seed=4), str(tmp_path / 'a'))
    parallel = build_dataset(DatasetConfig(extent=16, per_layer=4, n_test=2, seed=4, workers=2), str(tmp_path / 'b'))
    assert serial.digest() == parallel.digest()
    for s in serial.samples:
        a = read_tensors(os.path.join(serial.directory, s.path))
        b = read_tensors(os.path.join(parallel.directory, s.path))
        assert a[0].tobytes() == b[0].tobytes()


def test_merged_dataset(tmp_path):
    config = DatasetConfig(extent=16, per_layer=6, n_test=1, seed=2, kind='merged')
    m = build_dataset(config, str(tmp_path))
    assert m.kind == 'merged'
    assert m.label_counts() == {'merged': 6}
    assert all(s.layer is None for s in m.samples)

    fm = load_forward_model(os.path.join(m.directory, 'forward_model.ccmf'))
    for s in m.samples:
        parts = [make_single_sample(config, fm, s.sample_id, z) for z in (1, 2, 3)]
        ccm, ref = read_tensors(os.path.join(m.directory, s.path))
        expected_ref = normalize_unit(parts[0].ref + parts[1].ref + parts[2].ref).astype(np.float32)
        expected_ccm = normalize_unit(parts[0].ccm + parts[1].ccm + parts[2].ccm).astype(np.float32)
        assert ref.tobytes() == expected_ref.tobytes()
        assert ccm.tobytes() == expected_ccm.tobytes()
        assert make_merged_sample(config, fm, s.sample_id).ref.astype(np.float32).tobytes() == ref.tobytes()


def test_stratified_splits():
    splits = stratified_splits([2, 2, 1, 3, 1, 3], 3, 1)
    assert splits == ['test', 'train', 'test', 'test', 'validation', 'train']
    assert stratified_splits([None] * 4, 1, 1) == ['test', 'validation', 'train', 'train']
    labels = list(np.random.default_rng(0).permutation([1, 2, 3] * 10))
    splits = stratified_splits(labels, 3, 2)
    assert sorted(z for z, s in zip(labels, splits) if s == 'test') == [1, 2, 3]
    assert splits.count('validation') == 2 and splits.count('train') == 25
