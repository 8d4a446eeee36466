import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ccm_utilities.errors import DimensionError, ConfigError, GenerationError
from ccm_utilities.ForwardModel import make_forward_model, save_forward_model, N_LAYERS
from ccm_utilities.DatasetManifest import DatasetManifest, SampleLine
from ccm_utilities.TensorContainer import write_tensors
from ccm_utilities.phantoms import render_beads, render_neuron
from ccm_utilities.utilities import log, normalize_unit, layer_depth_um

LAYER_SPACING_UM = 50.0
FOV_UM = 200.0
MAX_CLASS_CORRELATION = 0.95
FORWARD_MODEL_NAME = 'forward_model.ccmf'


class SceneStack:
    """ The three object planes seen by the cannula, nearest layer first. """

    def __init__(self, layers, layer_spacing_um=LAYER_SPACING_UM, fov_um=FOV_UM):
        if len(layers) != N_LAYERS:
            raise ValueError('A scene has exactly %r layers, got %r' % (N_LAYERS, len(layers)))
        layers = [np.asarray(i, dtype=np.float64) for i in layers]
        if len(set(i.shape for i in layers)) != 1:
            raise DimensionError('Scene layers must share one extent')
        if any(np.any(i < 0) for i in layers):
            raise ValueError('Object-plane intensities must be nonnegative')
        self.layers = layers
        self.layer_spacing_um = layer_spacing_um
        self.fov_um = fov_um

    def __repr__(self):
        return '<SceneStack ' + str(self.layers[0].shape) + '>'

    @property
    def extent(self):
        return self.layers[0].shape

    @classmethod
    def single(cls, image, layer):
        """ A scene with `image` at the given 1-based layer and empty planes elsewhere. """
        layers = [np.zeros_like(image, dtype=np.float64) for _ in range(N_LAYERS)]
        layers[layer - 1] = np.asarray(image, dtype=np.float64)
        return cls(layers)


class Sample:

    def __init__(self, ccm, ref, layer_label, z_um):
        self.ccm = ccm
        self.ref = ref
        self.layer_label = layer_label
        self.z_um = z_um

    def __repr__(self):
        return '<Sample layer=%s>' % str(self.layer_label)


def simulate_measurement(scene, model, rng=None, normalize=True):
    """
    y = sum_z A_z vec(x_z) + noise, rescaled to [0, 1] by its own min/max.
    :param rng: numpy Generator for the noise; defaults to one seeded from the model
    :param normalize: return the raw measurement when False
    """
    h, w = scene.extent
    if h * w != model.n_object:
        raise DimensionError('Scene has %r pixels per layer, forward model expects %r' % (h * w, model.n_object))
    y = np.zeros(model.n_meas)
    for z, layer in enumerate(scene.layers, 1):
        if np.any(layer):
            y = y + model.project(z, layer.ravel())
    if model.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(model.seed)
        y = y + rng.normal(0.0, model.noise_sigma, size=y.shape)
    y = y.reshape(model.meas_extent, model.meas_extent)
    if normalize:
        return normalize_unit(y)
    return y


def merge_layers(samples, normalize=True):
    """
    Combine one sample from each layer into a 'merged' sample:
        ccm = ccm(layer1) + ccm(layer2) + ccm(layer3)
        ref = ref(layer1) + ref(layer2) + ref(layer3)
    both renormalized to [0, 1].
    """
    labels = [i.layer_label for i in samples]
    if len(samples) != N_LAYERS or sorted(labels) != [1, 2, 3]:
        raise ValueError('merge_layers needs one sample from each of layers 1, 2, 3; got labels %r' % labels)
    if len(set(np.shape(i.ccm) for i in samples)) != 1 or len(set(np.shape(i.ref) for i in samples)) != 1:
        raise DimensionError('Merged samples must share their extents')
    ordered = sorted(samples, key=lambda s: s.layer_label)
    ccm = ordered[0].ccm + ordered[1].ccm + ordered[2].ccm
    ref = ordered[0].ref + ordered[1].ref + ordered[2].ref
    if normalize:
        ccm = normalize_unit(ccm)
        ref = normalize_unit(ref)
    return Sample(ccm, ref, 'merged', 0.0)


def measurement_correlation(model, images):
    """
    Mean pairwise correlation between noiseless measurements of identical objects placed at
    different layers. Low values mean the layer can be told from the measurement.
    """
    corr = []
    for img in images:
        ys = [model.project(z, img.ravel()) for z in range(1, N_LAYERS + 1)]
        for i in range(N_LAYERS):
            for j in range(i + 1, N_LAYERS):
                corr.append(np.corrcoef(ys[i], ys[j])[0, 1])
    return float(np.mean(corr))


class DatasetConfig:
    """ Generation settings. Desk-scale defaults; real-instrument training used extent 128, per_layer 16700, n_test 1000. """

    def __init__(self, extent=32, per_layer=600, n_test=180, seed=0, noise_sigma=0.01, conditioning=1.0,
                 kind='single', object_kind='mixed', max_beads=5, bead_diameter_px=3.0, n_branches=4, workers=1):
        self.extent = int(extent)
        self.per_layer = int(per_layer)
        self.n_test = int(n_test)
        self.seed = int(seed)
        self.noise_sigma = float(noise_sigma)
        self.conditioning = float(conditioning)
        self.kind = kind
        self.object_kind = object_kind
        self.max_beads = int(max_beads)
        self.bead_diameter_px = float(bead_diameter_px)
        self.n_branches = int(n_branches)
        self.workers = int(workers)

        if self.extent < 4:
            raise ConfigError('Image extent must be at least 4 px, got %r' % self.extent)
        if self.kind not in ('single', 'merged'):
            raise ConfigError("Dataset kind must be 'single' or 'merged', got %r" % self.kind)
        if self.object_kind not in ('mixed', 'beads', 'neuron'):
            raise ConfigError("object_kind must be 'mixed', 'beads' or 'neuron', got %r" % self.object_kind)

    def split_sizes(self):
        """
        Test count is fixed first, then validation is 10% of the remainder.
        :return: (n_train, n_val, n_test)
        """
        total = self.per_layer * (N_LAYERS if self.kind == 'single' else 1)
        if self.per_layer < 1 or self.n_test < 1 or self.n_test >= total:
            raise ConfigError('%r samples can not hold a test split of %r' % (total, self.n_test))
        n_val = (total - self.n_test) // 10
        n_train = total - self.n_test - n_val
        if n_train < 1:
            raise ConfigError('No training samples left after the test and validation splits')
        return n_train, n_val, self.n_test


def render_object(config, rng):
    """ One object-plane image: beads or a neuron, unit peak. """
    kind = config.object_kind
    if kind == 'mixed':
        kind = 'beads' if rng.uniform() < 0.5 else 'neuron'
    if kind == 'beads':
        count = int(rng.integers(1, config.max_beads + 1))
        return render_beads(config.extent, count, config.bead_diameter_px, rng=rng)
    return render_neuron(config.extent, n_branches=config.n_branches, rng=rng)


def make_single_sample(config, model, index, layer):
    """ Sample `index` with its object at `layer`. A pure function of (seed, index, layer). """
    rng = np.random.default_rng([config.seed, index, layer])
    obj = render_object(config, rng)
    ccm = simulate_measurement(SceneStack.single(obj, layer), model, rng=rng)
    return Sample(ccm, normalize_unit(obj), layer, layer_depth_um(layer, LAYER_SPACING_UM))


def make_merged_sample(config, model, index):
    return merge_layers([make_single_sample(config, model, index, z) for z in range(1, N_LAYERS + 1)])


_worker_state = dict()


def _init_worker(config, model):
    _worker_state['config'] = config
    _worker_state['model'] = model


def _generate(job):
    index, layer = job
    config = _worker_state['config']
    model = _worker_state['model']
    if layer is None:
        s = make_merged_sample(config, model, index)
    else:
        s = make_single_sample(config, model, index, layer)
    return s.ccm.astype(np.float32), s.ref.astype(np.float32)


def stratified_splits(labels, n_test, n_val):
    """
    Split names for jobs in generation order. Test samples are dealt out across the layers in
    turn, then validation samples the same way, so a test split of at least 3 holds every layer.
    :param labels: layer label of each job, or None for merged jobs
    """
    n = len(labels)
    if any(i is None for i in labels):
        return ['test'] * n_test + ['validation'] * n_val + ['train'] * (n - n_test - n_val)
    queues = dict()
    for pos, layer in enumerate(labels):
        queues.setdefault(layer, []).append(pos)
    dealt = []
    for rank in range(max(len(q) for q in queues.values())):
        for layer in sorted(queues):
            if rank < len(queues[layer]):
                dealt.append(queues[layer][rank])
    splits = ['train'] * n
    for i, pos in enumerate(dealt[:n_test + n_val]):
        splits[pos] = 'test' if i < n_test else 'validation'
    return splits


def build_dataset(config, out_dir, model=None):
    """
    Generate a dataset directory: manifest.txt, the forward model, and one container file per
    sample holding (ccm, ref).
    :param config: DatasetConfig
    :param model: optional ForwardModel; built from the config seed when omitted
    :return: DatasetManifest
    """
    n_train, n_val, n_test = config.split_sizes()
    if model is None:
        log('Building forward model (%r px, conditioning %r)' % (config.extent ** 2, config.conditioning))
        model = make_forward_model(config.extent ** 2, config.extent ** 2, seed=config.seed,
                                   conditioning=config.conditioning, noise_sigma=config.noise_sigma)
    if model.object_extent != config.extent or model.meas_extent != config.extent:
        raise ConfigError('Forward model extents (%r, %r) do not match dataset extent %r'
                          % (model.object_extent, model.meas_extent, config.extent))

    check_rng = np.random.default_rng([config.seed, 0xC0FFEE])
    trial_objects = [render_object(config, check_rng) for _ in range(4)]
    corr = measurement_correlation(model, trial_objects)
    log('Mean cross-layer measurement correlation: %.4f' % corr)
    if corr >= MAX_CLASS_CORRELATION:
        raise GenerationError('Layers are not separable: cross-layer correlation %.4f >= %r' % (corr, MAX_CLASS_CORRELATION))

    if config.kind == 'single':
        labels = np.tile(np.arange(1, N_LAYERS + 1), config.per_layer)
        order = np.random.default_rng(config.seed).permutation(len(labels))
        jobs = [(i, int(labels[j])) for i, j in enumerate(order)]
    else:
        jobs = [(i, None) for i in range(config.per_layer)]
    splits = stratified_splits([layer for _, layer in jobs], n_test, n_val)

    sample_dir = os.path.join(out_dir, 'samples')
    if not os.path.exists(sample_dir):
        os.makedirs(sample_dir)

    log('Generating %r %s samples' % (len(jobs), config.kind))
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(config, model)) as ex:
            results = ex.map(_generate, jobs, chunksize=32)
            rows = _write_samples(out_dir, jobs, results, splits)
    else:
        _init_worker(config, model)
        rows = _write_samples(out_dir, jobs, map(_generate, jobs), splits)

    meta = dict()
    meta['kind'] = config.kind
    meta['seed'] = config.seed
    meta['extent'] = config.extent
    meta['per_layer'] = config.per_layer
    meta['n_train'] = n_train
    meta['n_validation'] = n_val
    meta['n_test'] = n_test
    meta['noise_sigma'] = repr(config.noise_sigma)
    meta['conditioning'] = repr(config.conditioning)
    meta['object_kind'] = config.object_kind
    meta['forward_model'] = FORWARD_MODEL_NAME
    save_forward_model(model, os.path.join(out_dir, FORWARD_MODEL_NAME))
    manifest = DatasetManifest(out_dir, meta, rows)
    manifest.write()
    return manifest


def _write_samples(out_dir, jobs, results, splits):
    rows = []
    for (index, layer), (ccm, ref), split in zip(jobs, results, splits):
        rel = os.path.join('samples', 's_%06d.tnsr' % index)
        write_tensors(os.path.join(out_dir, rel), [ccm, ref])
        label = 'merged' if layer is None else str(layer)
        z_um = 0.0 if layer is None else layer_depth_um(layer, LAYER_SPACING_UM)
        rows.append(SampleLine('\t'.join([str(index), rel, label, repr(z_um), split])))
    return rows
