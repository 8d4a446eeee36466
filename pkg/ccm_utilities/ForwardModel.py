import numpy as np
from scipy import ndimage

from ccm_utilities.errors import DimensionError, GenerationError, FormatError
from ccm_utilities.TensorContainer import write_bundle, read_bundle
from ccm_utilities.utilities import side_of

MAGIC = b'CCMF'
N_LAYERS = 3
BLUR_PX = 2.0
SPECKLE_CONTRAST = 0.25
FOOTPRINT_PX = 1.5
FOOTPRINT_GROWTH_PX = 1.0


class ForwardModel:
    """
    Synthetic cannula transport: one nonnegative M x N mixing matrix per object layer.
    Column j of A_z is the distal-face intensity pattern produced by a unit source at object
    pixel j of layer z: a speckle pattern under a Gaussian footprint centred on the source,
    wider for deeper layers. Rows are normalized to sum to 1.
    """

    def __init__(self, matrices, noise_sigma=0.0, seed=0, conditioning=1.0):
        if len(matrices) != N_LAYERS:
            raise ValueError('A forward model needs exactly %r layer matrices, got %r' % (N_LAYERS, len(matrices)))
        shapes = set(m.shape for m in matrices)
        if len(shapes) != 1:
            raise DimensionError('Layer matrices have different shapes: %r' % sorted(shapes))
        if noise_sigma < 0:
            raise ValueError('noise_sigma must be >= 0, got %r' % noise_sigma)
        self.matrices = [np.asarray(m, dtype=np.float64) for m in matrices]
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        self.conditioning = float(conditioning)
        self.n_meas, self.n_object = self.matrices[0].shape
        self.meas_extent = side_of(self.n_meas)
        self.object_extent = side_of(self.n_object)

    def __repr__(self):
        return '<ForwardModel %rx%r noise=%r>' % (self.n_meas, self.n_object, self.noise_sigma)

    def project(self, layer, x):
        """
        Noiseless measurement of object-plane vectors placed at one layer.
        :param layer: 1-based layer index
        :param x: [N] or [N, K] array
        """
        return self.matrices[layer - 1] @ x

    def layer_correlations(self):
        """ Pairwise Pearson correlation of the flattened layer matrices. """
        flat = [m.ravel() for m in self.matrices]
        corr = []
        for i in range(N_LAYERS):
            for j in range(i + 1, N_LAYERS):
                corr.append(float(np.corrcoef(flat[i], flat[j])[0, 1]))
        return corr


def footprint_width(layer):
    """ Gaussian sigma, in measurement pixels, of the light spot a point source at a 1-based layer makes. """
    return FOOTPRINT_PX + FOOTPRINT_GROWTH_PX * (layer - 1)


def _footprint(n_object, n_meas, width):
    """ [M, N] Gaussian weight between measurement pixel p and the image of object pixel j. """
    side_m = side_of(n_meas)
    side_o = side_of(n_object)
    centres = (np.arange(side_o) + 0.5) * side_m / float(side_o)
    d = (np.arange(side_m) + 0.5)[:, np.newaxis] - centres[np.newaxis, :]
    g = np.exp(-d ** 2 / (2 * width ** 2))
    # rows and columns are raveled row-major, so the 2D kernel is the Kronecker square
    return np.kron(g, g)


def _speckle(n_object, n_meas, rng, conditioning):
    """
    A speckle-like nonnegative field (exponential intensities blurred over the measurement
    plane) whose spectrum is reshaped so that sigma_k decays as k^-conditioning. The leading
    (Perron) component carries the mean intensity; the remainder is scaled to an rms of
    SPECKLE_CONTRAST times the mean entry.
    """
    side = side_of(n_meas)
    white = rng.exponential(1.0, size=(n_object, side, side))
    field = ndimage.gaussian_filter(white, sigma=(0, BLUR_PX, BLUR_PX), mode='wrap')
    field = field.reshape(n_object, n_meas).T

    u, s, vt = np.linalg.svd(field, full_matrices=False)
    shaped = s.copy()
    if len(s) > 1:
        tail = np.arange(1, len(s)) ** (-conditioning)
        shaped[1:] = tail * SPECKLE_CONTRAST * field.mean() * np.sqrt(field.size) / np.sqrt(np.sum(tail ** 2))
    a = (u * shaped) @ vt

    floor = a.min()
    if floor < 0:
        a = a - floor
    return a


def _layer_matrix(n_object, n_meas, rng, conditioning, layer):
    a = _footprint(n_object, n_meas, footprint_width(layer)) * _speckle(n_object, n_meas, rng, conditioning)
    return a / a.sum(axis=1, keepdims=True)


def make_forward_model(n_object, n_meas, seed=0, conditioning=1.0, noise_sigma=0.01):
    """
    Build the three layer matrices deterministically from the seed.
    :param n_object: object-plane pixel count N (a square number)
    :param n_meas: measurement pixel count M (a square number)
    """
    if n_object < 1 or n_meas < 1:
        raise ValueError('Pixel counts must be >= 1, got %r and %r' % (n_object, n_meas))
    matrices = []
    for z in range(1, N_LAYERS + 1):
        rng = np.random.default_rng([seed, z])
        matrices.append(_layer_matrix(n_object, n_meas, rng, conditioning, z))
    model = ForwardModel(matrices, noise_sigma=noise_sigma, seed=seed, conditioning=conditioning)
    if n_object * n_meas > 1:
        worst = max(model.layer_correlations())
        if worst >= 0.99:
            raise GenerationError('Layer matrices are not distinct enough (correlation %.4f)' % worst)
    return model


def calibration_scan(model, layer, rng=None):
    """
    Record the response to every object-plane unit basis image of one layer.
    :return: (inputs [N, h, w] basis images, outputs [M, N] calibration matrix)
    """
    n = model.n_object
    side = model.object_extent
    inputs = np.eye(n).reshape(n, side, side)
    outputs = model.project(layer, np.eye(n))
    if model.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng([model.seed, 100 + layer])
        outputs = outputs + rng.normal(0.0, model.noise_sigma, size=outputs.shape)
    return inputs, outputs


def save_forward_model(model, path):
    header = [
        ('noise_sigma', repr(model.noise_sigma)),
        ('seed', model.seed),
        ('conditioning', repr(model.conditioning)),
        ('n_meas', model.n_meas),
        ('n_object', model.n_object),
    ]
    write_bundle(path, MAGIC, header, [('A%d' % (i + 1), m) for i, m in enumerate(model.matrices)])


def load_forward_model(path):
    header, records = read_bundle(path, MAGIC)
    if [r[0] for r in records] != ['A1', 'A2', 'A3']:
        raise FormatError('%s does not hold the three layer matrices' % path)
    return ForwardModel([r[1] for r in records], noise_sigma=float(header['noise_sigma']),
                        seed=int(header['seed']), conditioning=float(header['conditioning']))
