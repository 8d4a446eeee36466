import numpy as np

from ccm_utilities.errors import DimensionError, NumericError, FormatError
from ccm_utilities.TensorContainer import write_bundle, read_bundle
from ccm_utilities.utilities import normalize_unit, side_of, is_square

MAGIC = b'CCML'
DEFAULT_POLICY = 'energy:0.99'


def parse_rank_policy(policy):
    """
    :param policy: 'energy:<tau>' with 0 < tau <= 1, or 'fixed:<k>' with k >= 1
    :return: (kind, value)
    """
    try:
        kind, value = policy.split(':', 1)
        value = float(value) if kind == 'energy' else int(value)
    except ValueError:
        raise ValueError("Rank policy must be 'energy:<tau>' or 'fixed:<k>', got %r" % policy)
    if kind == 'energy' and not 0 < value <= 1:
        raise ValueError('Energy fraction must lie in (0, 1], got %r' % value)
    if kind == 'fixed' and value < 1:
        raise ValueError('Fixed rank must be >= 1, got %r' % value)
    if kind not in ('energy', 'fixed'):
        raise ValueError("Unknown rank policy %r" % kind)
    return kind, value


def choose_rank(singular_values, policy=DEFAULT_POLICY):
    """
    Number of singular values to keep. 'fixed:k' keeps min(k, len); 'energy:tau' keeps the
    smallest k whose leading values hold a fraction tau of sum(sigma^2).
    """
    s = np.asarray(singular_values, dtype=np.float64)
    if s.size == 0:
        raise ValueError('Can not choose a rank from an empty spectrum')
    kind, value = parse_rank_policy(policy)
    if kind == 'fixed':
        return min(value, s.size)
    energy = np.cumsum(s ** 2) / np.sum(s ** 2)
    return int(np.argmax(energy >= value - 1e-12)) + 1


class LinearReconstructor:
    """
    Truncated pseudoinverse of a calibration matrix A (M x N):
        x_hat = V_k diag(1 / s_k) U_k^T y
    The singular values are kept in non-increasing order and are all positive.
    """

    def __init__(self, u, s, vt, rank_policy, object_extent, layer=1):
        self.u = u
        self.s = s
        self.vt = vt
        self.rank_policy = rank_policy
        self.object_extent = object_extent
        self.layer = layer

    def __repr__(self):
        return '<LinearReconstructor rank=%r %rx%r>' % (self.rank, self.n_meas, self.n_object)

    @property
    def rank(self):
        return len(self.s)

    @property
    def n_meas(self):
        return self.u.shape[0]

    @property
    def n_object(self):
        return self.vt.shape[1]


def fit_svd(calib_matrix, rank_policy=DEFAULT_POLICY, layer=1):
    """
    Fit a reconstructor from a calibration matrix whose column j is the response to object pixel j.
    Singular values below max(M, N) * eps * s_max count as zero and are never kept.
    """
    a = np.asarray(calib_matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError('Calibration matrix must be 2D with M, N >= 1, got shape %r' % (a.shape,))
    if not np.all(np.isfinite(a)):
        raise NumericError('Calibration matrix holds non-finite entries')
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size and s[0] > 0:
        keep = s > s[0] * max(a.shape) * np.finfo(np.float64).eps
    else:
        keep = np.zeros(s.shape, dtype=bool)
    k = choose_rank(s[keep], rank_policy)
    extent = side_of(a.shape[1]) if is_square(a.shape[1]) else None
    return LinearReconstructor(u[:, :k], s[:k], vt[:k], rank_policy, extent, layer)


def reconstruct_linear(r, y, normalize=True):
    """
    :param y: measurement with M pixels (any shape)
    :param normalize: clip to [0, inf) and rescale to [0, 1]; when False the raw least-squares
        estimate is returned as a flat vector
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != r.n_meas:
        raise DimensionError('Measurement has %r pixels, reconstructor expects %r' % (y.size, r.n_meas))
    x = r.vt.T @ ((r.u.T @ y) / r.s)
    if not normalize:
        return x
    x = np.clip(x, 0, None)
    if r.object_extent is not None:
        x = x.reshape(r.object_extent, r.object_extent)
    return normalize_unit(x)


def save_reconstructor(r, path):
    header = [
        ('rank', r.rank),
        ('rank_policy', r.rank_policy),
        ('n_meas', r.n_meas),
        ('n_object', r.n_object),
        ('object_extent', r.object_extent if r.object_extent is not None else 0),
        ('layer', r.layer),
    ]
    write_bundle(path, MAGIC, header, [('U', r.u), ('S', r.s), ('Vt', r.vt)])


def load_reconstructor(path):
    header, records = read_bundle(path, MAGIC)
    arrays = dict(records)
    if sorted(arrays) != ['S', 'U', 'Vt']:
        raise FormatError('%s does not hold U, S and Vt' % path)
    if len(arrays['S']) != int(header['rank']):
        raise FormatError('%s: rank %s does not match %r stored singular values' % (path, header['rank'], len(arrays['S'])))
    extent = int(header['object_extent']) or None
    return LinearReconstructor(arrays['U'], arrays['S'], arrays['Vt'], header['rank_policy'], extent, int(header['layer']))
