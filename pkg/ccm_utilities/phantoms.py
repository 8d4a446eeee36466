import numpy as np
from scipy import ndimage
from intervaltree import IntervalTree

from ccm_utilities.errors import GenerationError
from ccm_utilities.utilities import normalize_unit

""" Object-plane phantoms: fluorescent beads, cultured-neuron mimics and a bead-filled depth slab. """

MAX_PLACEMENT_ATTEMPTS = 1000


def _extent_pair(extent):
    if isinstance(extent, (tuple, list)):
        return int(extent[0]), int(extent[1])
    return int(extent), int(extent)


def disk_coverage(shape, cy, cx, radius, supersample=8):
    """
    Anti-aliased filled disk: each pixel holds the fraction of its area inside the circle,
    estimated on a supersample x supersample grid. Pixel (i, j) covers [i, i+1) x [j, j+1).
    """
    h, w = shape
    out = np.zeros(shape)
    r0 = max(int(np.floor(cy - radius)), 0)
    r1 = min(int(np.ceil(cy + radius)), h)
    c0 = max(int(np.floor(cx - radius)), 0)
    c1 = min(int(np.ceil(cx + radius)), w)
    if r1 <= r0 or c1 <= c0:
        return out
    sub = (np.arange(supersample) + 0.5) / supersample
    ys = (np.arange(r0, r1)[:, np.newaxis] + sub).ravel()
    xs = (np.arange(c0, c1)[:, np.newaxis] + sub).ravel()
    inside = ((ys[:, np.newaxis] - cy) ** 2 + (xs[np.newaxis, :] - cx) ** 2) <= radius ** 2
    cov = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    out[r0:r1, c0:c1] = cov
    return out


def stamp_bead(img, cy, cx, diameter_px):
    """ Add a unit-peak anti-aliased bead to img in place (pixel-wise maximum). """
    cov = disk_coverage(img.shape, cy, cx, diameter_px / 2.0)
    peak = cov.max()
    if peak > 0:
        np.maximum(img, cov / peak, out=img)
    return img


def render_beads(extent, count, diameter_px=3.0, seed=0, rng=None):
    """
    Render `count` non-overlapping beads at uniformly random positions fully inside the field.
    :param extent: side length, or (rows, cols)
    :param rng: optional numpy Generator; overrides seed
    :return: float64 image with unit peak per bead
    """
    if diameter_px < 1:
        raise ValueError('Bead diameter must be at least 1 px, got %r' % diameter_px)
    h, w = _extent_pair(extent)
    if rng is None:
        rng = np.random.default_rng(seed)
    img = np.zeros((h, w))
    if count == 0:
        return img
    r = diameter_px / 2.0
    if diameter_px > min(h, w):
        raise GenerationError('A %r px bead does not fit in a %rx%r field' % (diameter_px, h, w))

    centers = []
    for n in range(count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            cy = rng.uniform(r, h - r)
            cx = rng.uniform(r, w - r)
            if all(np.hypot(cy - oy, cx - ox) >= diameter_px for oy, ox in centers):
                break
        else:
            raise GenerationError('Could not place bead %r of %r without overlap after %r attempts'
                                  % (n + 1, count, MAX_PLACEMENT_ATTEMPTS))
        centers.append((cy, cx))

    for cy, cx in centers:
        stamp_bead(img, cy, cx, diameter_px)
    return img


def _stamp_point(img, y, x, radius):
    h, w = img.shape
    r0, r1 = max(int(np.floor(y - radius)), 0), min(int(np.ceil(y + radius)) + 1, h)
    c0, c1 = max(int(np.floor(x - radius)), 0), min(int(np.ceil(x + radius)) + 1, w)
    rows = np.arange(r0, r1)[:, np.newaxis] + 0.5
    cols = np.arange(c0, c1)[np.newaxis, :] + 0.5
    mask = (rows - y) ** 2 + (cols - x) ** 2 <= radius ** 2
    img[r0:r1, c0:c1][mask] = 1.0


def _walk(img, rng, y, x, angle, n_steps, radius):
    """ Persistent random walk drawn as a 1-2 px wide process. Returns the visited points. """
    h, w = img.shape
    points = []
    for _ in range(n_steps):
        angle += rng.normal(0.0, 0.3)
        ny = y + np.sin(angle)
        nx = x + np.cos(angle)
        if not (1.0 <= ny < h - 1.0 and 1.0 <= nx < w - 1.0):
            break
        y, x = ny, nx
        _stamp_point(img, y, x, radius)
        points.append((y, x, angle))
    return points


def render_neuron(extent, seed=0, n_branches=4, rng=None, process_radius=0.75, smoothing=0.5):
    """
    Cultured-neuron mimic: a soma disk plus branching persistent random-walk processes,
    smoothed with a Gaussian and normalized to unit peak.
    """
    if n_branches < 1:
        raise ValueError('A neuron needs at least one branch, got %r' % n_branches)
    h, w = _extent_pair(extent)
    if rng is None:
        rng = np.random.default_rng(seed)
    img = np.zeros((h, w))

    side = min(h, w)
    soma_r = max(2.0, 0.09 * side)
    cy = rng.uniform(0.35 * h, 0.65 * h)
    cx = rng.uniform(0.35 * w, 0.65 * w)
    _stamp_point(img, cy, cx, soma_r)

    for b in range(n_branches):
        angle = 2 * np.pi * b / n_branches + rng.uniform(-0.4, 0.4)
        y = cy + (soma_r - 0.5) * np.sin(angle)
        x = cx + (soma_r - 0.5) * np.cos(angle)
        n_steps = int(rng.uniform(0.2, 0.35) * side)
        points = _walk(img, rng, y, x, angle, n_steps, process_radius)
        if points and rng.uniform() < 0.5:
            py, px, pa = points[rng.integers(len(points))]
            turn = 0.8 if rng.uniform() < 0.5 else -0.8
            _walk(img, rng, py, px, pa + turn, max(n_steps // 2, 1), process_radius)

    img = ndimage.gaussian_filter(img, smoothing)
    return normalize_unit(img)


class BeadPhantom:
    """
    A slab of beads spread through depth, used for the insertion scan. Depths are in um below
    the slab surface; lateral positions are in pixels of the object plane.
    """

    def __init__(self, extent, thickness_um, n_beads=0, diameter_px=3.0, seed=0, layer_spacing_um=50.0):
        if thickness_um <= 0:
            raise GenerationError('Phantom thickness must be positive, got %r' % thickness_um)
        self.extent = _extent_pair(extent)
        self.thickness_um = float(thickness_um)
        self.diameter_px = diameter_px
        self.layer_spacing_um = layer_spacing_um
        self.beads = []
        self.tree = IntervalTree()

        rng = np.random.default_rng(seed)
        r = diameter_px / 2.0
        h, w = self.extent
        for _ in range(n_beads):
            self.add_bead(rng.uniform(r, h - r), rng.uniform(r, w - r), rng.uniform(0, self.thickness_um))

    def __repr__(self):
        return '<BeadPhantom %r beads, %r um>' % (len(self.beads), self.thickness_um)

    def add_bead(self, row, col, z_um):
        """ Place a bead; it belongs to whichever layer lies within half a layer spacing of z_um. """
        idx = len(self.beads)
        self.beads.append((row, col, z_um))
        half = self.layer_spacing_um / 2.0
        self.tree[z_um - half:z_um + half] = idx

    def layer_beads(self, layer_z_um):
        """ Indices of the beads nearest to a layer at the given depth. """
        return sorted(i.data for i in self.tree[layer_z_um])

    def window(self, depth_um, n_layers=3):
        """
        Scene seen with the cannula tip at depth_um: layers at depth, depth + spacing, ...
        :return: list of n_layers images
        """
        layers = []
        for k in range(n_layers):
            img = np.zeros(self.extent)
            for i in self.layer_beads(depth_um + k * self.layer_spacing_um):
                row, col, _ = self.beads[i]
                stamp_bead(img, row, col, self.diameter_px)
            layers.append(img)
        return layers
