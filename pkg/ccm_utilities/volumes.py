import os

import numpy as np

from ccm_utilities.errors import DimensionError, FormatError, StateError, GenerationError, ConfigError
from ccm_utilities.TensorContainer import write_tensors, read_tensors
from ccm_utilities.opticsim import SceneStack, simulate_measurement, FOV_UM, LAYER_SPACING_UM
from ccm_utilities.training import infer_reconstruct
from ccm_utilities.utilities import log, write_key_values

META_SUFFIX = '.meta'


class Volume:
    """ A z-stack of reconstructed slices. Slice d sits at depth z0_um + d * z_step_um. """

    def __init__(self, slices, z_step_um=LAYER_SPACING_UM, z0_um=0.0, fov_um=FOV_UM):
        self.slices = list(slices)
        if not self.slices:
            raise ValueError('A volume needs at least one slice')
        shapes = set(np.shape(i) for i in self.slices)
        if len(shapes) != 1:
            raise DimensionError('Slices have ragged extents: %r' % sorted(shapes))
        self.z_step_um = float(z_step_um)
        self.z0_um = float(z0_um)
        self.fov_um = float(fov_um)

    def __repr__(self):
        return '<Volume %r slices from %r um>' % (len(self.slices), self.z0_um)

    def __len__(self):
        return len(self.slices)

    def depth_of(self, d):
        return self.z0_um + d * self.z_step_um

    def to_array(self):
        return np.stack(self.slices)


def scan_depths(z0_um, z_step_um, max_depth_um):
    """ Tip depths from z0_um to max_depth_um inclusive. """
    if z_step_um <= 0:
        raise ConfigError('Depth step must be positive, got %r' % z_step_um)
    n = int(np.floor((max_depth_um - z0_um) / z_step_um + 1e-9)) + 1
    return [z0_um + d * z_step_um for d in range(max(n, 0))]


def insertion_scan(model_star, phantom, forward_model, z_step_um=LAYER_SPACING_UM, max_depth_um=700.0, z0_um=0.0,
                   rng=None):
    """
    Step the cannula tip through a bead phantom. At each depth the 3-layer window below the tip
    is measured through the forward model and reconstructed by the merged-data network, bead or
    no bead. The scan stops at max_depth_um or at the bottom of the phantom.
    :return: Volume
    """
    if model_star is None or model_star.step == 0:
        raise StateError('insertion_scan needs a trained reconstruction model')
    if model_star.spec.kind != 'ann1_r':
        raise ConfigError('insertion_scan needs an ann1_r-shaped model, got %s' % model_star.spec.kind)
    if phantom is None or phantom.thickness_um <= 0:
        raise GenerationError('insertion_scan needs a non-empty phantom')
    if rng is None:
        rng = np.random.default_rng([forward_model.seed, 700])

    slices = []
    for depth in scan_depths(z0_um, z_step_um, min(max_depth_um, phantom.thickness_um)):
        y = simulate_measurement(SceneStack(phantom.window(depth)), forward_model, rng=rng)
        slices.append(np.asarray(infer_reconstruct(model_star, y), dtype=np.float64))
        log('Reconstructed the window at %r um' % depth)
    return Volume(slices, z_step_um, z0_um)


def assemble_volume(slices, path, z_step_um=LAYER_SPACING_UM, z0_um=0.0, fov_um=FOV_UM):
    """
    Write a D x H x W volume container and a key=value sidecar (path + '.meta').
    :return: Volume
    """
    vol = slices if isinstance(slices, Volume) else Volume(slices, z_step_um, z0_um, fov_um)
    write_tensors(path, [vol.to_array()])
    write_key_values(path + META_SUFFIX, [('z0_um', vol.z0_um), ('z_step_um', vol.z_step_um),
                                          ('fov_um', vol.fov_um), ('n_slices', len(vol))])
    return vol


def read_volume(path):
    arrays = read_tensors(path)
    if len(arrays) != 1 or arrays[0].ndim != 3:
        raise FormatError('%s does not hold a single D x H x W volume' % path)
    meta = dict()
    with open(path + META_SUFFIX) as f:
        for line in f:
            if '=' in line:
                k, v = line.rstrip('\n').split('=', 1)
                meta[k] = v
    return Volume(list(arrays[0]), float(meta['z_step_um']), float(meta['z0_um']), float(meta['fov_um']))


def export_pgm(image, path):
    """ Binary 8-bit PGM, grey value round(255 * v) for v in [0, 1]. """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError('Only 2D images can be exported, got shape %r' % (img.shape,))
    if img.size and (img.min() < 0 or img.max() > 1 or not np.all(np.isfinite(img))):
        raise ValueError('PGM export needs values in [0, 1], got [%r, %r]' % (img.min(), img.max()))
    h, w = img.shape
    with open(path, 'wb') as f:
        f.write(('P5\n%d %d\n255\n' % (w, h)).encode('ascii'))
        f.write(np.round(255 * img).astype(np.uint8).tobytes())


def read_pgm(path):
    """ Inverse of export_pgm. Returns the uint8 grey values. """
    with open(path, 'rb') as f:
        data = f.read()
    parts = data.split(b'\n', 3)
    if len(parts) != 4 or parts[0] != b'P5' or parts[2] != b'255':
        raise FormatError('%s is not an 8-bit binary PGM' % path)
    w, h = [int(i) for i in parts[1].split()]
    if len(parts[3]) != w * h:
        raise FormatError('%s holds %r pixels, header says %r' % (path, len(parts[3]), w * h))
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def slice_paths(out_dir, prefix, n):
    return [os.path.join(out_dir, '%s_%03d.pgm' % (prefix, d)) for d in range(n)]
