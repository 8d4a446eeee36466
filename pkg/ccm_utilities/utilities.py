import os
import time
import hashlib

import numpy as np

""" A collection of various helper functions"""


def log(message):
    """ Log messages to standard output. """
    print(time.ctime() + ' --- ' + message, flush=True)


def normalize_unit(img):
    """
    Rescale an image to [0, 1] by its own minimum and maximum.
    An image with no dynamic range (for example all zeros) maps to all zeros.
    :param img: numpy array of any shape
    :return: float array of the same shape
    """
    img = np.asarray(img, dtype=np.float64)
    lo = img.min()
    hi = img.max()
    if not hi > lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def layer_depth_um(layer, spacing_um=50.0):
    """ Nominal depth of a 1-based layer index below the cannula face. """
    return (layer - 1) * spacing_um


def is_square(n):
    r = int(round(np.sqrt(n)))
    return r * r == n


def side_of(n):
    """ Side length of a square plane holding n pixels. """
    if not is_square(n):
        raise ValueError('%r pixels do not form a square plane' % n)
    return int(round(np.sqrt(n)))


def file_digest(path):
    """ sha256 hex digest of a file's bytes. """
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def make_out_dirs(out_dir):
    """
    Create the output layout used by every subcommand.
    :return: dict of sub-directory name -> path
    """
    paths = dict()
    for i in ['dataset', 'models', 'reports', 'volumes']:
        paths[i] = os.path.join(out_dir, i)
        if not os.path.exists(paths[i]):
            os.makedirs(paths[i])
    return paths


def write_key_values(path, pairs):
    """
    Write an ordered list of (key, value) pairs as key=value lines.
    Floats are written with repr so re-reading is exact.
    """
    lines = []
    for k, v in pairs:
        if isinstance(v, (float, np.floating)):
            v = repr(float(v))
        lines.append('%s=%s' % (k, v))
    with open(path, 'w') as f:
        f.write('\n'.join(lines) + '\n')
