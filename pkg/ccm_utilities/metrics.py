import time

import numpy as np
from scipy import ndimage

from ccm_utilities.errors import DimensionError, MeasurementError, ConfigError
from ccm_utilities.LinearReconstructor import reconstruct_linear
from ccm_utilities.networks import ann2_target
from ccm_utilities.training import infer_reconstruct, infer_classify

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03

BENCH_METHODS = ('ANN1_r', 'ANN1_c', 'ANN2', 'SVD')
# Published results on real instrument data at 128x128, for context only.
PUBLISHED = {
    'ANN1_r': 'ssim=0.8974 mae=0.0104 time=3.3ms',
    'ANN1_c': 'accuracy=0.9980 time=3.6ms',
    'ANN2': 'ssim=0.9639 mae=0.0036 time=3.4ms',
    'SVD': 'ssim=0.9576 mae=0.0138 time=100ms',
}


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError('Images have different extents: %r vs %r' % (a.shape, b.shape))
    return a, b


def ssim(a, b, window=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2, data_range=1.0):
    """
    Mean structural similarity over every valid window x window patch (uniform weights,
    population statistics).
    """
    a, b = _same_shape(a, b)
    if a.ndim != 2:
        raise DimensionError('ssim compares 2D images, got shape %r' % (a.shape,))
    h, w = a.shape
    if h < window or w < window:
        raise DimensionError('Images of %rx%r are smaller than the %r px window' % (h, w, window))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    pad = window // 2
    valid = (slice(pad, h - pad), slice(pad, w - pad))

    def local_mean(img):
        return ndimage.uniform_filter(img, size=window, mode='constant')[valid]

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mae(a, b):
    a, b = _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError('accuracy of an empty prediction set is undefined')
    if predictions.shape != labels.shape:
        raise DimensionError('Got %r predictions for %r labels' % (predictions.size, labels.size))
    return float(np.mean(predictions == labels))


def fwhm_diameter(image, center_row, fov_um=200.0):
    """
    Full width at half maximum along one image row, with linear interpolation of both
    half-maximum crossings.
    :return: (width in pixels, width in um at fov_um / row length)
    """
    row = np.asarray(image, dtype=np.float64)[center_row]
    peak = row.max()
    if not peak > row.min():
        raise MeasurementError('Row %r is flat; there is no peak to measure' % center_row)
    half = peak / 2.0
    above = np.flatnonzero(row >= half)
    if np.any(np.diff(above) > 1):
        raise MeasurementError('Row %r holds more than one peak above half maximum' % center_row)
    i0 = above[0]
    i1 = above[-1]
    if i0 == 0 or i1 == len(row) - 1:
        raise MeasurementError('The peak in row %r reaches the image border' % center_row)
    left = (i0 - 1) + (half - row[i0 - 1]) / (row[i0] - row[i0 - 1])
    right = i1 + (row[i1] - half) / (row[i1] - row[i1 + 1])
    width = right - left
    return float(width), float(width * fov_um / len(row))


class MetricReport:
    """
    Per-sample quality values of one evaluation. Aggregates are plain means of the per-sample
    values.
    """

    def __init__(self, ssim_values=None, mae_values=None, correct=None, extras=None):
        self.ssim_values = list(ssim_values or [])
        self.mae_values = list(mae_values or [])
        self.correct = None if correct is None else list(correct)
        self.extras = list(extras or [])

    def __repr__(self):
        return '<MetricReport n=%r>' % self.n_samples

    @property
    def n_samples(self):
        if self.correct is not None:
            return len(self.correct)
        return len(self.ssim_values)

    @property
    def ssim(self):
        return float(np.mean(self.ssim_values)) if self.ssim_values else None

    @property
    def mae(self):
        return float(np.mean(self.mae_values)) if self.mae_values else None

    @property
    def accuracy(self):
        if not self.correct:
            return None
        return float(np.mean(self.correct))

    def to_pairs(self, prefix=''):
        pairs = [(prefix + 'n_samples', self.n_samples)]
        if self.ssim_values:
            pairs += [(prefix + 'ssim', self.ssim), (prefix + 'ssim_std', float(np.std(self.ssim_values))),
                      (prefix + 'mae', self.mae), (prefix + 'mae_std', float(np.std(self.mae_values)))]
        if self.correct is not None:
            pairs.append((prefix + 'accuracy', self.accuracy))
        pairs += [(prefix + k, v) for k, v in self.extras]
        return pairs


def metric_settings():
    return [('ssim_window', SSIM_WINDOW), ('ssim_k1', SSIM_K1), ('ssim_k2', SSIM_K2), ('ssim_data_range', 1.0)]


def _plane_metrics(pred, target):
    """ SSIM and MAE averaged over the planes of an [H,W,P] stack. """
    s = [ssim(pred[..., z], target[..., z]) for z in range(target.shape[-1])]
    m = [mae(pred[..., z], target[..., z]) for z in range(target.shape[-1])]
    return float(np.mean(s)), float(np.mean(m))


def evaluate_model(model, manifest, split='test', timings=None):
    """
    Score a trained network on one dataset split.
    ann1_r: SSIM/MAE against the reference. ann1_c: layer accuracy.
    ann2: SSIM/MAE averaged over the 3 planes, plus the target-plane SSIM and the ratio of
    off-target to target-plane mean intensity.
    """
    kind = model.spec.kind
    samples = manifest.split(split)
    if not samples:
        raise ValueError('Split %r of %s is empty' % (split, manifest.directory))
    if kind == 'ann1_c':
        predicted = []
        labels = []
        for s in samples:
            if s.layer is None:
                raise ConfigError('Layer accuracy needs single-layer samples')
            ccm, _ = manifest.load(s)
            predicted.append(infer_classify(model, ccm, timings)[0])
            labels.append(s.layer)
        return MetricReport(correct=[int(p == q) for p, q in zip(predicted, labels)])

    ssims = []
    maes = []
    target_ssim = []
    target_mean = []
    off_mean = []
    for s in samples:
        ccm, ref = manifest.load(s)
        out = infer_reconstruct(model, ccm, timings)
        if kind == 'ann2':
            if s.layer is None:
                raise ConfigError('ANN2 evaluation needs single-layer samples')
            a, b = _plane_metrics(out, ann2_target(ref, s.layer))
            z = s.layer - 1
            others = [i for i in range(3) if i != z]
            target_ssim.append(ssim(out[..., z], ref))
            target_mean.append(float(out[..., z].mean()))
            off_mean.append(float(out[..., others].mean()))
        else:
            a, b = ssim(out, ref), mae(out, ref)
        ssims.append(a)
        maes.append(b)
    extras = []
    if kind == 'ann2':
        extras = [('target_plane_ssim', float(np.mean(target_ssim))),
                  ('off_target_ratio', float(np.mean(off_mean) / max(np.mean(target_mean), 1e-12)))]
    return MetricReport(ssims, maes, extras=extras)


def evaluate_linear(reconstructor, manifest, split='test', timings=None):
    """ Score the linear reconstructor on the samples of the layer it was calibrated for. """
    samples = [s for s in manifest.split(split) if s.layer == reconstructor.layer]
    if not samples:
        raise ValueError('No layer-%r samples in split %r' % (reconstructor.layer, split))
    ssims = []
    maes = []
    for s in samples:
        ccm, ref = manifest.load(s)
        start = time.perf_counter()
        out = reconstruct_linear(reconstructor, ccm)
        if timings is not None:
            timings.append(time.perf_counter() - start)
        ssims.append(ssim(out, ref))
        maes.append(mae(out, ref))
    return MetricReport(ssims, maes)


def bench(models, reconstructor, manifest, split='test'):
    """
    Quality and median per-image inference time of the four methods on one split.
    :param models: dict with 'ann1_r', 'ann1_c' and 'ann2' ModelStates
    :return: list of row dicts in BENCH_METHODS order
    """
    for name in ('ann1_r', 'ann1_c', 'ann2'):
        if models.get(name) is None:
            raise ConfigError('bench is missing the %s model' % name)
    if reconstructor is None:
        raise ConfigError('bench is missing the linear reconstructor')
    rows = []
    for method, key in zip(BENCH_METHODS, ('ann1_r', 'ann1_c', 'ann2', None)):
        timings = []
        if key is None:
            report = evaluate_linear(reconstructor, manifest, split, timings)
        else:
            report = evaluate_model(models[key], manifest, split, timings)
        rows.append(dict(method=method, ssim=report.ssim, mae=report.mae, accuracy=report.accuracy,
                         median_ms=1000.0 * float(np.median(timings)), n_samples=report.n_samples,
                         published=PUBLISHED[method]))
    return rows


def format_bench_table(rows):
    def cell(v):
        return 'NA' if v is None else '%.4f' % v

    lines = ['\t'.join(['method', 'ssim', 'mae', 'accuracy', 'median_ms', 'n_samples', 'published'])]
    for r in rows:
        lines.append('\t'.join([r['method'], cell(r['ssim']), cell(r['mae']), cell(r['accuracy']),
                                '%.3f' % r['median_ms'], str(r['n_samples']), r['published']]))
    return '\n'.join(lines) + '\n'
