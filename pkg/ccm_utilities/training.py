import time

import numpy as np

from ccm_utilities.errors import ConfigError, DimensionError, NumericError
from ccm_utilities.diffcore import pixelwise_bce, categorical_ce, backward
from ccm_utilities.AdamOptimizer import AdamOptimizer
from ccm_utilities.networks import NetworkSpec, build_ann1_r, forward, ann2_target, as_batch
from ccm_utilities.utilities import log


class TrainConfig:

    def __init__(self, batch_size=16, max_epochs=15, lr=1e-3, patience=3, seed=0):
        self.batch_size = int(batch_size)
        self.max_epochs = int(max_epochs)
        self.lr = float(lr)
        self.patience = int(patience)
        self.seed = int(seed)
        if self.batch_size < 2:
            raise ConfigError('Batch size must be >= 2 for batch normalization, got %r' % self.batch_size)
        if self.max_epochs < 1:
            raise ConfigError('max_epochs must be >= 1, got %r' % self.max_epochs)
        if self.patience < 1:
            raise ConfigError('patience must be >= 1, got %r' % self.patience)

    def to_pairs(self):
        return [('batch_size', self.batch_size), ('max_epochs', self.max_epochs), ('lr', self.lr),
                ('patience', self.patience), ('seed', self.seed)]


class TrainReport:
    """
    Loss trace of one training run. Wall-clock values live in epoch_seconds and are kept out of
    to_pairs() so that the report is reproducible.
    """

    def __init__(self, kind):
        self.kind = kind
        self.initial_loss = None
        self.train_loss = []
        self.val_loss = []
        self.epoch_seconds = []
        self.best_epoch = None
        self.stopped_early = False

    def __repr__(self):
        return '<TrainReport %s %r epochs>' % (self.kind, self.epochs)

    @property
    def epochs(self):
        return len(self.train_loss)

    def to_pairs(self):
        pairs = [('kind', self.kind), ('epochs', self.epochs), ('best_epoch', self.best_epoch),
                 ('stopped_early', int(self.stopped_early)), ('initial_loss', self.initial_loss)]
        for i in range(self.epochs):
            pairs.append(('epoch%d.train_loss' % (i + 1), self.train_loss[i]))
            pairs.append(('epoch%d.val_loss' % (i + 1), self.val_loss[i]))
        return pairs

    def timing_pairs(self):
        return [('epoch%d.seconds' % (i + 1), s) for i, s in enumerate(self.epoch_seconds)]


def load_split(manifest, split, kind):
    """
    Stack one split of a dataset into network inputs and targets.
    :param kind: network kind; decides the target layout
    :return: (inputs [n,H,W,1] array, targets array)
    """
    samples = manifest.split(split)
    if kind in ('ann1_c', 'ann2') and any(s.layer is None for s in samples):
        raise ConfigError('%s needs single-layer samples; %s holds merged ones' % (kind, manifest.directory))
    xs = []
    ys = []
    for s in samples:
        ccm, ref = manifest.load(s)
        xs.append(ccm)
        if kind == 'ann1_c':
            ys.append(s.layer - 1)
        elif kind == 'ann2':
            ys.append(ann2_target(ref, s.layer))
        else:
            ys.append(ref[..., np.newaxis])
    e = manifest.extent
    if not xs:
        return np.zeros((0, e, e, 1)), np.zeros((0,), dtype=int) if kind == 'ann1_c' else np.zeros((0, e, e, 1))
    return np.stack(xs)[..., np.newaxis], np.asarray(ys) if kind == 'ann1_c' else np.stack(ys)


def loss_of(model, out, y):
    if model.spec.kind == 'ann1_c':
        return categorical_ce(out, y)
    return pixelwise_bce(out, y)


def evaluate_loss(model, x, y, batch_size=16):
    """ Mean eval-mode loss over a stacked split. """
    if len(x) == 0:
        return None
    total = 0.0
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        out = forward(model, xb, 'eval')
        total += float(loss_of(model, out, y[i:i + batch_size]).data) * len(xb)
    return total / len(x)


def _batches(n, batch_size):
    """ Batch boundaries; a trailing batch of one sample joins the batch before it. """
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return list(zip(bounds[:-1], bounds[1:]))


def train(model, manifest, config):
    """
    Mini-batch Adam training with per-epoch seeded shuffling. Validation loss is computed in
    eval mode after every epoch; training stops after `patience` epochs without improvement and
    the best-validation weights are restored.
    :return: TrainReport
    """
    kind = model.spec.kind
    if manifest.extent != model.spec.extent:
        raise DimensionError('Dataset extent %r does not match the %s extent %r'
                             % (manifest.extent, kind, model.spec.extent))
    x_train, y_train = load_split(manifest, 'train', kind)
    x_val, y_val = load_split(manifest, 'validation', kind)
    n = len(x_train)
    if n < 2:
        raise ConfigError('Training needs at least 2 training samples, found %r' % n)
    if len(x_val) == 0:
        log('WARNING: no validation samples. Early stopping will monitor the training loss.')

    report = TrainReport(kind)
    report.initial_loss = evaluate_loss(model, x_train, y_train, config.batch_size)
    opt = AdamOptimizer(lr=config.lr)
    params = model.param_list()
    best_loss = np.inf
    best = model.snapshot()
    bad_epochs = 0

    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for b0, b1 in _batches(n, config.batch_size):
            idx = order[b0:b1]
            opt.zero_grad(params)
            try:
                out = forward(model, x_train[idx], 'train')
                loss = loss_of(model, out, y_train[idx])
                backward(loss)
            except NumericError as e:
                norm = float(np.sqrt(sum(np.sum(p.data.astype(np.float64) ** 2) for p in params)))
                raise NumericError('%s (epoch %r, step %r, parameter norm %.4g)' % (e, epoch + 1, model.step, norm))
            opt.step(params)
            model.step += 1
            total += float(loss.data) * (b1 - b0)

        report.train_loss.append(total / n)
        val = evaluate_loss(model, x_val, y_val, config.batch_size)
        if val is None:
            val = report.train_loss[-1]
        report.val_loss.append(val)
        report.epoch_seconds.append(time.perf_counter() - start)
        log('%s epoch %r: train loss %.5f, validation loss %.5f' % (kind, epoch + 1, report.train_loss[-1], val))

        if val < best_loss:
            best_loss = val
            best = model.snapshot()
            report.best_epoch = epoch + 1
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                report.stopped_early = True
                log('No validation improvement for %r epochs. Stopping.' % bad_epochs)
                break

    step = model.step
    model.restore(best)
    model.step = step
    return report


def infer_reconstruct(model, ccm, timings=None):
    """
    :param ccm: [H,W] image or [B,H,W] batch
    :param timings: optional list; the elapsed seconds of this call are appended to it
    :return: [H,W] (ann1_r) or [H,W,3] (ann2) for one image; batched arrays for a batch
    """
    if model.spec.kind == 'ann1_c':
        raise ConfigError('infer_reconstruct needs a reconstruction network, got ann1_c')
    single = np.ndim(ccm) == 2
    start = time.perf_counter()
    out = forward(model, as_batch(ccm, model.spec.extent), 'eval').data
    if timings is not None:
        timings.append(time.perf_counter() - start)
    if model.spec.kind == 'ann1_r':
        out = out[..., 0]
    return out[0] if single else out


def infer_classify(model, ccm, timings=None):
    """
    :return: (1-based layer, class probabilities); arrays for a batch. Ties go to the lowest layer.
    """
    if model.spec.kind != 'ann1_c':
        raise ConfigError('infer_classify needs an ann1_c network, got %s' % model.spec.kind)
    single = np.ndim(ccm) == 2
    start = time.perf_counter()
    probs = forward(model, as_batch(ccm, model.spec.extent), 'eval').data
    if timings is not None:
        timings.append(time.perf_counter() - start)
    layers = np.argmax(probs, axis=-1) + 1
    if single:
        return int(layers[0]), probs[0]
    return layers, probs


def retrain_star(manifest_merged, config, spec=None):
    """
    Train an ann1_r-shaped network on a merged dataset (measurement -> summed reference).
    :return: (ModelState, TrainReport)
    """
    if manifest_merged.kind != 'merged':
        raise ConfigError('ANN1_r* needs a merged dataset; %s is %r' % (manifest_merged.directory, manifest_merged.kind))
    if spec is None:
        spec = NetworkSpec('ann1_r', extent=manifest_merged.extent)
    model = build_ann1_r(spec, seed=config.seed)
    report = train(model, manifest_merged, config)
    report.kind = 'ann1_r_star'
    return model, report
