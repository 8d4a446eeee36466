from collections import OrderedDict

import numpy as np

from ccm_utilities.errors import ConfigError, DimensionError, FormatError
from ccm_utilities.diffcore import Param, BatchNormState, Tensor, conv2d, activation, max_pool2, batch_norm, \
    upsample2_concat, global_avg_pool, dense, he_uniform
from ccm_utilities.TensorContainer import write_bundle, read_bundle

MAGIC = b'CCMM'
KINDS = ('ann1_r', 'ann1_c', 'ann2')
N_CLASSES = 3


class NetworkSpec:
    """
    Shape of one network.

    ann1_r / ann2: a U-Net with `depth` encoder levels. Level l has base_channels * 2^l channels and
    every level is a dense block (conv, relu, conv, relu, batch-norm). ann2 ends in 3 output planes.
    ann1_c: n_blocks conv+relu+batch-norm blocks with a 2x2 max pool after every second block,
    then global average pooling and an affine layer to 3 class probabilities.
    """

    def __init__(self, kind, extent=32, depth=3, base_channels=16, kernel=3, n_blocks=8,
                 classifier_channels=8, max_classifier_channels=64):
        self.kind = kind
        self.extent = int(extent)
        self.depth = int(depth)
        self.base_channels = int(base_channels)
        self.kernel = int(kernel)
        self.n_blocks = int(n_blocks)
        self.classifier_channels = int(classifier_channels)
        self.max_classifier_channels = int(max_classifier_channels)
        self.validate()

    def __repr__(self):
        return '<NetworkSpec %s %rx%r>' % (self.kind, self.extent, self.extent)

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError('Unknown network kind %r' % self.kind)
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError('Kernel size must be odd and positive, got %r' % self.kernel)
        if self.kind == 'ann1_c':
            if self.n_blocks < 2 or self.n_blocks % 2:
                raise ConfigError('The classifier needs an even number of blocks, got %r' % self.n_blocks)
            if self.classifier_channels < 1:
                raise ConfigError('Classifier channels must be >= 1')
            n_pools = self.n_blocks // 2
            if self.extent % 2 ** n_pools:
                raise ConfigError('Extent %r does not survive %r 2x2 pools' % (self.extent, n_pools))
        else:
            if self.depth < 1 or self.base_channels < 1:
                raise ConfigError('U-Net depth and base channels must be >= 1')
            if self.extent % 2 ** self.depth:
                raise ConfigError('Extent %r is not divisible by 2^%r' % (self.extent, self.depth))

    @property
    def out_planes(self):
        return 3 if self.kind == 'ann2' else 1

    def unet_channels(self, level):
        return self.base_channels * 2 ** level

    def block_channels(self, block):
        return min(self.classifier_channels * 2 ** (block // 2), self.max_classifier_channels)

    def to_pairs(self):
        return [
            ('kind', self.kind),
            ('extent', self.extent),
            ('depth', self.depth),
            ('base_channels', self.base_channels),
            ('kernel', self.kernel),
            ('n_blocks', self.n_blocks),
            ('classifier_channels', self.classifier_channels),
            ('max_classifier_channels', self.max_classifier_channels),
        ]

    @classmethod
    def from_dict(cls, d):
        return cls(d['kind'], int(d['extent']), int(d['depth']), int(d['base_channels']), int(d['kernel']),
                   int(d['n_blocks']), int(d['classifier_channels']), int(d['max_classifier_channels']))


class ModelState:
    """ Parameters, batch-norm states and training bookkeeping of one network. """

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = int(seed)
        self.params = OrderedDict()
        self.bn = OrderedDict()
        self.step = 0
        self._rng = np.random.default_rng(self.seed)

    def __repr__(self):
        return '<ModelState %s step=%r>' % (self.spec.kind, self.step)

    def add_conv(self, name, cin, cout, kernel=None):
        k = self.spec.kernel if kernel is None else kernel
        self.params[name + '.w'] = Param(he_uniform((k, k, cin, cout), k * k * cin, self._rng), name + '.w')
        self.params[name + '.b'] = Param(np.zeros(cout), name + '.b')

    def add_dense(self, name, cin, cout):
        self.params[name + '.w'] = Param(he_uniform((cin, cout), cin, self._rng), name + '.w')
        self.params[name + '.b'] = Param(np.zeros(cout), name + '.b')

    def add_bn(self, name, channels):
        self.bn[name] = BatchNormState(channels, name)

    def param_list(self):
        """ Every trainable Param, batch-norm affines included, in a fixed order. """
        out = list(self.params.values())
        for s in self.bn.values():
            out += [s.gamma, s.beta]
        return out

    def named_arrays(self):
        out = [(n, p.data) for n, p in self.params.items()]
        for n, s in self.bn.items():
            out += [(n + '.gamma', s.gamma.data), (n + '.beta', s.beta.data),
                    (n + '.running_mean', s.running_mean), (n + '.running_var', s.running_var)]
        return out

    def snapshot(self):
        return [(n, a.copy()) for n, a in self.named_arrays()]

    def restore(self, arrays):
        """ Overwrite every tensor from (name, array) pairs as produced by named_arrays(). """
        expected = [n for n, _ in self.named_arrays()]
        if [n for n, _ in arrays] != expected:
            raise FormatError('Stored tensors do not match the %s layout' % self.spec.kind)
        values = dict(arrays)
        for n, p in self.params.items():
            _assign(p, values[n], n)
        for n, s in self.bn.items():
            _assign(s.gamma, values[n + '.gamma'], n + '.gamma')
            _assign(s.beta, values[n + '.beta'], n + '.beta')
            s.running_mean = _checked(s.running_mean, values[n + '.running_mean'], n + '.running_mean')
            s.running_var = _checked(s.running_var, values[n + '.running_var'], n + '.running_var')


def _checked(old, new, name):
    if old.shape != new.shape:
        raise FormatError('%s has shape %r, expected %r' % (name, new.shape, old.shape))
    return np.array(new, dtype=old.dtype)


def _assign(p, value, name):
    p.data = _checked(p.data, value, name)
    p.zero_grad()


def param_count(model):
    return int(sum(p.data.size for p in model.param_list()))


def build_ann1_r(spec, seed=0):
    """ U-Net reconstructor with one output plane. """
    if spec.kind not in ('ann1_r', 'ann2'):
        raise ConfigError('build_ann1_r needs a U-Net spec, got %r' % spec.kind)
    m = ModelState(spec, seed)
    cin = 1
    for level in range(spec.depth):
        c = spec.unet_channels(level)
        _add_dense_block(m, 'enc%d' % level, cin, c)
        cin = c
    _add_dense_block(m, 'mid', cin, spec.unet_channels(spec.depth))
    for level in reversed(range(spec.depth)):
        c = spec.unet_channels(level)
        _add_dense_block(m, 'dec%d' % level, spec.unet_channels(level + 1) + c, c)
    m.add_conv('head', spec.base_channels, spec.out_planes, kernel=1)
    return m


def build_ann2(spec, seed=0):
    if spec.kind != 'ann2':
        raise ConfigError('build_ann2 needs an ann2 spec, got %r' % spec.kind)
    return build_ann1_r(spec, seed)


def build_ann1_c(spec, seed=0):
    if spec.kind != 'ann1_c':
        raise ConfigError('build_ann1_c needs an ann1_c spec, got %r' % spec.kind)
    m = ModelState(spec, seed)
    cin = 1
    for b in range(spec.n_blocks):
        c = spec.block_channels(b)
        m.add_conv('block%d.conv' % b, cin, c)
        m.add_bn('block%d.bn' % b, c)
        cin = c
    m.add_dense('fc', cin, N_CLASSES)
    return m


def build_model(spec, seed=0):
    if spec.kind == 'ann1_c':
        return build_ann1_c(spec, seed)
    if spec.kind == 'ann2':
        return build_ann2(spec, seed)
    return build_ann1_r(spec, seed)


def _add_dense_block(m, name, cin, cout):
    m.add_conv(name + '.conv1', cin, cout)
    m.add_conv(name + '.conv2', cout, cout)
    m.add_bn(name + '.bn', cout)


def _conv(m, x, name, act='relu'):
    y = conv2d(x, m.params[name + '.w'], bias=m.params[name + '.b'])
    return activation(y, act)


def _dense_block(m, x, name, mode):
    x = _conv(m, x, name + '.conv1')
    x = _conv(m, x, name + '.conv2')
    return batch_norm(x, m.bn[name + '.bn'], mode)


def as_batch(x, extent):
    """
    Accept [H,W], [B,H,W] or [B,H,W,1] images and return a [B,H,W,1] array.
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[np.newaxis]
    if x.ndim == 3:
        x = x[..., np.newaxis]
    if x.ndim != 4 or x.shape[-1] != 1:
        raise DimensionError('Expected single-channel images, got shape %r' % (x.shape,))
    if x.shape[1] != extent or x.shape[2] != extent:
        raise DimensionError('Network expects %rx%r images, got %rx%r' % (extent, extent, x.shape[1], x.shape[2]))
    return x


def forward(model, x, mode='eval'):
    """
    Run a network on a batch of CCM images.
    :return: Tensor [B,H,W,planes] of sigmoid intensities, or [B,3] class probabilities
    """
    spec = model.spec
    x = Tensor(as_batch(x, spec.extent))
    if spec.kind == 'ann1_c':
        for b in range(spec.n_blocks):
            x = _conv(model, x, 'block%d.conv' % b)
            x = batch_norm(x, model.bn['block%d.bn' % b], mode)
            if b % 2 == 1:
                x = max_pool2(x)
        logits = dense(global_avg_pool(x), model.params['fc.w'], model.params['fc.b'])
        return activation(logits, 'softmax')

    skips = []
    for level in range(spec.depth):
        x = _dense_block(model, x, 'enc%d' % level, mode)
        skips.append(x)
        x = max_pool2(x)
    x = _dense_block(model, x, 'mid', mode)
    for level in reversed(range(spec.depth)):
        x = upsample2_concat(x, skips[level])
        x = _dense_block(model, x, 'dec%d' % level, mode)
    return _conv(model, x, 'head', act='sigmoid')


def ann2_target(ref, layer):
    """ 3-plane target: the reference at its 1-based layer, zero planes elsewhere. """
    ref = np.asarray(ref)
    if layer not in (1, 2, 3):
        raise ValueError('Layer label must be 1, 2 or 3, got %r' % layer)
    out = np.zeros(ref.shape + (3,), dtype=ref.dtype)
    out[..., layer - 1] = ref
    return out


def save_model(model, path):
    header = model.spec.to_pairs() + [('seed', model.seed), ('step', model.step)]
    write_bundle(path, MAGIC, header, model.named_arrays())


def load_model(path, expected_extent=None, expected_kind=None):
    """
    Rebuild a model from its file. The spec stored in the file is checked against the
    expected extent and kind when given.
    """
    header, records = read_bundle(path, MAGIC)
    try:
        spec = NetworkSpec.from_dict(header)
    except KeyError as e:
        raise FormatError('%s is missing header key %s' % (path, e))
    if expected_extent is not None and spec.extent != expected_extent:
        raise ConfigError('Model %s was built for %rx%r images, not %rx%r'
                          % (path, spec.extent, spec.extent, expected_extent, expected_extent))
    if expected_kind is not None and spec.kind != expected_kind:
        raise ConfigError('Model %s is a %s network, expected %s' % (path, spec.kind, expected_kind))
    model = build_model(spec, int(header['seed']))
    model.restore(records)
    model.step = int(header['step'])
    return model
