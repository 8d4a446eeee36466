import numpy as np

from ccm_utilities.errors import DimensionError, ConfigError, StateError, NumericError

"""
Minimal reverse-mode differentiation over numpy arrays.

Images are stored channels-last, batched tensors as [B, H, W, C]. Every op returns a new Tensor
that remembers its parents and a closure mapping the output gradient to the parents' gradients.
"""

EPS_CLIP = 1e-7

_dtype = [np.float32]


def get_dtype():
    return _dtype[0]


class precision:
    """
    Context manager selecting the float type of tensors created inside it.
    64-bit mode is used for gradient checks.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        if self.dtype not in (np.float32, np.float64):
            raise ConfigError('Only float32 and float64 precision is supported.')
        self._old = None

    def __enter__(self):
        self._old = _dtype[0]
        _dtype[0] = self.dtype
        return self

    def __exit__(self, *exc):
        _dtype[0] = self._old


class Tensor:

    def __init__(self, data, parents=(), backward_fn=None, op='input', requires_grad=False):
        data = np.array(data, dtype=get_dtype())
        if not np.all(np.isfinite(data)):
            raise NumericError('Non-finite values produced by %s' % op)
        self.data = data
        self.parents = tuple(parents)
        self.op = op
        self.grad = None
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    def __repr__(self):
        return '<Tensor:' + self.op + ' ' + str(self.shape) + '>'

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)


class Param(Tensor):
    """ A trainable tensor. Its gradient accumulates across backward calls until zeroed. """

    def __init__(self, value, name):
        super(Param, self).__init__(value, op='param', requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return '<Param:' + self.name + ' ' + str(self.shape) + '>'

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class BatchNormState:
    """ Per-channel affine parameters and running statistics of one batch-normalization layer. """

    def __init__(self, channels, name, epsilon=1e-5, momentum=0.1):
        if not epsilon > 0:
            raise ConfigError('Batch-norm epsilon must be positive, got %r' % epsilon)
        if not 0 < momentum < 1:
            raise ConfigError('Batch-norm momentum must lie in (0, 1), got %r' % momentum)
        self.name = name
        self.gamma = Param(np.ones(channels), name + '.gamma')
        self.beta = Param(np.zeros(channels), name + '.beta')
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())
        self.epsilon = epsilon
        self.momentum = momentum

    def __repr__(self):
        return '<BatchNormState:' + self.name + '>'


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def backward(loss):
    """
    Propagate d(loss)/d(node) through the recorded graph. Params accumulate into .grad, other
    tensors created with requires_grad=True receive their gradient in .grad.
    """
    if not isinstance(loss, Tensor) or loss._backward_fn is None:
        raise StateError('backward called before a forward pass was recorded')
    if loss.data.size != 1:
        raise DimensionError('backward needs a scalar loss, got shape %r' % (loss.shape,))

    # Deterministic topological order: depth-first over parents in argument order
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad = (node.grad + g).astype(node.data.dtype)
        elif not node.parents:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _batched(x):
    """ Promote an [H, W, C] array to [1, H, W, C]. Returns the array and whether it was promoted. """
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise DimensionError('Expected an [H,W,C] or [B,H,W,C] tensor, got shape %r' % (x.shape,))


def conv2d(x, k, stride=1, padding='same', bias=None):
    """
    2D correlation (no kernel flip).
    :param x: Tensor [H,W,Cin] or [B,H,W,Cin]
    :param k: Tensor [kh,kw,Cin,Cout]
    :param padding: 'same' (zeros, odd kernels only) or 'valid'
    :param bias: optional Tensor [Cout]
    """
    x = as_tensor(x)
    k = as_tensor(k)
    xb, promoted = _batched(x.data)
    kh, kw, cin, cout = k.shape
    if xb.shape[-1] != cin:
        raise DimensionError('Input has %r channels but the kernel expects %r' % (xb.shape[-1], cin))
    if stride < 1:
        raise ValueError('Stride must be >= 1, got %r' % stride)
    if padding == 'same':
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError('Same padding needs odd kernel extents, got %rx%r' % (kh, kw))
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == 'valid':
        ph, pw = 0, 0
    else:
        raise ValueError("padding must be 'same' or 'valid', got %r" % padding)

    b, h, w, _ = xb.shape
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError('Kernel %rx%r does not fit input %rx%r' % (kh, kw, h, w))

    xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kd = k.data
    out = np.zeros((b, ho, wo, cout), dtype=np.result_type(xp, kd))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            out += patch @ kd[i, j]
    parents = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward_fn(g):
        gb = g[np.newaxis] if promoted else g
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kd)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
                dk[i, j] = np.tensordot(xp[sl], gb, axes=([0, 1, 2], [0, 1, 2]))
                dxp[sl] += gb @ kd[i, j].T
        dx = dxp[:, ph:ph + h, pw:pw + w, :]
        grads = [dx[0] if promoted else dx, dk]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 1, 2)))
        return grads

    return Tensor(out[0] if promoted else out, parents, backward_fn, op='conv2d')


def activation(x, kind):
    """
    Elementwise relu / sigmoid, or softmax over the last axis.
    """
    x = as_tensor(x)
    d = x.data
    if kind == 'relu':
        mask = d > 0
        return Tensor(d * mask, [x], lambda g: [g * mask], op='relu')
    if kind == 'sigmoid':
        e = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(get_dtype())
        # stays strictly inside (0, 1) at the working precision
        eps = np.finfo(s.dtype).eps
        s = np.clip(s, eps, 1 - eps)
        return Tensor(s, [x], lambda g: [g * s * (1.0 - s)], op='sigmoid')
    if kind == 'softmax':
        e = np.exp(d - d.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True)
        return Tensor(s, [x], lambda g: [s * (g - (g * s).sum(axis=-1, keepdims=True))], op='softmax')
    raise ValueError('Unknown activation %r' % kind)


def max_pool2(x):
    """ 2x2 max pooling with stride 2. Gradient is routed to the first maximum of each window. """
    x = as_tensor(x)
    xb, promoted = _batched(x.data)
    b, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise DimensionError('max_pool2 needs even extents, got %rx%r' % (h, w))
    windows = xb.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    idx = np.argmax(windows, axis=-1)[..., np.newaxis]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def backward_fn(g):
        gb = g[np.newaxis] if promoted else g
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx, gb[..., np.newaxis], axis=-1)
        dx = gw.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)
        return [dx[0] if promoted else dx]

    return Tensor(out[0] if promoted else out, [x], backward_fn, op='max_pool2')


def batch_norm(x, s, mode):
    """
    Batch normalization of a [B,H,W,C] tensor over its batch and spatial axes.
    Train mode normalizes with the batch statistics and updates the running statistics:
        running_mean <- (1 - momentum) * running_mean + momentum * mean
        running_var  <- (1 - momentum) * running_var  + momentum * var * n / (n - 1)
    Eval mode normalizes with the running statistics.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError('batch_norm expects [B,H,W,C], got shape %r' % (x.shape,))
    n_b, h, w, c = x.shape
    if c != s.gamma.shape[0]:
        raise DimensionError('batch_norm %s has %r channels, input has %r' % (s.name, s.gamma.shape[0], c))
    gamma = s.gamma.data
    beta = s.beta.data

    if mode == 'train':
        if n_b < 2:
            raise ConfigError('batch_norm in train mode needs a batch of at least 2, got %r' % n_b)
        n = n_b * h * w
        mean = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        m = s.momentum
        s.running_mean = ((1 - m) * s.running_mean + m * mean).astype(s.running_mean.dtype)
        s.running_var = ((1 - m) * s.running_var + m * var * n / (n - 1)).astype(s.running_var.dtype)
    elif mode == 'eval':
        n = None
        mean = s.running_mean
        var = s.running_var
    else:
        raise ValueError("mode must be 'train' or 'eval', got %r" % mode)

    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (x.data - mean) * inv_std
    out = gamma * xhat + beta

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 1, 2))
        dbeta = g.sum(axis=(0, 1, 2))
        dxhat = g * gamma
        if n is None:
            dx = dxhat * inv_std
        else:
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
        return [dx, dgamma, dbeta]

    return Tensor(out, [x, s.gamma, s.beta], backward_fn, op='batch_norm')


def upsample2_concat(x, skip):
    """
    Nearest-neighbour x2 upsampling of x, concatenated with skip along channels (skip channels last).
    """
    x = as_tensor(x)
    skip = as_tensor(skip)
    xb, promoted = _batched(x.data)
    sb, _ = _batched(skip.data)
    b, h, w, c1 = xb.shape
    if sb.shape[0] != b or sb.shape[1] != 2 * h or sb.shape[2] != 2 * w:
        raise DimensionError('Skip extents %r must double input extents %r' % (skip.shape, x.shape))
    up = xb.repeat(2, axis=1).repeat(2, axis=2)
    out = np.concatenate([up, sb], axis=-1)

    def backward_fn(g):
        gb = g[np.newaxis] if promoted else g
        gx = gb[..., :c1].reshape(b, h, 2, w, 2, c1).sum(axis=(2, 4))
        gs = gb[..., c1:]
        if promoted:
            return [gx[0], gs[0]]
        return [gx, gs]

    return Tensor(out[0] if promoted else out, [x, skip], backward_fn, op='upsample2_concat')


def global_avg_pool(x):
    """ [B,H,W,C] -> [B,C] mean over the spatial axes. """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError('global_avg_pool expects [B,H,W,C], got shape %r' % (x.shape,))
    _, h, w, _ = x.shape
    out = x.data.mean(axis=(1, 2))
    return Tensor(out, [x], lambda g: [np.broadcast_to(g[:, np.newaxis, np.newaxis, :] / (h * w), x.shape).copy()],
                  op='global_avg_pool')


def dense(x, w, b):
    """ Affine layer [B,Cin] @ [Cin,Cout] + [Cout]. """
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError('dense input has %r features, weights expect %r' % (x.shape[-1], w.shape[0]))
    out = x.data @ w.data + b.data
    return Tensor(out, [x, w, b], lambda g: [g @ w.data.T, x.data.T @ g, g.sum(axis=0)], op='dense')


def tsum(x):
    """ Sum of all elements, as a scalar tensor. """
    x = as_tensor(x)
    return Tensor(x.data.sum(), [x], lambda g: [np.full_like(x.data, g)], op='sum')


def pixelwise_bce(p, g):
    """
    Pixel-wise binary cross-entropy, averaged over all N elements:
        L = (1/N) sum_i -g_i log p_i - (1 - g_i) log(1 - p_i)
    p is clipped to [EPS_CLIP, 1 - EPS_CLIP]; the gradient is zero where clipping is active.
    """
    p = as_tensor(p)
    gt = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=p.data.dtype)
    if gt.shape != p.shape:
        raise DimensionError('Prediction shape %r does not match target shape %r' % (p.shape, gt.shape))
    lo = p.data.dtype.type(EPS_CLIP)
    hi = p.data.dtype.type(1 - EPS_CLIP)
    pc = np.clip(p.data, lo, hi)
    n = pc.size
    loss = np.mean(-gt * np.log(pc) - (1 - gt) * np.log(1 - pc))
    inside = (p.data >= lo) & (p.data <= hi)

    def backward_fn(gr):
        return [gr * inside * (pc - gt) / (pc * (1 - pc)) / n]

    return Tensor(loss, [p], backward_fn, op='pixelwise_bce')


def categorical_ce(probs, label):
    """
    Cross-entropy of class probabilities against a one-hot target: -log probs[label].
    :param probs: Tensor [K] or [B,K] of probabilities summing to 1 along the last axis
    :param label: int, or int array of length B; 0-based class index
    """
    probs = as_tensor(probs)
    pd = probs.data
    single = pd.ndim == 1
    pb = pd[np.newaxis] if single else pd
    labels = np.atleast_1d(np.asarray(label))
    k = pb.shape[-1]
    if labels.shape[0] != pb.shape[0]:
        raise DimensionError('Got %r labels for %r probability rows' % (labels.shape[0], pb.shape[0]))
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError('Class labels must lie in [0, %r), got %r' % (k, labels.tolist()))
    if np.any(np.abs(pb.sum(axis=-1) - 1) > 1e-5):
        raise ValueError('Class probabilities must sum to 1')
    lo = pd.dtype.type(EPS_CLIP)
    hi = pd.dtype.type(1 - EPS_CLIP)
    rows = np.arange(pb.shape[0])
    picked = pb[rows, labels]
    pc = np.clip(picked, lo, hi)
    loss = np.mean(-np.log(pc))

    def backward_fn(gr):
        gp = np.zeros_like(pb)
        inside = (picked >= lo) & (picked <= hi)
        gp[rows, labels] = -gr * inside / pc / pb.shape[0]
        return [gp[0] if single else gp]

    return Tensor(loss, [probs], backward_fn, op='categorical_ce')


def he_uniform(shape, fan_in, rng):
    """ Fan-in scaled uniform initialisation, limit sqrt(6 / fan_in). """
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)
