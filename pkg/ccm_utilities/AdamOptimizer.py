import numpy as np


class AdamOptimizer:
    """
    Adam update over a list of Params. First and second moments are stored per Param name.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps),  m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t)
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError('Learning rate must be non-negative, got %r' % lr)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = dict()
        self.v = dict()

    def __repr__(self):
        return '<AdamOptimizer lr=%r step=%r>' % (self.lr, self.step_count)

    @staticmethod
    def zero_grad(params):
        for p in params:
            p.zero_grad()

    def step(self, params):
        """ Apply one update to every Param in place and increment the step count. """
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for p in params:
            g = p.grad.astype(np.float64)
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(g)
                self.v[p.name] = np.zeros_like(g)
            m = self.beta1 * self.m[p.name] + (1 - self.beta1) * g
            v = self.beta2 * self.v[p.name] + (1 - self.beta2) * g * g
            self.m[p.name] = m
            self.v[p.name] = v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
        return params
