"""Parameter store and small building blocks shared by both branches."""
import hashlib

import numpy as np

from .tensor import Tensor, conv2d, relu


class Params:
    """Ordered name -> Tensor mapping of trainable weights."""

    def __init__(self, arrays=None):
        self._t = {}
        for name, a in (arrays or {}).items():
            self[name] = a

    def __setitem__(self, name, value):
        self._t[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def names(self):
        return list(self._t)

    def items(self):
        return self._t.items()

    def arrays(self):
        return {k: v.data.copy() for k, v in self._t.items()}

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def set_trainable(self, flag):
        for t in self._t.values():
            t.requires_grad = bool(flag)

    def digest(self):
        h = hashlib.sha256()
        for k in sorted(self._t):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._t[k].data).tobytes())
        return h.hexdigest()

    def subset(self, prefix):
        p = Params()
        for k, v in self._t.items():
            if k.startswith(prefix):
                p._t[k] = v
        return p


def he_conv(rng, k, cin, cout, gain=1.0):
    std = gain * np.sqrt(2.0 / (k * k * cin))
    return rng.normal(0.0, std, size=(k, k, cin, cout))


def xavier(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def add_conv(params, rng, name, k, cin, cout, gain=1.0):
    params[name + ".w"] = he_conv(rng, k, cin, cout, gain)
    params[name + ".b"] = np.zeros(cout)


def conv(params, name, x, stride=1):
    w = params[name + ".w"]
    k = w.shape[0]
    return conv2d(x, w, params[name + ".b"], stride=stride, pad=k // 2)


def add_resblock(params, rng, name, k, c):
    add_conv(params, rng, name + ".c1", k, c, c)
    add_conv(params, rng, name + ".c2", k, c, c, gain=0.1)


def resblock(params, name, x):
    h = relu(conv(params, name + ".c1", x))
    return relu(x + conv(params, name + ".c2", h))
