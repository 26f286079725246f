"""Layer objects over the raw ops.

Layers are thin parameter holders with a functional forward/backward pair:
``forward(x) -> (y, cache)`` and ``backward(dy, cache) -> dx``, the latter
accumulating into each parameter's ``.grad``.  No activation state lives on
the layer, so a frozen model can run forwards concurrently; only training
mutates anything (parameter grads, BN running buffers, dropout rng).
"""

import numpy as np

from falconseg.nn import ops


class Param:
    """A learnable tensor with an accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        return self.data.size


class Module:
    """Base: named parameters/buffers, train/eval mode, recursive walk."""

    training = True

    def children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Param):
                yield (prefix + name, val)
        for cname, child in self.children():
            yield from child.named_params(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        """Non-learnable state saved in checkpoints (BN running stats)."""
        for name in getattr(self, "buffer_names", ()):
            yield (prefix + name, getattr(self, name))
        for cname, child in self.children():
            yield from child.named_buffers(prefix + cname + ".")

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def train(self):
        self.training = True
        for _, c in self.children():
            c.train()
        return self

    def eval(self):
        self.training = False
        for _, c in self.children():
            c.eval()
        return self

    def state_dict(self) -> dict:
        out = {name: p.data.copy() for name, p in self.named_params()}
        for name, buf in self.named_buffers():
            out[name] = np.asarray(buf).copy()
        return out

    def load_state_dict(self, state: dict):
        own = dict(self.named_params())
        bufs = dict(self.named_buffers())
        for name, arr in state.items():
            if name in own:
                if own[name].data.shape != arr.shape:
                    raise ValueError(
                        f"shape mismatch for {name}: have {own[name].data.shape}, "
                        f"loading {arr.shape}"
                    )
                own[name].data[...] = arr
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unexpected entry in state dict: {name}")
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state dict missing entries: {sorted(missing)}")

    def weight_checksum(self) -> str:
        """Order-stable digest of all parameters and buffers."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(dict(self.state_dict())):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.state_dict()[name]).tobytes())
        return h.hexdigest()

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def he_init(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1,
                 pad=None, rng=None):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        rng = rng or np.random.default_rng(0)
        self.w = Param(he_init(rng, (cout, cin, k, k), cin * k * k))
        self.b = Param(np.zeros(cout))

    def forward(self, x):
        return ops.conv2d_forward(x, self.w.data, self.b.data, self.stride, self.pad)

    def backward(self, dy, cache):
        dx, dw, db = ops.conv2d_backward(dy, cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class LeakyReLU(Module):
    def __init__(self, slope: float):
        self.slope = slope

    def forward(self, x):
        return ops.leaky_relu_forward(x, self.slope)

    def backward(self, dy, cache):
        return ops.leaky_relu_backward(dy, cache)


class Sigmoid(Module):
    def forward(self, x):
        return ops.sigmoid_forward(x)

    def backward(self, dy, cache):
        return ops.sigmoid_backward(dy, cache)


class UpsampleNearest2(Module):
    def forward(self, x):
        return ops.upsample_nearest2_forward(x)

    def backward(self, dy, cache):
        return ops.upsample_nearest2_backward(dy, cache)


class GlobalAvgPool(Module):
    def forward(self, x):
        return ops.global_avg_pool_forward(x)

    def backward(self, dy, cache):
        return ops.global_avg_pool_backward(dy, cache)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.w = Param(he_init(rng, (cout, cin), cin))
        self.b = Param(np.zeros(cout))

    def forward(self, x):
        return ops.linear_forward(x, self.w.data, self.b.data)

    def backward(self, dy, cache):
        dx, dw, db = ops.linear_backward(dy, cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(c))
        self.beta = Param(np.zeros(c))
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def forward(self, x):
        return ops.batchnorm_forward(
            x, self.gamma.data, self.beta.data, self.running_mean,
            self.running_var, self.momentum, self.eps, self.training,
        )

    def backward(self, dy, cache):
        dx, dgamma, dbeta = ops.batchnorm_backward(dy, cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class Dropout(Module):
    """Inverted dropout driven by an owned rng stream.

    The stream is consumed only in training mode, so eval-mode forwards
    leave it untouched and repeated eval calls are identical.
    """

    def __init__(self, rate: float, rng=None):
        self.rate = rate
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x):
        return ops.dropout_forward(x, self.rate, self.rng, self.training)

    def backward(self, dy, cache):
        return ops.dropout_backward(dy, cache)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy
