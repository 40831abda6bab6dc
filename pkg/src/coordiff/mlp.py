"""Fully connected network on a flat parameter vector, with hand-written backprop."""

import numpy as np

from ._validation import as_batch, check_random_state
from .exceptions import DimensionError, NumericDivergenceError, ValidationError

_ACTIVATIONS = ("silu", "tanh", "identity")


def _act(name, z):
    if name == "silu":
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return z * sig, sig
    if name == "tanh":
        a = np.tanh(z)
        return a, a
    return z, None


def _act_grad(name, z, aux):
    if name == "silu":
        return aux * (1.0 + z * (1.0 - aux))
    if name == "tanh":
        return 1.0 - aux * aux
    return np.ones_like(z)


class MLP:
    """Dense network ``layer_sizes[0] -> ... -> layer_sizes[-1]``; linear output head.

    Parameters live in one flat float64 vector laid out layer by layer as
    ``W (in, out)`` row-major followed by ``b (out,)``.
    """

    def __init__(self, layer_sizes, activation="silu"):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValidationError(f"bad layer_sizes {layer_sizes!r}")
        if activation not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        self.layer_sizes = tuple(sizes)
        self.activation = activation
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b, fan_in, fan_out))
        self.n_params = offset

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def init_params(self, rng, out_scale=1.0):
        """LeCun-normal hidden weights, zero biases; the head is scaled by ``out_scale``."""
        rng = check_random_state(rng)
        p = np.zeros(self.n_params)
        last = len(self._slices) - 1
        for k, (w, _, fan_in, fan_out) in enumerate(self._slices):
            scale = 1.0 / np.sqrt(fan_in)
            if k == last:
                scale *= out_scale
            p[w] = scale * rng.standard_normal(fan_in * fan_out)
        return p

    def unpack(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {params.shape}")
        return [(params[w].reshape(fi, fo), params[b]) for w, b, fi, fo in self._slices]

    def forward(self, params, inputs, return_cache=False):
        x, squeeze = as_batch(inputs, self.n_in, name="inputs")
        layers = self.unpack(params)
        cache = []
        h = x
        last = len(layers) - 1
        for k, (W, b) in enumerate(layers):
            z = h @ W + b
            if k == last:
                cache.append((h, z, None))
                h = z
            else:
                a, aux = _act(self.activation, z)
                cache.append((h, z, aux))
                h = a
        out = h[0] if squeeze and not return_cache else h
        return (out, cache) if return_cache else out

    def backward(self, params, cache, grad_out, need_input_grad=False):
        """Reverse-mode pass given ``dL/d(output)`` of shape ``(n, n_out)``.

        Returns the flat parameter gradient and, optionally, ``dL/d(inputs)``.
        """
        layers = self.unpack(params)
        grad = np.zeros(self.n_params)
        g = np.asarray(grad_out, dtype=np.float64)
        last = len(layers) - 1
        for k in range(last, -1, -1):
            W, _ = layers[k]
            h, z, aux = cache[k]
            if k != last:
                g = g * _act_grad(self.activation, z, aux)
            w_sl, b_sl, _, _ = self._slices[k]
            grad[w_sl] = (h.T @ g).ravel()
            grad[b_sl] = g.sum(axis=0)
            if k > 0 or need_input_grad:
                g = g @ W.T
        return (grad, g) if need_input_grad else grad

    def input_gradient(self, params, inputs, grad_out=None):
        """``d(sum(grad_out * output))/d(inputs)``; defaults to the gradient of a scalar head."""
        out, cache = self.forward(params, inputs, return_cache=True)
        if grad_out is None:
            grad_out = np.ones_like(out)
        _, gin = self.backward(params, cache, grad_out, need_input_grad=True)
        return gin


def mlp_gradients(loss_and_grad, params):
    """Evaluate a ``params -> (loss, grad)`` closure and guard against non-finite loss."""
    loss, grad = loss_and_grad(params)
    if not np.isfinite(loss):
        raise NumericDivergenceError(f"non-finite loss {loss!r}")
    return np.asarray(grad, dtype=np.float64)


class Adam:
    """Plain Adam on a flat vector; state is explicit so runs are reproducible."""

    def __init__(self, n_params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
