"""Shared oracles for the gradient-check tests."""

import numpy as np


def finite_difference_grad(loss_fn, vec, h=1e-5):
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        up = vec.copy()
        up[i] += h
        down = vec.copy()
        down[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(down)) / (2 * h)
    return grad


def relative_error(a, b):
    # the floor turns the comparison absolute near zero: at h=1e-5 central
    # differences carry ~1e-10 of truncation and roundoff noise, so entries
    # more than ~5 orders below the gradient scale cannot be compared
    # relatively (same reason autodiff gradcheckers pair rtol with atol)
    scale = np.maximum(np.abs(a) + np.abs(b), 1e-5)
    return np.max(np.abs(a - b) / scale)


def kink_distance(net, X):
    """Smallest |pre-activation| over the hidden ReLU layers.

    Central differences are invalid within ~h of a ReLU kink, so gradient
    checks resample any instance where this comes out tiny.
    """
    closest = np.inf
    a = np.asarray(X, dtype=net.dtype)
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        if l < net.n_layers - 1:
            closest = min(closest, float(np.abs(z).min()))
            a = z * (z > 0)
        else:
            a = z
    return closest


def flatten_grads(grads):
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
