"""Fully connected ReLU network with hand-written reverse-mode gradients.

The network computes ``z_l = a_{l-1} W_l^T + b_l`` with ReLU on every layer
except the last, which stays linear so embeddings can occupy all orthants.
``forward`` returns a tape of cached activations; ``backward`` replays it
exactly, which keeps the gradients analytic rather than approximated.  The
tape also captures the weight arrays used, and the Adam optimizer installs
freshly allocated parameters on every step, so gradients taken against an
old tape always see the parameters the forward pass actually used.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ReluNet",
    "Tape",
    "Adam",
    "lr_at_epoch",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"BLCK"
_CKPT_VERSION = 1


@dataclass
class Tape:
    """Cached forward state: per-layer inputs, ReLU masks, weight refs."""

    inputs: list[np.ndarray]
    relu_masks: list[np.ndarray | None]
    weights: list[np.ndarray]

    def take(self, rows):
        """Row-sliced view of the tape for backpropagating a sub-batch."""
        rows = np.asarray(rows)
        return Tape(
            inputs=[a[rows] for a in self.inputs],
            relu_masks=[None if m is None else m[rows] for m in self.relu_masks],
            weights=self.weights,
        )


class ReluNet:
    """Multilayer perceptron: ReLU hidden layers, linear output layer.

    Weights use uniform He-style fan-in initialization,
    ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, drawn from a seeded PCG64
    generator so identical seeds give bitwise-identical parameters; biases
    start at zero.

    Args:
        layer_dims: Unit counts including input and output, e.g.
            ``[784, 400, 400, 20]``.
        rng: Seed or ``numpy.random.Generator`` for initialization.
        dtype: Parameter dtype; float32 for training, float64 for
            gradient-check precision.
    """

    def __init__(self, layer_dims, rng=None, dtype=np.float32):
        if len(layer_dims) < 2:
            raise ValueError("need at least an input and an output dimension")
        if any(d < 1 for d in layer_dims):
            raise ValueError("layer dimensions must be positive")
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.layer_dims = [int(d) for d in layer_dims]
        self.dtype = np.dtype(dtype)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(
                gen.uniform(-bound, bound, size=(fan_out, fan_in)).astype(self.dtype)
            )
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def forward(self, X, want_tape=True):
        """Run a batch through the network.

        Args:
            X: (batch, in_dim) array.
            want_tape: Cache activations for a later ``backward``.

        Returns:
            ``(output, tape)``; ``tape`` is None when not requested.

        Raises:
            ValueError: On a dimension mismatch or non-finite output
                (fail fast instead of training on garbage).
        """
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (batch, {self.in_dim}), got {X.shape}")
        inputs = []
        masks: list[np.ndarray | None] = []
        a = X
        last = self.n_layers - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if want_tape:
                inputs.append(a)
            z = a @ W.T + b
            if l < last:
                mask = z > 0
                a = z * mask
                if want_tape:
                    masks.append(mask)
            else:
                a = z
                if want_tape:
                    masks.append(None)
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite network output")
        tape = Tape(inputs, masks, list(self.weights)) if want_tape else None
        return a, tape

    def backward(self, tape, output_grad, need_input_grad=False):
        """Exact reverse-mode gradients for the batch a tape recorded.

        Args:
            tape: Tape from a matching ``forward``.
            output_grad: (batch, out_dim) gradient of the scalar loss with
                respect to the network output.
            need_input_grad: Also propagate into the input batch.

        Returns:
            ``(grads, input_grad)`` where ``grads`` is a list of
            ``(dW, db)`` pairs in layer order.  ReLU uses subgradient zero
            at exactly zero pre-activation.
        """
        output_grad = np.asarray(output_grad, dtype=self.dtype)
        if len(tape.inputs) != self.n_layers:
            raise ValueError("tape does not match this network")
        if output_grad.shape != (tape.inputs[-1].shape[0], self.out_dim):
            raise ValueError(
                f"output_grad shape {output_grad.shape} does not match tape batch "
                f"{tape.inputs[-1].shape[0]} x {self.out_dim}"
            )
        grads = [None] * self.n_layers
        delta = output_grad
        for l in range(self.n_layers - 1, -1, -1):
            if tape.relu_masks[l] is not None:
                delta = delta * tape.relu_masks[l]
            grads[l] = (delta.T @ tape.inputs[l], delta.sum(axis=0))
            if l > 0 or need_input_grad:
                delta = delta @ tape.weights[l]
        return grads, (delta if need_input_grad else None)

    # -- parameter plumbing (used by checkpoints and gradient checks) ----

    def parameter_vector(self):
        return np.concatenate(
            [np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)]
        )

    def set_parameter_vector(self, vec):
        vec = np.asarray(vec, dtype=self.dtype)
        pos = 0
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = vec[pos : pos + W.size].reshape(W.shape).copy()
            pos += W.size
            self.biases[l] = vec[pos : pos + b.size].copy()
            pos += b.size
        if pos != vec.size:
            raise ValueError("parameter vector length mismatch")

    def copy_parameters(self):
        return [W.copy() for W in self.weights], [b.copy() for b in self.biases]

    def restore_parameters(self, snapshot):
        weights, biases = snapshot
        self.weights = [W.copy() for W in weights]
        self.biases = [b.copy() for b in biases]


class Adam(object):
    """Adam with bias correction; one step per gradient.

    Updates are functional: each step installs newly allocated parameter
    arrays, leaving any array captured by an earlier tape untouched.
    """

    def __init__(self, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [
            (np.zeros_like(W), np.zeros_like(b)) for W, b in zip(net.weights, net.biases)
        ]
        self.v = [
            (np.zeros_like(W), np.zeros_like(b)) for W, b in zip(net.weights, net.biases)
        ]
        self._scratch = [
            (np.empty_like(W), np.empty_like(b)) for W, b in zip(net.weights, net.biases)
        ]

    def _update(self, param, grad, m, v, scratch, c1, c2):
        np.multiply(grad, 1.0 - self.beta1, out=scratch)
        m *= self.beta1
        m += scratch
        np.multiply(grad, grad, out=scratch)
        scratch *= 1.0 - self.beta2
        v *= self.beta2
        v += scratch
        np.divide(v, c2, out=scratch)
        np.sqrt(scratch, out=scratch)
        scratch += self.eps
        np.divide(m, scratch, out=scratch)
        scratch *= self.lr / c1
        return param - scratch

    def step(self, net, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for l, (gW, gb) in enumerate(grads):
            mW, mb = self.m[l]
            vW, vb = self.v[l]
            sW, sb = self._scratch[l]
            net.weights[l] = self._update(net.weights[l], gW, mW, vW, sW, c1, c2)
            net.biases[l] = self._update(net.biases[l], gb, mb, vb, sb, c1, c2)


def lr_at_epoch(epoch, initial_lr, breakpoints=(400, 1000, 3000), factor=10.0):
    """Piecewise-constant schedule: divide by ``factor`` at each breakpoint.

    ``epoch`` counts from zero; an epoch equal to a breakpoint already uses
    the decayed rate ("after 400 epochs" means epoch 400 onward).
    """
    drops = sum(epoch >= b for b in breakpoints)
    return initial_lr / factor**drops


def embed_batches(net, X, batch_size=4096):
    """Forward a large matrix through ``net`` in batches, without tapes."""
    X = np.asarray(X, dtype=net.dtype)
    out = np.empty((X.shape[0], net.out_dim), dtype=net.dtype)
    for start in range(0, X.shape[0], batch_size):
        out[start : start + batch_size] = net.forward(
            X[start : start + batch_size], want_tape=False
        )[0]
    return out


def save_checkpoint(path, net, adam=None):
    """Write a resumable model checkpoint.

    Layout (little-endian): magic ``BLCK``, u32 version, u32 n_dims,
    u32 dims[n_dims]; per layer a row-major f32 weight block then an f32
    bias block; u8 adam flag; when set: u64 step count, f64 lr, f64 beta1,
    f64 beta2, f64 eps, then f32 first- and second-moment blocks in the
    same order as the parameters.
    """
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<2I", _CKPT_VERSION, len(net.layer_dims)))
        f.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
        for W, b in zip(net.weights, net.biases):
            f.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        if adam is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q4d", adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps))
            for (mW, mb), (vW, vb) in zip(adam.m, adam.v):
                for block in (mW, mb, vW, vb):
                    f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        ``(net, adam)``; ``adam`` is None when the file has no optimizer
        state.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, n_dims = struct.unpack_from("<2I", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = struct.unpack_from(f"<{n_dims}I", raw, 12)
    offset = 12 + 4 * n_dims
    net = ReluNet(dims, rng=0, dtype=dtype)

    def read_block(count):
        nonlocal offset
        block = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return block

    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        net.weights[l] = read_block(fan_out * fan_in).reshape(fan_out, fan_in).astype(dtype)
        net.biases[l] = read_block(fan_out).astype(dtype)
    (has_adam,) = struct.unpack_from("<B", raw, offset)
    offset += 1
    if not has_adam:
        return net, None
    t, lr, beta1, beta2, eps = struct.unpack_from("<Q4d", raw, offset)
    offset += 8 + 32
    adam = Adam(net, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    adam.t = t
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        mW = read_block(fan_out * fan_in).reshape(fan_out, fan_in).astype(dtype)
        mb = read_block(fan_out).astype(dtype)
        vW = read_block(fan_out * fan_in).reshape(fan_out, fan_in).astype(dtype)
        vb = read_block(fan_out).astype(dtype)
        adam.m[l] = (mW, mb)
        adam.v[l] = (vW, vb)
    return net, adam
