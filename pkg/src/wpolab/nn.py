"""A small numpy MLP with hand-written reverse mode.

``MLP.vjp`` returns vector-Jacobian products with respect to both the flat
parameter vector and the input, which is all the actor and critic updates
need: parameter gradients of scalar losses, and the action-gradient of the
critic.  Inputs may be a single vector or a batch ``(B, in_dim)``; parameter
gradients are summed over the batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._validation import ContractViolation, as_float_array, check_choice, check_rng

CHECKPOINT_HEADER = "wpolab-ckpt-v1"
ACTIVATIONS = ("elu", "silu", "identity")


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_ACT = {
    "elu": (elu, elu_grad),
    "silu": (silu, silu_grad),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass(frozen=True)
class ParamLayout:
    """Shape manifest mapping slices of the flat vector to layer weights and biases."""

    sizes: tuple

    @property
    def shapes(self):
        out = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            out.append((fan_out, fan_in))
            out.append((fan_out,))
        return out

    @property
    def size(self):
        return int(sum(np.prod(s) for s in self.shapes))

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.size,):
            raise ContractViolation(f"flat parameter vector has shape {flat.shape}, expected ({self.size},)")
        arrays, start = [], 0
        for shape in self.shapes:
            n = int(np.prod(shape))
            arrays.append(flat[start:start + n].reshape(shape))
            start += n
        return arrays

    def flatten(self, arrays):
        return np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])


class MLP:
    """Feed-forward network; hidden layers use ``activation``, the last layer is linear.

    Parameters live in one flat float vector (``params``); per-layer arrays are
    views into it, so ``set_params`` is the only way weights change.
    """

    def __init__(self, sizes, activation="elu", rng=None, params=None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ContractViolation(f"layer sizes must be >= 2 positive integers, got {sizes}")
        check_choice(activation, ACTIVATIONS, "activation")
        self.sizes = sizes
        self.activation = activation
        self.layout = ParamLayout(sizes)
        if params is None:
            params = self._init_params(check_rng(rng))
        self.set_params(params)

    def _init_params(self, rng):
        arrays = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arrays.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            arrays.append(np.zeros(fan_out))
        return self.layout.flatten(arrays)

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    @property
    def n_params(self):
        return self.layout.size

    @property
    def params(self):
        return self._flat

    def set_params(self, flat):
        flat = np.array(flat, dtype=float)
        if not np.all(np.isfinite(flat)):
            raise ContractViolation("network parameters must be finite")
        flat.setflags(write=False)
        self._layers = self.layout.unflatten(flat)
        self._flat = flat

    @property
    def layers(self):
        """List of ``(W, b)`` pairs; ``W`` has shape ``(fan_out, fan_in)``."""
        return list(zip(self._layers[0::2], self._layers[1::2]))

    def copy(self):
        return MLP(self.sizes, self.activation, params=self._flat)

    def _check_input(self, x):
        x = as_float_array(x, "input", ndim=(1, 2))
        if x.shape[-1] != self.in_dim:
            raise ContractViolation(f"input has {x.shape[-1]} features, network expects {self.in_dim}")
        return x

    def _forward_cache(self, x):
        act = _ACT[self.activation][0]
        pre, post = [], [x]
        h = x
        pairs = self.layers
        for i, (w, b) in enumerate(pairs):
            z = h @ w.T + b
            pre.append(z)
            h = z if i == len(pairs) - 1 else act(z)
            post.append(h)
        return pre, post

    def forward(self, x):
        x = self._check_input(x)
        return self._forward_cache(x)[1][-1]

    __call__ = forward

    def vjp(self, x, cotangent, wrt=("params", "input")):
        """Return ``(param_grad, input_grad)`` for ``cotangent^T d(output)``.

        Either element is ``None`` when not requested via ``wrt``.
        """
        x = self._check_input(x)
        cot = as_float_array(cotangent, "cotangent")
        if cot.shape != x.shape[:-1] + (self.out_dim,):
            raise ContractViolation(
                f"cotangent shape {cot.shape} does not match output shape {x.shape[:-1] + (self.out_dim,)}"
            )
        batched = x.ndim == 2
        if not batched:
            x, cot = x[None], cot[None]
        pre, post = self._forward_cache(x)
        dact = _ACT[self.activation][1]
        want_params = "params" in wrt
        grads = []
        delta = cot
        pairs = self.layers
        for i in range(len(pairs) - 1, -1, -1):
            w, _ = pairs[i]
            if want_params:
                grads.append(delta.sum(axis=0))
                grads.append(delta.T @ post[i])
            if i > 0 or "input" in wrt:
                delta = delta @ w
                if i > 0:
                    delta = delta * dact(pre[i - 1])
        param_grad = self.layout.flatten(grads[::-1]) if want_params else None
        input_grad = None
        if "input" in wrt:
            input_grad = delta if batched else delta[0]
        return param_grad, input_grad

    def backward_params(self, x, cotangent):
        return self.vjp(x, cotangent, wrt=("params",))[0]

    def backward_input(self, x, cotangent):
        return self.vjp(x, cotangent, wrt=("input",))[1]

    def manifest(self):
        return {"sizes": list(self.sizes), "activation": self.activation, "count": self.n_params}


def save_checkpoint(path, nets, extra=None):
    """Write named networks to a text checkpoint.

    Layout: the header line, one JSON manifest line, then one ``repr`` float per
    line (round-trips exactly) for each network in manifest order.
    """
    manifest = {"nets": {name: net.manifest() for name, net in nets.items()}, "extra": extra or {}}
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write(json.dumps(manifest, sort_keys=False) + "\n")
        for net in nets.values():
            fh.writelines(f"{float(v)!r}\n" for v in net.params)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(nets, extra)``."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise ContractViolation(f"{path}: unknown checkpoint header {header!r}")
        manifest = json.loads(fh.readline())
        values = np.array([float(line) for line in fh if line.strip()])
    nets, start = {}, 0
    for name, spec in manifest["nets"].items():
        count = spec["count"]
        if start + count > values.size:
            raise ContractViolation(f"{path}: truncated parameters for {name!r}")
        nets[name] = MLP(spec["sizes"], spec["activation"], params=values[start:start + count])
        start += count
    if start != values.size:
        raise ContractViolation(f"{path}: {values.size - start} trailing values")
    return nets, manifest.get("extra", {})
