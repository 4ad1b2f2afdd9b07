"""Parameter storage and the fully connected building blocks."""

from __future__ import annotations

import numpy as np

from planloc.neural import autograd as ag
from planloc.neural.autograd import Tensor


class ParameterStore:
    """Named trainable arrays, optionally viewed through a name prefix.

    A scoped view (``store.scope("vit")``) shares storage with its parent, so
    networks built from sub-blocks all write into one flat namespace such as
    ``"vit.patch.E"``.
    """

    def __init__(self, _entries=None, _trainable=None, prefix=""):
        self._entries = {} if _entries is None else _entries
        self._trainable = {} if _trainable is None else _trainable
        self.prefix = prefix

    def _full(self, name):
        return f"{self.prefix}{name}"

    def scope(self, name):
        return ParameterStore(self._entries, self._trainable, prefix=self._full(name) + ".")

    def add(self, name, value, trainable=True):
        full = self._full(name)
        if full in self._entries:
            raise KeyError(f"duplicate parameter name {full!r}")
        self._entries[full] = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=full)
        self._trainable[full] = trainable
        return self._entries[full]

    def __getitem__(self, name):
        return self._entries[self._full(name)]

    def __contains__(self, name):
        return self._full(name) in self._entries

    def items(self):
        """Yield ``(full_name, tensor)`` for every entry under this scope, sorted by name."""
        for full in sorted(self._entries):
            if full.startswith(self.prefix):
                yield full, self._entries[full]

    def names(self):
        return [k for k, _ in self.items()]

    def is_trainable(self, full_name):
        return self._trainable[full_name]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def n_parameters(self):
        return int(np.sum([t.data.size for _, t in self.items()]))

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            t = self._entries[k]
            if t.data.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {t.data.shape} vs {np.shape(v)}")
            t.data = np.array(v, dtype=np.float64)

    def copy(self):
        new = ParameterStore(prefix=self.prefix)
        for k, t in self._entries.items():
            new._entries[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
            new._trainable[k] = self._trainable[k]
        return new


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# Layer specs are tuples: ("linear", n_in, n_out), ("relu",), ("gelu",),
# ("layernorm", width), ("dropout", p).
Spec = list


def init_ffnn(store, spec, rng, final_bias=0.0, final_scale=1.0, input_bias=0.0):
    """Create parameters for every linear and layer-norm entry in ``spec``.

    ``final_bias`` and ``final_scale`` adjust the last linear layer: a small
    positive bias with shrunken weights keeps a ReLU-terminated regressor from
    starting dead. ``input_bias`` > 0 draws the first layer's bias from
    U(-input_bias, input_bias); with zero biases a ReLU layer followed by
    layer normalization is blind to the input's magnitude.
    """
    linear = [i for i, layer in enumerate(spec) if layer[0] == "linear"]
    first, last = linear[0], linear[-1]
    for i, layer in enumerate(spec):
        kind = layer[0]
        if kind == "linear":
            _, n_in, n_out = layer
            W = glorot_uniform(rng, n_in, n_out)
            store.add(f"l{i}.W", W * final_scale if i == last else W)
            b = np.full(n_out, final_bias if i == last else 0.0)
            if i == first and input_bias > 0:
                b = rng.uniform(-input_bias, input_bias, n_out)
            store.add(f"l{i}.b", b)
        elif kind == "layernorm":
            store.add(f"l{i}.gamma", np.ones(layer[1]))
            store.add(f"l{i}.beta", np.zeros(layer[1]))
    return store


def spec_widths(spec):
    """Input and output widths of a layer spec."""
    linear = [layer for layer in spec if layer[0] == "linear"]
    return linear[0][1], linear[-1][2]


def layer_norm(x, gamma, beta, eps=1e-10):
    return ag.add(ag.mul(ag.layer_norm_core(x, eps), gamma), beta)


def ffnn_apply(store, x, spec, training=False, rng=None):
    """Run ``x`` through the layers listed in ``spec``.

    Dropout is active only when ``training`` is true, in which case ``rng`` must
    be a numpy Generator.
    """
    x = ag.as_tensor(x)
    n_in, _ = spec_widths(spec)
    if x.shape[-1] != n_in:
        raise ValueError(f"input width {x.shape[-1]} does not match spec width {n_in}")
    for i, layer in enumerate(spec):
        kind = layer[0]
        if kind == "linear":
            x = ag.add(ag.matmul(x, store[f"l{i}.W"]), store[f"l{i}.b"])
        elif kind == "relu":
            x = ag.relu(x)
        elif kind == "gelu":
            x = ag.gelu(x)
        elif kind == "layernorm":
            x = layer_norm(x, store[f"l{i}.gamma"], store[f"l{i}.beta"])
        elif kind == "dropout":
            x = ag.dropout(x, layer[1], rng, training)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return x


# Layer tables for the named networks.
FFNN1 = [("linear", 2, 64), ("relu",), ("layernorm", 64),
         ("linear", 64, 32), ("relu",), ("dropout", 0.2)]
# Normalization cannot change width, so the 32 -> 16 step is a norm followed by a linear map.
FFNN2 = [("linear", 64, 32), ("relu",), ("layernorm", 32), ("linear", 32, 16),
         ("linear", 16, 1), ("relu",)]
FFNN3 = [("linear", 1, 64), ("relu",), ("layernorm", 64),
         ("linear", 64, 32), ("relu",), ("dropout", 0.2)]
# Dropout sits before the output layer: dropping regression outputs would bias them low.
FFNN4 = [("linear", 64, 32), ("relu",), ("layernorm", 32), ("dropout", 0.2),
         ("linear", 32, 2), ("relu",)]
GNN_MESSAGE = [("linear", 9, 8), ("relu",), ("linear", 8, 2)]
GNN_UPDATE = [("linear", 7, 8), ("relu",), ("linear", 8, 2), ("relu",)]


def scaled_ffnn1(hidden, out, n_in=2):
    return [("linear", n_in, hidden), ("relu",), ("layernorm", hidden),
            ("linear", hidden, out), ("relu",), ("dropout", 0.2)]


def scaled_ffnn2(n_in, hidden, mid):
    return [("linear", n_in, hidden), ("relu",), ("layernorm", hidden), ("linear", hidden, mid),
            ("linear", mid, 1), ("relu",)]


def scaled_ffnn4(n_in, hidden):
    return [("linear", n_in, hidden), ("relu",), ("layernorm", hidden), ("dropout", 0.2),
            ("linear", hidden, 2), ("relu",)]
