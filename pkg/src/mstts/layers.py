"""Parameterized layers on top of the autodiff core.

Layers own their tensors; models collect them into a flat name->Tensor map
with dotted paths (``ref_encoder.conv.3.weight``). That map is the unit of
freezing, optimization, and checkpointing. Batch handling is by convention:
every layer works on a single utterance, and the trainer averages gradients
across a mini-batch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import EmptyInputError, InvalidShapeError, UnknownModuleError

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), trainable=True)


def zeros_param(shape, dtype):
    return ad.Tensor(np.zeros(shape, dtype=dtype), trainable=True)


class Linear:
    """Affine map x -> x @ W.T + b with W of shape (d_out, d_in)."""

    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        self.weight = xavier_uniform(rng, (d_out, d_in), d_in, d_out, dtype)
        self.bias = zeros_param((1, d_out), dtype) if bias else None

    def rows(self, x: ad.Tensor) -> ad.Tensor:
        """Apply to row-major samples: (n, d_in) -> (n, d_out)."""
        out = ad.matmul(x, ad.transpose(self.weight))
        if self.bias is not None:
            n = x.shape[0]
            out = ad.add(out, ad.broadcast_repeat(self.bias, 0, n) if n > 1 else self.bias)
        return out

    def cols(self, x: ad.Tensor) -> ad.Tensor:
        """Apply per time step to a feature sequence: (d_in, T) -> (d_out, T)."""
        out = ad.matmul(self.weight, x)
        if self.bias is not None:
            b = ad.transpose(self.bias)
            t = x.shape[1]
            out = ad.add(out, ad.broadcast_repeat(b, 1, t) if t > 1 else b)
        return out

    def named(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class ConvBlock:
    """3x1 convolution -> ReLU -> batchnorm over the time axis per channel.

    Train mode normalizes with the current utterance's time statistics and
    folds them into running estimates (momentum 0.9); eval mode uses the
    running estimates, so encoding is a pure function of the parameters.
    """

    def __init__(self, c_in, c_out, stride, rng, dtype=np.float32):
        self.stride = stride
        k = 3
        self.weight = xavier_uniform(rng, (c_out, c_in, k), c_in * k, c_out * k, dtype)
        self.bias = zeros_param((c_out,), dtype)
        self.gamma = ad.Tensor(np.ones(c_out, dtype=dtype), trainable=True)
        self.beta = zeros_param((c_out,), dtype)
        self.running_mean = np.zeros(c_out, dtype=dtype)
        self.running_var = np.ones(c_out, dtype=dtype)

    def __call__(self, x: ad.Tensor, mode: str) -> ad.Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"conv block mode must be 'train' or 'eval', got {mode!r}")
        h = ad.relu(ad.conv1d_same(x, self.weight, self.bias, self.stride))
        return self._batchnorm(h, mode)

    def _batchnorm(self, x: ad.Tensor, mode: str) -> ad.Tensor:
        gamma, beta = self.gamma, self.beta
        xd = x.data
        if mode == "train":
            mu = xd.mean(axis=1)
            var = xd.var(axis=1)
            self.running_mean = (BN_MOMENTUM * self.running_mean
                                 + (1.0 - BN_MOMENTUM) * mu).astype(self.running_mean.dtype)
            self.running_var = (BN_MOMENTUM * self.running_var
                                + (1.0 - BN_MOMENTUM) * var).astype(self.running_var.dtype)
        else:
            mu = self.running_mean.astype(xd.dtype)
            var = self.running_var.astype(xd.dtype)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (xd - mu[:, None]) * inv_std[:, None]
        out = gamma.data[:, None] * xhat + beta.data[:, None]
        t = xd.shape[1]

        def backward_fn(g):
            dgamma = (g * xhat).sum(axis=1)
            dbeta = g.sum(axis=1)
            dxhat = g * gamma.data[:, None]
            if mode == "train":
                # Batch statistics depend on x; use the fused batchnorm backward.
                dx = inv_std[:, None] * (
                    dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / t
                )
            else:
                dx = dxhat * inv_std[:, None]
            return dx, dgamma, dbeta

        return ad.record("batchnorm", out, (x, gamma, beta), backward_fn)

    def named(self):
        yield "weight", self.weight
        yield "bias", self.bias
        yield "bn_gamma", self.gamma
        yield "bn_beta", self.beta

    def named_buffers(self):
        yield "bn_running_mean", self
        yield "bn_running_var", self


class GRUCell:
    """Gated recurrent unit with the gate formulation pinned for this repo:

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        n = tanh(W_n x + r * (U_n h + b_n))
        h' = (1 - z) * n + z * h

    (reset gate applied to the recurrent term before tanh).
    """

    GATES = ("z", "r", "n")

    def __init__(self, d_in, hidden, rng, dtype=np.float32):
        self.d_in, self.hidden = d_in, hidden
        for gate in self.GATES:
            setattr(self, f"W_{gate}", xavier_uniform(rng, (hidden, d_in), d_in, hidden, dtype))
            setattr(self, f"U_{gate}", xavier_uniform(rng, (hidden, hidden), hidden, hidden, dtype))
            setattr(self, f"b_{gate}", zeros_param((hidden, 1), dtype))

    def step(self, x_t: ad.Tensor, h_prev: ad.Tensor) -> ad.Tensor:
        """One update; x_t is a (d_in, 1) column, h_prev a (hidden, 1) column."""
        z = ad.sigmoid(_gate_preact(self.W_z, x_t, self.U_z, h_prev, self.b_z))
        r = ad.sigmoid(_gate_preact(self.W_r, x_t, self.U_r, h_prev, self.b_r))
        rec = ad.mul(r, _affine(self.U_n, h_prev, self.b_n))
        n = ad.tanh(ad.add(ad.matmul(self.W_n, x_t), rec))
        # (1 - z) * n + z * h  ==  n + z * (h - n)
        return ad.add(n, ad.mul(z, ad.sub(h_prev, n)))

    def initial_state(self, dtype=None) -> ad.Tensor:
        return ad.Tensor(np.zeros((self.hidden, 1), dtype=dtype or self.W_z.data.dtype))

    def named(self):
        for gate in self.GATES:
            for kind in ("W", "U", "b"):
                name = f"{kind}_{gate}"
                yield name, getattr(self, name)


def _gate_preact(w: ad.Tensor, x: ad.Tensor, u: ad.Tensor, h: ad.Tensor,
                 b: ad.Tensor) -> ad.Tensor:
    """Fused W@x + U@h + b; one tape node instead of four in the unroll loop."""
    wd, xd, ud, hd = w.data, x.data, u.data, h.data
    if xd.shape[1] != 1 or hd.shape[1] != 1:
        raise InvalidShapeError("gru gate expects single-column operands")
    out = wd @ xd + ud @ hd + b.data

    def backward_fn(g):
        return (g @ xd.T, wd.T @ g, g @ hd.T, ud.T @ g, g)

    return ad.record("gru_gate", out, (w, x, u, h, b), backward_fn)


def _affine(u: ad.Tensor, h: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    ud, hd = u.data, h.data
    out = ud @ hd + b.data

    def backward_fn(g):
        return (g @ hd.T, ud.T @ g, g)

    return ad.record("affine", out, (u, h, b), backward_fn)


def gru_sequence(cell: GRUCell, xs: ad.Tensor, h0: ad.Tensor | None = None,
                 reverse: bool = False):
    """Unroll a GRU over the columns of xs (d_in, T) -> (states (h, T), final (h, 1)).

    ``reverse`` runs right-to-left but reports states aligned to the original
    time order; ``final`` is then the state after consuming column 0.
    """
    t = xs.shape[1]
    if t == 0:
        raise EmptyInputError("gru_sequence: empty input sequence")
    if xs.shape[0] != cell.d_in:
        raise InvalidShapeError(f"gru_sequence: input width {xs.shape[0]} != cell d_in {cell.d_in}")
    cols = ad.split(xs, [1] * t, axis=1)
    if reverse:
        cols = cols[::-1]
    h = h0 if h0 is not None else cell.initial_state(xs.data.dtype)
    states = []
    for x_t in cols:
        h = cell.step(x_t, h)
        states.append(h)
    final = h
    if reverse:
        states = states[::-1]
    stacked = states[0] if t == 1 else ad.concat(states, axis=1)
    return stacked, final


def bigru_sequence(cell_fwd: GRUCell, cell_bwd: GRUCell, xs: ad.Tensor):
    """Bidirectional unroll; features are [forward; backward] along the feature axis."""
    states_f, final_f = gru_sequence(cell_fwd, xs)
    states_b, final_b = gru_sequence(cell_bwd, xs, reverse=True)
    return ad.concat([states_f, states_b], axis=0), ad.concat([final_f, final_b], axis=0)


class Embedding:
    def __init__(self, vocab, dim, rng, dtype=np.float32):
        self.table = xavier_uniform(rng, (vocab, dim), vocab, dim, dtype)

    def __call__(self, ids) -> ad.Tensor:
        return ad.embedding(self.table, ids)

    def named(self):
        yield "table", self.table


# ---------------------------------------------------------------------------
# Parameter collection and trainability control
# ---------------------------------------------------------------------------


def collect_params(named_modules) -> dict:
    """Flatten (prefix, module) pairs into a dotted name -> Tensor map.

    Modules expose ``named()``; nested containers may pass through lists of
    (name, module) pairs. Name order is the deterministic construction order.
    """
    out: dict[str, ad.Tensor] = {}
    for prefix, module in named_modules:
        for name, tensor in module.named():
            key = f"{prefix}.{name}"
            if key in out:
                raise ValueError(f"duplicate parameter name {key}")
            out[key] = tensor
    return out


def set_trainable(params: dict, prefixes, flag: bool) -> int:
    """Flip the trainable flag on every parameter under the given prefixes.

    A prefix matches a parameter named exactly like it or any dotted child.
    Raises if a prefix resolves to nothing, which would otherwise silently
    break a freeze schedule.
    """
    if isinstance(prefixes, str):
        prefixes = [prefixes]
    changed = 0
    for prefix in prefixes:
        hits = [n for n in params
                if prefix == "" or n == prefix or n.startswith(prefix + ".")]
        if not hits:
            raise UnknownModuleError(f"prefix {prefix!r} matches no parameters")
        for n in hits:
            p = params[n]
            if p.trainable != flag:
                p.trainable = flag
                p.needs_grad = flag
                changed += 1
    return changed
