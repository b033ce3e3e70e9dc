"""Small residual MLP with a flat parameter vector and hand-written backprop.

Architecture (fixed topology)::

    Linear(in, H) -> act -> [x + Linear(act(LN(Linear(x))))] * n_blocks -> Linear(H, out) -> head

Weights are stored as ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
Every weight/bias is a view into ``Mlp.params``; gradients live in the
matching views of ``Mlp.grads``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError, NumericError, ShapeError, StateError

CHECKPOINT_VERSION = 1

HIDDEN_ACTIVATIONS = ("silu", "elu", "leaky_relu", "identity")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "tanh")
INITS = ("kaiming_uniform", "normal")

LN_EPS = 1e-5
LEAKY_SLOPE = 0.01
# keeps sigmoid outputs strictly inside (0, 1) in float64
_SIGMOID_CLAMP = 30.0


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dim: int = 200
    output_dim: int = 1
    n_residual_blocks: int = 2
    hidden_activation: str = "silu"
    output_activation: str = "identity"
    layer_norm: bool = True
    init: str = "kaiming_uniform"
    init_sigma: float = 0.25

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.n_residual_blocks < 0:
            raise ConfigurationError("n_residual_blocks must be >= 0")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")
        if self.init not in INITS:
            raise ConfigurationError(f"unknown init {self.init!r}")

    def layout(self):
        """Ordered ``(name, shape)`` pairs describing the flat parameter vector."""
        H = self.hidden_dim
        out = [("in.W", (self.input_dim, H)), ("in.b", (H,))]
        for k in range(self.n_residual_blocks):
            if self.layer_norm:
                out += [(f"b{k}.ln.g", (H,)), (f"b{k}.ln.b", (H,))]
            out += [(f"b{k}.l1.W", (H, H)), (f"b{k}.l1.b", (H,))]
            out += [(f"b{k}.l2.W", (H, H)), (f"b{k}.l2.b", (H,))]
        out += [("out.W", (H, self.output_dim)), ("out.b", (self.output_dim,))]
        return out

    @property
    def n_params(self):
        return int(sum(np.prod(s) for _, s in self.layout()))


def linear_forward(x, W, b):
    return x @ W + b


def linear_backward(x, W, upstream):
    """Returns (dx, dW, db) for ``y = x @ W + b``."""
    return upstream @ W.T, x.T @ upstream, upstream.sum(axis=0)


def _act_forward(kind, x):
    if kind == "silu":
        return K.silu_forward(x)
    if kind == "elu":
        ex = np.exp(np.minimum(x, 0.0))
        return np.where(x > 0, x, ex - 1.0), ex
    if kind == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x), None
    return x, None


def _act_backward(kind, dy, x, aux):
    if kind == "silu":
        return K.silu_backward(dy, x, aux)
    if kind == "elu":
        return dy * np.where(x > 0, 1.0, aux)
    if kind == "leaky_relu":
        return dy * np.where(x > 0, 1.0, LEAKY_SLOPE)
    return dy


class Mlp:
    """Feed-forward network with cached-activation reverse mode."""

    def __init__(self, config: MlpConfig, seed=0):
        self.config = config
        self.params = np.zeros(config.n_params)
        self.grads = np.zeros(config.n_params)
        self._bind()
        self._init(np.random.Generator(np.random.Philox(seed)))
        self._cache = None

    def _bind(self):
        self.p, self.g = {}, {}
        off = 0
        for name, shape in self.config.layout():
            n = int(np.prod(shape))
            self.p[name] = self.params[off:off + n].reshape(shape)
            self.g[name] = self.grads[off:off + n].reshape(shape)
            off += n

    def _init(self, rng):
        cfg = self.config
        for name, shape in cfg.layout():
            view = self.p[name]
            if name.endswith(".ln.g"):
                view[...] = 1.0
            elif name.endswith(".ln.b"):
                view[...] = 0.0
            elif cfg.init == "normal":
                view[...] = rng.normal(0.0, cfg.init_sigma, size=shape)
            else:
                # torch.nn.Linear default: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
                W_shape = shape if name.endswith(".W") else self.p[name[:-1] + "W"].shape
                bound = 1.0 / np.sqrt(W_shape[0])
                view[...] = rng.uniform(-bound, bound, size=shape)

    # ------------------------------------------------------------------
    def forward(self, batch, cache=True):
        cfg = self.config
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ShapeError(f"expected batch of shape (n, {cfg.input_dim}), got {x.shape}")
        x = np.ascontiguousarray(x)
        act = cfg.hidden_activation
        p = self.p
        tape = {"x": x}
        a0 = linear_forward(x, p["in.W"], p["in.b"])
        h, aux = _act_forward(act, a0)
        tape["a0"], tape["aux0"] = a0, aux
        blocks = []
        for k in range(cfg.n_residual_blocks):
            rec = {"h": h}
            u = linear_forward(h, p[f"b{k}.l1.W"], p[f"b{k}.l1.b"])
            rec["u"] = u
            if cfg.layer_norm:
                u, xhat, rstd = K.layernorm_forward(u, p[f"b{k}.ln.g"], p[f"b{k}.ln.b"], LN_EPS)
                rec["xhat"], rec["rstd"] = xhat, rstd
            rec["pre"] = u
            v, aux = _act_forward(act, u)
            rec["v"], rec["aux"] = v, aux
            h = h + linear_forward(v, p[f"b{k}.l2.W"], p[f"b{k}.l2.b"])
            blocks.append(rec)
        tape["blocks"] = blocks
        tape["hlast"] = h
        o = linear_forward(h, p["out.W"], p["out.b"])
        head = cfg.output_activation
        if head == "sigmoid":
            o = 1.0 / (1.0 + np.exp(-np.clip(o, -_SIGMOID_CLAMP, _SIGMOID_CLAMP)))
        elif head == "tanh":
            o = np.tanh(o)
        if not np.all(np.isfinite(o)):
            raise NumericError("non-finite network output")
        tape["out"] = o
        if cache:
            self._cache = tape
        return o

    __call__ = forward

    def backward(self, upstream, accumulate=True):
        """Backprop ``upstream`` (dL/d output); accumulates grads, returns dL/d input.

        With ``accumulate=False`` only the input gradient is computed and the
        parameter gradients are left untouched (frozen-network pass).
        """
        tape = self._cache
        if tape is None:
            raise StateError("backward called without a cached forward pass")
        cfg = self.config
        dy = np.asarray(upstream, dtype=np.float64)
        if dy.shape != tape["out"].shape:
            raise ShapeError(f"upstream shape {dy.shape} != output shape {tape['out'].shape}")
        head = cfg.output_activation
        o = tape["out"]
        if head == "sigmoid":
            dy = dy * o * (1.0 - o)
        elif head == "tanh":
            dy = dy * (1.0 - o * o)
        p, g = self.p, self.g
        act = cfg.hidden_activation

        def lin(x, name, up):
            if accumulate:
                g[name + ".W"] += x.T @ up
                g[name + ".b"] += up.sum(axis=0)
            return up @ p[name + ".W"].T

        dh = lin(tape["hlast"], "out", dy)
        for k in reversed(range(cfg.n_residual_blocks)):
            rec = tape["blocks"][k]
            dv = lin(rec["v"], f"b{k}.l2", dh)
            du = _act_backward(act, dv, rec["pre"], rec["aux"])
            if cfg.layer_norm:
                du, dgam, dbet = K.layernorm_backward(
                    np.ascontiguousarray(du), rec["xhat"], rec["rstd"], p[f"b{k}.ln.g"]
                )
                if accumulate:
                    g[f"b{k}.ln.g"] += dgam
                    g[f"b{k}.ln.b"] += dbet
            dh = dh + lin(rec["h"], f"b{k}.l1", du)
        da0 = _act_backward(act, dh, tape["a0"], tape["aux0"])
        dx = lin(tape["x"], "in", da0)
        self._cache = None
        return dx

    # ------------------------------------------------------------------
    def zero_grad(self):
        self.grads[:] = 0.0

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.config = self.config
        other.params = self.params.copy()
        other.grads = self.grads.copy()
        other._bind()
        other._cache = None
        return other

    def load_params(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.params.shape:
            raise ShapeError(f"parameter vector length {params.size} != {self.params.size}")
        self.params[:] = params

    def to_dict(self):
        return {"version": CHECKPOINT_VERSION, "config": asdict(self.config), "params": self.params}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {d.get('version')!r}")
        net = cls(MlpConfig(**d["config"]))
        net.load_params(np.asarray(d["params"], dtype=np.float64))
        return net


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net):
        return cls(m=np.zeros_like(net.params), v=np.zeros_like(net.params))


def adam_step(net: Mlp, state: AdamState, lr: float):
    """One Adam update from ``net.grads``; zeroes the gradients afterwards."""
    grad = net.grads
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient, Adam step refused")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1 ** state.t)
    vhat = state.v / (1.0 - b2 ** state.t)
    net.params -= lr * mhat / (np.sqrt(vhat) + state.eps)
    net.zero_grad()
    return net, state


def squared_loss(target):
    """Mean squared error objective as ``output -> (loss, dloss/doutput)``."""
    target = np.asarray(target, dtype=np.float64)

    def fn(out):
        r = out - target
        return float(np.mean(r * r)), 2.0 * r / r.size

    return fn


def gradient_check(net: Mlp, loss, batch, n_check=200, h=1e-5, seed=0):
    """Max relative error between backprop and central differences.

    ``loss`` maps the network output to ``(scalar, dloss/doutput)``. At most
    ``n_check`` randomly chosen parameters are probed.
    """
    net.zero_grad()
    out = net.forward(batch)
    _, dout = loss(out)
    net.backward(dout)
    analytic = net.grads.copy()
    net.zero_grad()
    rng = np.random.Generator(np.random.Philox(seed))
    n = net.params.size
    idx = rng.choice(n, size=min(n_check, n), replace=False)
    worst = 0.0
    for i in idx:
        old = net.params[i]
        net.params[i] = old + h
        lp, _ = loss(net.forward(batch, cache=False))
        net.params[i] = old - h
        lm, _ = loss(net.forward(batch, cache=False))
        net.params[i] = old
        numeric = (lp - lm) / (2.0 * h)
        denom = max(abs(numeric), abs(analytic[i]), 1e-6)
        worst = max(worst, abs(numeric - analytic[i]) / denom)
    return worst


# ----------------------------------------------------------------------
# text checkpoints
# ----------------------------------------------------------------------

def _normalise(o):
    if isinstance(o, dict):
        return {k: _normalise(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_normalise(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_normalise(v) for v in o.tolist()]
    if isinstance(o, (float, np.floating)):
        if not np.isfinite(o):
            raise NumericError("refusing to serialise a non-finite value")
        return float(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def dumps(obj):
    """Serialise to compact JSON with sorted keys and 17-digit floats."""
    return "".join(_iterencode(_normalise(obj)))


def _iterencode(o):
    if isinstance(o, dict):
        yield "{"
        for i, k in enumerate(sorted(o)):
            if i:
                yield ","
            yield json.dumps(str(k))
            yield ":"
            yield from _iterencode(o[k])
        yield "}"
    elif isinstance(o, list):
        yield "["
        for i, v in enumerate(o):
            if i:
                yield ","
            yield from _iterencode(v)
        yield "]"
    elif isinstance(o, float):
        yield format(float(o), ".17g")
    else:
        yield json.dumps(o)


def save_checkpoint(net: Mlp, path):
    with open(path, "w") as fh:
        fh.write(dumps(net.to_dict()))
        fh.write("\n")


def load_checkpoint(path) -> Mlp:
    with open(path) as fh:
        return Mlp.from_dict(json.load(fh))


class RoutedMlp:
    """One or more Mlps sharing a config; rows are dispatched by an integer route.

    With a single route this is a thin wrapper around one Mlp. With two it
    gives the per-treatment twin networks used for a binary treatment.
    """

    def __init__(self, config: MlpConfig, n_routes=1, seed=0):
        self.config = config
        self.nets = [Mlp(config, seed=seed + 7919 * k) for k in range(n_routes)]
        self._route_cache = None

    @property
    def n_routes(self):
        return len(self.nets)

    def _groups(self, n, route):
        if self.n_routes == 1:
            return [np.arange(n)]
        route = np.asarray(route).astype(np.int64)
        if route.shape != (n,):
            raise ShapeError("route must be one integer per row")
        return [np.flatnonzero(route == k) for k in range(self.n_routes)]

    def forward(self, batch, route=None, cache=True):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2:
            raise ShapeError(f"expected a 2-d batch, got shape {batch.shape}")
        if self.n_routes == 1:
            return self.nets[0].forward(batch, cache=cache)
        groups = self._groups(batch.shape[0], route)
        out = np.empty((batch.shape[0], self.config.output_dim))
        for net, idx in zip(self.nets, groups):
            if idx.size:
                out[idx] = net.forward(batch[idx], cache=cache)
            elif cache:
                net._cache = None
        if cache:
            self._route_cache = (groups, batch.shape)
        return out

    __call__ = forward

    def backward(self, upstream, accumulate=True):
        if self.n_routes == 1:
            return self.nets[0].backward(upstream, accumulate=accumulate)
        if self._route_cache is None:
            raise StateError("backward called without a cached forward pass")
        groups, shape = self._route_cache
        dx = np.zeros(shape)
        for net, idx in zip(self.nets, groups):
            if idx.size:
                dx[idx] = net.backward(upstream[idx], accumulate=accumulate)
        self._route_cache = None
        return dx

    def zero_grad(self):
        for net in self.nets:
            net.zero_grad()

    def copy(self):
        other = RoutedMlp.__new__(RoutedMlp)
        other.config = self.config
        other.nets = [n.copy() for n in self.nets]
        other._route_cache = None
        return other

    def flat_params(self):
        return np.concatenate([n.params for n in self.nets])

    def flat_grads(self):
        return np.concatenate([n.grads for n in self.nets])

    def to_dict(self):
        return {"n_routes": self.n_routes, "nets": [n.to_dict() for n in self.nets]}

    @classmethod
    def from_dict(cls, d):
        nets = [Mlp.from_dict(nd) for nd in d["nets"]]
        obj = cls.__new__(cls)
        obj.config = nets[0].config
        obj.nets = nets
        obj._route_cache = None
        return obj


class Adam:
    """Adam over every Mlp inside a RoutedMlp."""

    def __init__(self, model: RoutedMlp, lr):
        self.model = model
        self.lr = lr
        self.states = [AdamState.for_net(n) for n in model.nets]

    def step(self):
        for net in self.model.nets:
            if not np.all(np.isfinite(net.grads)):
                raise NumericError("non-finite gradient, Adam step refused")
        for net, st in zip(self.model.nets, self.states):
            adam_step(net, st, self.lr)
