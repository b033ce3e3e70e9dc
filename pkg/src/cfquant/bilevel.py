"""Joint training of the quantile estimator h and the conditional quantile net g.

One outer step:

1. freeze h and compute tau_i = h(x_i, z_i, y_i) for ``interest_batch`` rows;
2. run ``inner_steps`` Adam steps on g, minimising the mean pin-ball loss of
   g(x_j, z_j, tau_i) against y_j over ``per_tau_batch`` fresh rows per tau_i;
3. freeze g;
4. take ``h_steps`` Adam steps on h against ``L(g(x, z, h(x, z, y)), y)``,
   each on ``upper_batch`` fresh rows, back-propagating through g's tau input.

Step 4 is first-order by default. ``hypergradient="finite_diff_darts"`` adds
the DARTS second-order term, estimated by finite differences of the inner
gradient with g's parameters nudged along the upper-loss gradient.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError, NumericError, ShapeError, TrainingError
from .nn import Adam, MlpConfig, RoutedMlp, dumps
from .quantile import TAU_ENCODINGS, QuantileNet, Scaler, _route, cosine_lr, encode_tau, features

log = logging.getLogger(__name__)

UPPER_LOSSES = ("mse", "mae")
HYPERGRADIENTS = ("first_order", "finite_diff_darts")
LOG_COLUMNS = ("outer_step", "inner_loss_start", "inner_loss_end", "upper_loss", "recon_mae")


@dataclass
class BilevelConfig:
    inner_steps: int = 30
    interest_batch: int = 256
    per_tau_batch: int = 64
    upper_batch: int = 64
    outer_steps: int = 300
    patience: int = 40
    lr_h: float = 1e-3
    lr_g: float = 1e-3
    lr_final_frac: float = 1.0
    upper_loss: str = "mse"
    hypergradient: str = "first_order"
    hidden_dim: int = 200
    n_residual_blocks: int = 2
    h_steps: int = 1
    tau_encoding: str = "logit"
    eval_rows: int = 1024
    darts_eps: float = 0.01

    def __post_init__(self):
        for name in ("inner_steps", "interest_batch", "per_tau_batch", "outer_steps", "patience",
                     "hidden_dim", "h_steps", "eval_rows"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.upper_batch < 1:
            raise ConfigurationError("upper_batch must be >= 1 (empty upper batch)")
        if not (self.lr_h > 0 and self.lr_g > 0):
            raise ConfigurationError("learning rates must be > 0")
        if self.upper_loss not in UPPER_LOSSES:
            raise ConfigurationError(f"upper_loss must be one of {UPPER_LOSSES}")
        if self.hypergradient not in HYPERGRADIENTS:
            raise ConfigurationError(f"hypergradient must be one of {HYPERGRADIENTS}")
        if self.tau_encoding not in TAU_ENCODINGS:
            raise ConfigurationError(f"tau_encoding must be one of {TAU_ENCODINGS}")
        if not (self.lr_final_frac > 0 and self.darts_eps > 0):
            raise ConfigurationError("lr_final_frac and darts_eps must be > 0")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class QuantileEstimator:
    """h(x, z, y) -> tau in (0, 1); sigmoid head, twin networks for binary x."""

    def __init__(self, net: RoutedMlp, scaler: Scaler):
        self.net = net
        self.scaler = scaler

    @classmethod
    def build(cls, scaler, z_dim, hidden_dim=200, n_residual_blocks=2, seed=0):
        cfg = MlpConfig(
            input_dim=z_dim + 1 + (0 if scaler.x_binary else 1), hidden_dim=hidden_dim, output_dim=1,
            n_residual_blocks=n_residual_blocks, hidden_activation="silu",
            output_activation="sigmoid", layer_norm=True,
        )
        return cls(RoutedMlp(cfg, n_routes=2 if scaler.x_binary else 1, seed=seed), scaler)

    def __call__(self, x, z, y):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        feats = features(self.scaler, x, np.asarray(z).reshape(x.shape[0], -1), self.scaler.y(y))
        return self.net.forward(feats, route=_route(self.scaler.x_binary, x), cache=False)[:, 0]

    def to_dict(self):
        return {"net": self.net.to_dict(), "scaler": self.scaler.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(RoutedMlp.from_dict(d["net"]), Scaler.from_dict(d["scaler"]))


@dataclass
class BilevelModel:
    h: QuantileEstimator
    g: QuantileNet
    config: BilevelConfig
    log: list = field(default_factory=list)
    x_range: tuple = (0.0, 1.0)
    seed: int = 0

    @property
    def scaler(self):
        return self.g.scaler

    def copy(self):
        return BilevelModel(
            h=QuantileEstimator(self.h.net.copy(), self.h.scaler),
            g=QuantileNet(self.g.net.copy(), self.g.scaler),
            config=self.config, log=list(self.log), x_range=self.x_range, seed=self.seed,
        )


def reconstruct(model: BilevelModel, x, z, y):
    """g(x, z, h(x, z, y)); approximately y on factual data once trained."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    tau = model.h(x, z, y)
    return model.g.predict(x, np.asarray(z).reshape(x.shape[0], -1), tau)


def reconstruction_mae(model: BilevelModel, x, z, y):
    """Mean |g(x, z, h(x, z, y)) - y| in standardised output units."""
    return float(np.mean(np.abs(reconstruct(model, x, z, y) - np.asarray(y))) / model.scaler.y_scale)


def darts_correction(w, v, inner_grad, eps_scale=0.01):
    """Finite-difference Hessian-vector term of the DARTS hypergradient.

    Returns ``(grad_alpha L_in(w + eps v) - grad_alpha L_in(w - eps v)) / (2 eps)``
    with ``eps = eps_scale / ||v||``, or ``None`` when ``v`` is zero. The
    hypergradient is then ``first_order - lr_inner * correction``.
    """
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        return None
    eps = eps_scale / norm
    gp = np.asarray(inner_grad(w + eps * v), dtype=np.float64)
    gm = np.asarray(inner_grad(w - eps * v), dtype=np.float64)
    return (gp - gm) / (2.0 * eps)


class _Data:
    """Standardised training arrays kept contiguous for fast gathering."""

    def __init__(self, dataset, scaler, tau_encoding):
        self.tau_encoding = tau_encoding
        self.n = len(dataset)
        self.x = np.asarray(dataset.x, dtype=np.float64)
        self.route = _route(scaler.x_binary, self.x)
        self.base = features(scaler, self.x, dataset.z, np.zeros(self.n))[:, :-1]
        self.y = scaler.y(dataset.y)
        self.z = np.asarray(dataset.z, dtype=np.float64)
        self.y_raw = np.asarray(dataset.y, dtype=np.float64)

    def g_input(self, idx, tau):
        """Rows for g plus d(tau feature)/d tau."""
        feat, dfeat = encode_tau(tau, self.tau_encoding)
        return np.column_stack([self.base[idx], feat]), dfeat

    def h_input(self, idx):
        return np.column_stack([self.base[idx], self.y[idx]])

    def r(self, idx):
        return None if self.route is None else self.route[idx]


def _check_tau_range(tau):
    if not (np.all(tau > 0.0) and np.all(tau < 1.0)):
        raise NumericError("h produced a quantile outside (0, 1)")


def _inner_tau_grad(g_net, data, idx, tau_rows, n_groups):
    """d(mean pin-ball loss)/d tau_i, summed over each tau's rows."""
    feats, dfeat = data.g_input(idx, tau_rows)
    pred = g_net.forward(feats, route=data.r(idx))[:, 0]
    resid = data.y[idx] - pred
    _, slope = K.pinball(tau_rows, resid)
    n = resid.size
    dtau_net = g_net.backward((-slope / n).reshape(-1, 1), accumulate=False)[:, -1] * dfeat
    per_row = resid / n + dtau_net  # explicit d l_tau / d tau = resid
    return per_row.reshape(n_groups, -1).sum(axis=1)


def train_bilevel(dataset, config: BilevelConfig = None, seed=0, progress=None) -> BilevelModel:
    """Train (h, g) on the factual rows of ``dataset``; returns the best model."""
    config = config or BilevelConfig()
    if len(dataset) == 0:
        raise ShapeError("empty dataset")
    rng = np.random.Generator(np.random.Philox(seed))
    # separate stream so the progress probe never perturbs the training draws
    probe_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    x_binary = dataset.spec.x_binary
    scaler = Scaler.fit(dataset.x, dataset.z, dataset.y, x_binary=x_binary)
    z_dim = dataset.z.shape[1]
    h = QuantileEstimator.build(scaler, z_dim, config.hidden_dim, config.n_residual_blocks, seed=2 * seed + 1)
    g = QuantileNet.build(scaler, z_dim, config.hidden_dim, config.n_residual_blocks, seed=2 * seed + 2,
                          tau_encoding=config.tau_encoding)
    opt_h = Adam(h.net, config.lr_h)
    opt_g = Adam(g.net, config.lr_g)
    data = _Data(dataset, scaler, g.tau_encoding)
    n = data.n
    eval_idx = rng.permutation(n)[: min(config.eval_rows, n)]
    x_range = (float(np.min(dataset.x)), float(np.max(dataset.x)))

    model = BilevelModel(h=h, g=g, config=config, x_range=x_range, seed=seed)
    best, best_mae, since_best = None, np.inf, 0
    n_i, n_t = config.interest_batch, config.per_tau_batch

    for step in range(config.outer_steps):
        frac = cosine_lr(step, config.outer_steps, 1.0, config.lr_final_frac)
        opt_h.lr, opt_g.lr = config.lr_h * frac, config.lr_g * frac
        try:
            # (1) freeze h, estimate the interest samples' quantiles
            interest = rng.integers(0, n, size=n_i)
            tau_i = h.net.forward(data.h_input(interest), route=data.r(interest), cache=False)[:, 0]
            _check_tau_range(tau_i)
            tau_rows = np.repeat(tau_i, n_t)
            # (2) lower level: m pin-ball steps on g, scored on a fixed probe batch
            probe = probe_rng.integers(0, n, size=n_i * n_t)
            probe_in = data.g_input(probe, tau_rows)[0]
            inner_start = _pinball_mean(g, data, probe, probe_in, tau_rows)
            for _ in range(config.inner_steps):
                idx = rng.integers(0, n, size=n_i * n_t)
                pred = g.net.forward(data.g_input(idx, tau_rows)[0], route=data.r(idx))[:, 0]
                loss, slope = K.pinball(tau_rows, data.y[idx] - pred)
                g.net.backward((-slope / slope.size).reshape(-1, 1))
                opt_g.step()
            inner_end = _pinball_mean(g, data, probe, probe_in, tau_rows)
            last_inner = (idx, tau_rows, interest)
            # (3) freeze g, (4) one hypergradient step on h
            for _ in range(config.h_steps):
                up = rng.integers(0, n, size=config.upper_batch)
                upper = _upper_step(model, data, up, config, last_inner, n_i)
                opt_h.step()
        except NumericError as exc:
            raise TrainingError(
                f"numeric failure at outer step {step}: {exc}",
                checkpoint=best,
                diagnostics={"log": model.log[-10:]},
            ) from exc
        if not (np.isfinite(upper) and np.isfinite(inner_start) and np.isfinite(inner_end)):
            raise TrainingError(f"loss diverged at outer step {step}", checkpoint=best,
                                diagnostics={"log": model.log[-10:]})

        mae = reconstruction_mae(model, data.x[eval_idx], data.z[eval_idx], data.y_raw[eval_idx])
        model.log.append((step, inner_start, inner_end, upper, mae))
        if progress is not None:
            progress(model.log[-1])
        if mae < best_mae:
            best_mae, since_best = mae, 0
            best = model.copy()
        else:
            since_best += 1
            if since_best >= config.patience:
                log.info("early stop at outer step %d (best recon MAE %.4f)", step, best_mae)
                break

    best.log = list(model.log)
    return best


def _pinball_mean(g, data, idx, g_in, tau_rows):
    pred = g.net.forward(g_in, route=data.r(idx), cache=False)[:, 0]
    return float(K.pinball(tau_rows, data.y[idx] - pred)[0].mean())


def _upper_step(model, data, up, config, last_inner, n_i):
    """Accumulate the h gradient of the upper loss; returns the loss value."""
    h, g = model.h, model.g
    tau = h.net.forward(data.h_input(up), route=data.r(up))[:, 0]
    _check_tau_range(tau)
    want_g_grad = config.hypergradient == "finite_diff_darts"
    feats, dfeat = data.g_input(up, tau)
    pred = g.net.forward(feats, route=data.r(up))[:, 0]
    r = pred - data.y[up]
    if config.upper_loss == "mse":
        loss = float(np.mean(r * r))
        dpred = 2.0 * r / r.size
    else:
        loss = float(np.mean(np.abs(r)))
        dpred = np.sign(r) / r.size
    g.net.zero_grad()
    dtau = g.net.backward(dpred.reshape(-1, 1), accumulate=want_g_grad)[:, -1] * dfeat
    h.net.backward(dtau.reshape(-1, 1))
    if want_g_grad:
        _darts_update(model, data, config, last_inner, n_i)
    return loss


def _darts_update(model, data, config, last_inner, n_i):
    g = model.g
    v = g.net.flat_grads()
    g.net.zero_grad()
    idx, tau_rows, interest = last_inner
    sizes = [net.params.size for net in g.net.nets]
    w0 = g.net.flat_params()

    def set_params(w):
        off = 0
        for net, s in zip(g.net.nets, sizes):
            net.params[:] = w[off:off + s]
            off += s

    def inner_grad(w):
        set_params(w)
        return _inner_tau_grad(g.net, data, idx, tau_rows, n_i)

    corr = darts_correction(w0, v, inner_grad, config.darts_eps)
    set_params(w0)
    if corr is None:
        log.info("upper-level gradient w.r.t. g is zero; using the first-order step")
        return
    # push the correction through h at the interest samples that fed the inner loop
    h = model.h
    h.net.forward(data.h_input(interest), route=data.r(interest))
    h.net.backward((-config.lr_g * corr).reshape(-1, 1))


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

BUNDLE_VERSION = 1


def bundle_dict(model: BilevelModel):
    return {
        "version": BUNDLE_VERSION,
        "config": asdict(model.config),
        "h": model.h.to_dict(),
        "g": model.g.to_dict(),
        "log": [list(r) for r in model.log],
        "x_range": list(model.x_range),
        "seed": model.seed,
    }


def bundle_from_dict(d) -> BilevelModel:
    if d.get("version") != BUNDLE_VERSION:
        raise ConfigurationError(f"unsupported bundle version {d.get('version')!r}")
    return BilevelModel(
        h=QuantileEstimator.from_dict(d["h"]),
        g=QuantileNet.from_dict(d["g"]),
        config=BilevelConfig(**d["config"]),
        log=[tuple(r) for r in d["log"]],
        x_range=tuple(d["x_range"]),
        seed=int(d["seed"]),
    )


def save_bundle(model: BilevelModel, path):
    with open(path, "w") as fh:
        fh.write(dumps(bundle_dict(model)))
        fh.write("\n")


def load_bundle(path) -> BilevelModel:
    with open(path) as fh:
        return bundle_from_dict(json.load(fh))


def write_log_csv(model: BilevelModel, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in model.log:
            w.writerow([row[0]] + [format(float(v), ".17g") for v in row[1:]])
