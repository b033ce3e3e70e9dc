"""Pin-ball loss, empirical quantiles and conditional quantile networks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError, DomainError, NumericError, ShapeError, TrainingError
from .nn import Adam, MlpConfig, RoutedMlp

TAU_LO, TAU_HI = 0.01, 0.99
TAU_ENCODINGS = ("logit", "raw")
_LOGIT_CLIP = 1e-12


def _check_tau(tau, open_interval=False):
    t = np.asarray(tau, dtype=np.float64)
    bad = (t <= 0) | (t >= 1) if open_interval else (t < 0) | (t > 1)
    if np.any(bad) or np.any(~np.isfinite(t)):
        raise DomainError(f"tau outside {'(0, 1)' if open_interval else '[0, 1]'}: {tau}")


def pinball_loss(tau, xi):
    """l_tau(xi) = tau * xi for xi >= 0, (tau - 1) * xi otherwise."""
    _check_tau(tau)
    loss, _ = K.pinball(tau, np.asarray(xi, dtype=np.float64))
    if np.ndim(xi) == 0 and np.ndim(tau) == 0:
        return float(loss[0])
    return loss.reshape(np.broadcast(np.asarray(tau), np.asarray(xi)).shape)


def empirical_quantile(values, tau):
    """Smallest minimiser of sum_i l_tau(v_i - mu); always one of the data points.

    The objective's slope between consecutive order statistics is ``k - tau*n``
    (k = number of points at or below mu), so the minimiser is the
    ``ceil(tau*n)``-th order statistic. The ceiling is taken in exact rational
    arithmetic so e.g. tau=0.7, n=10 is not pushed to the 8th point by rounding.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise DomainError("empirical_quantile of an empty list")
    _check_tau(tau, open_interval=True)
    k = math.ceil(Fraction(float(tau)) * v.size)
    return float(v[max(k, 1) - 1])


# ----------------------------------------------------------------------
# scaling
# ----------------------------------------------------------------------

@dataclass
class Scaler:
    """Input standardisation and a robust output scale.

    x and z are centred/scaled by mean and std of the training split (x is left
    untouched when binary, it is used for routing). y is centred on its median
    and scaled by IQR / 1.349, which equals the std for Gaussian data but is not
    dominated by the heavy tails of the exp-type families.
    """

    x_mean: float
    x_std: float
    z_mean: np.ndarray
    z_std: np.ndarray
    y_center: float
    y_scale: float
    x_binary: bool = False

    @classmethod
    def fit(cls, x, z, y, x_binary=False):
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64).reshape(x.shape[0], -1)
        y = np.asarray(y, dtype=np.float64)

        def safe(s):
            return np.where(s > 1e-12, s, 1.0)

        q25, q50, q75 = np.percentile(y, [25, 50, 75])
        scale = (q75 - q25) / 1.349
        if not scale > 1e-12:
            scale = float(y.std()) if y.std() > 1e-12 else 1.0
        return cls(
            x_mean=0.0 if x_binary else float(x.mean()),
            x_std=1.0 if x_binary else float(safe(np.array(x.std()))),
            z_mean=z.mean(axis=0),
            z_std=safe(z.std(axis=0)),
            y_center=float(q50),
            y_scale=float(scale),
            x_binary=x_binary,
        )

    def x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def z(self, z):
        z = np.asarray(z, dtype=np.float64)
        return (z.reshape(z.shape[0], -1) - self.z_mean) / self.z_std

    def y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_center) / self.y_scale

    def y_inv(self, ys):
        return np.asarray(ys) * self.y_scale + self.y_center

    def to_dict(self):
        d = asdict(self)
        d["z_mean"] = list(map(float, self.z_mean))
        d["z_std"] = list(map(float, self.z_std))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["z_mean"] = np.asarray(d["z_mean"], dtype=np.float64)
        d["z_std"] = np.asarray(d["z_std"], dtype=np.float64)
        return cls(**d)


def encode_tau(tau, encoding="logit"):
    """Network feature for tau and its derivative d feature / d tau.

    The logit spreads the tails, so g can keep growing as tau -> 1 instead of
    squeezing the whole upper tail into the last few thousandths of [0, 1].
    """
    t = np.asarray(tau, dtype=np.float64)
    if encoding == "raw":
        return t, np.ones_like(t)
    c = np.clip(t, _LOGIT_CLIP, 1.0 - _LOGIT_CLIP)
    inside = (t > _LOGIT_CLIP) & (t < 1.0 - _LOGIT_CLIP)
    return np.log(c) - np.log1p(-c), np.where(inside, 1.0 / (c * (1.0 - c)), 0.0)


def _route(x_binary, x):
    return np.asarray(x).round().astype(np.int64) if x_binary else None


def features(scaler: Scaler, x, z, last):
    """Network input rows ``[x?, z..., last]``; x is dropped when it only routes."""
    cols = [] if scaler.x_binary else [scaler.x(x)[:, None]]
    cols.append(scaler.z(z))
    cols.append(np.asarray(last, dtype=np.float64).reshape(-1, 1))
    return np.hstack(cols)


# ----------------------------------------------------------------------
# conditional quantile network g(x, z, tau)
# ----------------------------------------------------------------------

class QuantileNet:
    """g(x, z, tau) in raw units, backed by a (possibly twin) RoutedMlp."""

    def __init__(self, net: RoutedMlp, scaler: Scaler, tau_encoding="logit"):
        if tau_encoding not in TAU_ENCODINGS:
            raise ConfigurationError(f"tau_encoding must be one of {TAU_ENCODINGS}")
        self.net = net
        self.scaler = scaler
        self.tau_encoding = tau_encoding
        self._dfeat = None

    @classmethod
    def build(cls, scaler: Scaler, z_dim, hidden_dim=200, n_residual_blocks=2, seed=0,
              hidden_activation="silu", layer_norm=True, tau_encoding="logit"):
        in_dim = z_dim + 1 + (0 if scaler.x_binary else 1)
        cfg = MlpConfig(
            input_dim=in_dim, hidden_dim=hidden_dim, output_dim=1,
            n_residual_blocks=n_residual_blocks, hidden_activation=hidden_activation,
            output_activation="identity", layer_norm=layer_norm,
        )
        return cls(RoutedMlp(cfg, n_routes=2 if scaler.x_binary else 1, seed=seed), scaler, tau_encoding)

    def forward_std(self, x, z, tau, cache=True):
        """Prediction in standardised output units."""
        t = np.asarray(tau, dtype=np.float64)
        if np.any((t < 0) | (t > 1)):
            raise DomainError("tau input must lie in [0, 1]")
        feat, dfeat = encode_tau(np.broadcast_to(t, np.shape(x)), self.tau_encoding)
        if cache:
            self._dfeat = dfeat
        feats = features(self.scaler, x, z, feat)
        return self.net.forward(feats, route=_route(self.scaler.x_binary, x), cache=cache)[:, 0]

    def backward_std(self, upstream, accumulate=True):
        """Backprop dL/d(standardised prediction); returns dL/d tau per row."""
        dx = self.net.backward(np.asarray(upstream, dtype=np.float64).reshape(-1, 1), accumulate=accumulate)
        return dx[:, -1] * self._dfeat

    def predict(self, x, z, tau):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        z = np.asarray(z, dtype=np.float64).reshape(x.shape[0], -1)
        return self.scaler.y_inv(self.forward_std(x, z, np.broadcast_to(tau, x.shape), cache=False))

    def to_dict(self):
        return {"net": self.net.to_dict(), "scaler": self.scaler.to_dict(), "tau_encoding": self.tau_encoding}

    @classmethod
    def from_dict(cls, d):
        return cls(RoutedMlp.from_dict(d["net"]), Scaler.from_dict(d["scaler"]), d.get("tau_encoding", "raw"))


@dataclass
class QuantileTrainConfig:
    hidden_dim: int = 64
    n_residual_blocks: int = 2
    steps: int = 3000
    batch_size: int = 1024
    lr: float = 1e-3
    lr_final: float = 1e-5
    tau_lo: float = TAU_LO
    tau_hi: float = TAU_HI


def cosine_lr(step, total, lr, lr_final):
    frac = step / max(total - 1, 1)
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + np.cos(np.pi * frac))


def pinball_step(g: QuantileNet, x, z, y_std, tau):
    """Forward + backward of the mean pin-ball loss; returns (loss, dloss/dtau per row)."""
    pred = g.forward_std(x, z, tau)
    resid = y_std - pred
    loss, slope = K.pinball(tau, resid)
    n = resid.size
    # d loss / d pred = -slope / n
    dtau = g.backward_std(-slope / n)
    return float(loss.sum() / n), dtau


def train_quantile_net(dataset, config: QuantileTrainConfig = None, seed=0):
    """Fit g on (x, z, tau) -> y with tau ~ U(tau_lo, tau_hi) drawn per row."""
    config = config or QuantileTrainConfig()
    if len(dataset) == 0:
        raise ShapeError("empty dataset")
    rng = np.random.Generator(np.random.Philox(seed))
    scaler = Scaler.fit(dataset.x, dataset.z, dataset.y, x_binary=dataset.spec.x_binary)
    g = QuantileNet.build(scaler, dataset.z.shape[1], config.hidden_dim, config.n_residual_blocks, seed=seed)
    opt = Adam(g.net, config.lr)
    y_std = scaler.y(dataset.y)
    n = len(dataset)
    history = []
    for step in range(config.steps):
        opt.lr = cosine_lr(step, config.steps, config.lr, config.lr_final)
        idx = rng.integers(0, n, size=config.batch_size)
        tau = rng.uniform(config.tau_lo, config.tau_hi, size=config.batch_size)
        loss, _ = pinball_step(g, dataset.x[idx], dataset.z[idx], y_std[idx], tau)
        if not np.isfinite(loss):
            raise TrainingError(f"pin-ball loss diverged at step {step}", diagnostics={"history": history[-20:]})
        history.append(loss)
        try:
            opt.step()
        except NumericError as exc:
            raise TrainingError(f"non-finite gradient at step {step}", diagnostics={"history": history[-20:]}) from exc
    g.history = history
    return g


def coverage(g: QuantileNet, dataset, taus):
    """Held-out fraction of rows with y <= g(x, z, tau), one value per tau."""
    return np.array([np.mean(dataset.y <= g.predict(dataset.x, dataset.z, t)) for t in taus])


# ----------------------------------------------------------------------
# linear baseline
# ----------------------------------------------------------------------

def linear_quantile_baseline(dataset, tau, tol=1e-7, max_iter=10000, lr=0.02, patience=100):
    """Linear quantile regression y ~ a*x + b.z + c by subgradient descent.

    Full-batch subgradients of the mean pin-ball loss on standardised columns,
    preconditioned with Adam moments and a 1/sqrt(t) step decay. The best
    iterate is kept; iteration stops once it has not improved by more than
    ``tol`` for ``patience`` steps. Returns ``(a, b, c)`` in raw units.
    """
    _check_tau(tau, open_interval=True)
    x = np.asarray(dataset.x, dtype=np.float64)
    z = np.asarray(dataset.z, dtype=np.float64).reshape(x.shape[0], -1)
    y = np.asarray(dataset.y, dtype=np.float64)
    F = np.column_stack([x, z])
    mu, sd = F.mean(axis=0), F.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    A = np.column_stack([(F - mu) / sd, np.ones(x.shape[0])])
    yc = y.mean()
    ys = y.std() if y.std() > 1e-12 else 1.0
    yn = (y - yc) / ys
    n = yn.size
    w = np.zeros(A.shape[1])
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    best_loss, best_w, last_gain = np.inf, w.copy(), 0
    for t in range(1, max_iter + 1):
        r = yn - A @ w
        slope = np.where(r >= 0, tau, tau - 1.0)
        loss = float(np.mean(slope * r))
        if loss < best_loss - tol:
            best_loss, best_w, last_gain = loss, w.copy(), t
        elif t - last_gain > patience:
            break
        grad = -(A.T @ slope) / n
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        mhat = m / (1 - 0.9 ** t)
        vhat = v / (1 - 0.999 ** t)
        w = w - lr / np.sqrt(1.0 + t / 50.0) * mhat / (np.sqrt(vhat) + 1e-8)
    coef = best_w[:-1] * ys / sd
    intercept = yc + ys * best_w[-1] - float(coef @ mu)
    return float(coef[0]), coef[1:], float(intercept)
