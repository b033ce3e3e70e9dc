"""Synthetic structural causal models, dataset sampling and ground-truth oracles.

Every built-in family is written as ``y = f(x, z, u)`` with ``u = g(e)`` the
transformed noise. A latent confounder ``c ~ U[-0.5, 0.5]`` can be added to
two children of the graph.

Random numbers come from numpy's Philox4x64-10 counter-based generator
(``np.random.Generator(np.random.Philox(seed))``); draws are taken in the
fixed order x, z, e, c so a (spec, n, seed) triple always yields the same
bytes.
"""
from __future__ import annotations

import functools
import io
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special

from .errors import ConfigurationError, DomainError, OracleUnavailableError

FAMILIES = (
    "linear",
    "additive_sin",
    "multiplicative",
    "post_nonlinear",
    "heteroscedastic",
    "fig2",
    "mono_a",
    "mono_b",
    "mono_c",
    "mono_d",
    "mono_e",
    "dose_cont",
    "dose_dis",
    "custom",
)
NOISE_LAWS = ("std_normal", "uniform01", "uniform_pm1")
G_TRANSFORMS = ("identity", "clip", "square", "cosine", "random_mlp")
CONFOUNDERS = ("none", "c_to_xz", "c_to_zy", "c_to_xy")
X_SUPPORTS = ("uniform", "grid", "binary")

# families whose definition pins the noise transform
_FIXED_G = {"mono_a": "cosine", "mono_b": "square", "mono_c": "random_mlp",
            "mono_d": "random_mlp", "mono_e": "random_mlp"}
NON_MONOTONE = frozenset({"mono_e", "custom"})

C_HALF_WIDTH = 0.5
REFERENCE_DRAWS = 1_000_000
BRUTE_FORCE_DRAWS = 200_000


@dataclass(frozen=True)
class ScmSpec:
    family: str
    noise_law: str = "std_normal"
    g_transform: str = "identity"
    g_lo: float = -0.5
    g_hi: float = 1.0
    g_seed: int = 0
    confounder: str = "none"
    x_support: str = "uniform"
    x_lo: float = 0.0
    x_hi: float = 1.0
    x_step: float = 0.1
    z_lo: float = 0.0
    z_hi: float = 1.0
    z_dim: int = 1
    mlp_seed: int = 1
    custom: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.noise_law not in NOISE_LAWS:
            raise ConfigurationError(f"unknown noise law {self.noise_law!r}")
        if self.g_transform not in G_TRANSFORMS:
            raise ConfigurationError(f"unknown g transform {self.g_transform!r}")
        if self.confounder not in CONFOUNDERS:
            raise ConfigurationError(f"unknown confounder scenario {self.confounder!r}")
        if self.x_support not in X_SUPPORTS:
            raise ConfigurationError(f"unknown x support {self.x_support!r}")
        fixed = _FIXED_G.get(self.family)
        if fixed is not None and self.g_transform != fixed:
            raise ConfigurationError(f"family {self.family} requires g_transform={fixed}, got {self.g_transform}")
        if self.g_transform == "clip" and not self.g_lo < self.g_hi:
            raise ConfigurationError("clip transform needs g_lo < g_hi")
        if self.z_dim < 1 or (self.z_dim > 1 and self.family not in ("linear", "custom")):
            raise ConfigurationError(f"z_dim={self.z_dim} unsupported for family {self.family}")
        if self.family == "custom" and self.custom is None:
            raise ConfigurationError("custom family needs a structural function")
        if self.family == "dose_dis" and self.x_support != "binary":
            raise ConfigurationError("dose_dis needs binary x support")
        if self.x_support == "grid" and not (self.x_step > 0 and self.x_hi > self.x_lo):
            raise ConfigurationError("grid support needs x_step > 0 and x_hi > x_lo")
        if self.confounder in ("c_to_xz", "c_to_xy") and self.x_support == "binary":
            raise ConfigurationError("confounding a binary treatment is not supported")

    @property
    def monotone(self):
        return self.family not in NON_MONOTONE

    @property
    def x_binary(self):
        return self.x_support == "binary"

    def to_config(self):
        """Flat ``key -> str`` mapping (the ``[scm]`` block of a config file)."""
        if self.family == "custom":
            raise ConfigurationError("custom structural functions cannot be serialised")
        return {f.name: str(getattr(self, f.name)) for f in fields(self) if f.name != "custom"}

    @classmethod
    def from_config(cls, block):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in block.items():
            if key not in types or key == "custom":
                raise ConfigurationError(f"unknown scm key {key!r}")
            default = getattr(_DEFAULT_FIELD_VALUES, key, None)
            try:
                if isinstance(default, bool):
                    kw[key] = raw.strip().lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kw[key] = int(raw)
                elif isinstance(default, float):
                    kw[key] = float(raw)
                else:
                    kw[key] = str(raw).strip()
            except ValueError as exc:
                raise ConfigurationError(f"bad value for scm.{key}: {raw!r}") from exc
        if "family" not in kw:
            raise ConfigurationError("scm block needs a 'family' key")
        return cls(**kw)


_DEFAULT_FIELD_VALUES = ScmSpec(family="linear")


def family_spec(family, **overrides):
    """Spec for a family with its documented defaults (support, noise transform)."""
    base = {}
    if family in _FIXED_G:
        base.update(g_transform=_FIXED_G[family], noise_law="uniform_pm1", x_lo=-3.0, x_hi=3.0)
    if family == "dose_cont":
        base.update(x_support="grid", x_lo=0.0, x_hi=2.0, x_step=0.1, z_lo=0.2, z_hi=0.8)
    if family == "dose_dis":
        base.update(x_support="binary", z_lo=0.2, z_hi=0.8)
    base.update(overrides)
    return ScmSpec(family=family, **base)


SCENARIOS = {
    "linear": lambda: family_spec("linear"),
    "linear_uniform": lambda: family_spec("linear", noise_law="uniform01"),
    "additive_sin": lambda: family_spec("additive_sin"),
    "multiplicative": lambda: family_spec("multiplicative"),
    "post_nonlinear": lambda: family_spec("post_nonlinear"),
    "heteroscedastic": lambda: family_spec("heteroscedastic"),
    "fig2_identity": lambda: family_spec("fig2"),
    "fig2_clip": lambda: family_spec("fig2", g_transform="clip", g_lo=-0.5, g_hi=1.0),
    "mono_a": lambda: family_spec("mono_a"),
    "mono_b": lambda: family_spec("mono_b"),
    "mono_c": lambda: family_spec("mono_c"),
    "mono_d": lambda: family_spec("mono_d"),
    "mono_e": lambda: family_spec("mono_e"),
    "dose_cont": lambda: family_spec("dose_cont"),
    "dose_dis": lambda: family_spec("dose_dis"),
    "linear_c_xz": lambda: family_spec("linear", confounder="c_to_xz"),
    "linear_c_zy": lambda: family_spec("linear", confounder="c_to_zy"),
    "linear_c_xy": lambda: family_spec("linear", confounder="c_to_xy"),
}

FIVE_FAMILIES = ("linear", "additive_sin", "multiplicative", "post_nonlinear", "heteroscedastic")


def scenario_spec(name):
    key = name.replace("-", "_").lower()
    if key not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[key]()


# ----------------------------------------------------------------------
# random MLPs used as nuisance functions in the monotonicity study
# ----------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _random_mlp_weights(in_dim, seed):
    # 2 hidden layers of width 100, N(0, 0.25) weights
    rng = np.random.Generator(np.random.Philox(seed))
    dims = [in_dim, 100, 100, 1]
    return tuple((rng.normal(0.0, 0.25, (a, b)), rng.normal(0.0, 0.25, b)) for a, b in zip(dims[:-1], dims[1:]))


def random_mlp(inputs, seed):
    """Fixed random MLP, LeakyReLU hidden layers and a tanh output."""
    h = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    layers = _random_mlp_weights(h.shape[1], int(seed))
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.where(h > 0, h, 0.01 * h)
    return np.tanh(h[:, 0])


# ----------------------------------------------------------------------
# structural equations
# ----------------------------------------------------------------------

def g_of_e(spec: ScmSpec, e):
    e = np.asarray(e, dtype=np.float64)
    kind = spec.g_transform
    if kind == "identity":
        return e
    if kind == "clip":
        return np.clip(e, spec.g_lo, spec.g_hi)
    if kind == "square":
        return e * e
    if kind == "cosine":
        return np.cos(e)
    out = random_mlp(e.reshape(-1, 1), spec.g_seed)
    return out.reshape(e.shape)


def structural(spec: ScmSpec, x, z, u, c=None):
    """y = f(x, z, u) (+ c when the confounder points into Y).

    ``z`` has shape (n, z_dim) or (n,) for scalar covariates.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).reshape(x.shape[0], -1)
    u = np.asarray(u, dtype=np.float64)
    z1 = z[:, 0]
    fam = spec.family
    pi = np.pi
    if fam == "linear":
        y = x + z.sum(axis=1) + u
    elif fam == "additive_sin":
        y = np.sin(2 * pi * x + z1) + u
    elif fam == "multiplicative":
        y = np.exp(x - z1 + 0.5) * u
    elif fam == "post_nonlinear":
        y = np.exp(np.sin(pi * x + z1) + u)
    elif fam == "heteroscedastic":
        y = np.exp(-5 * x + z1) + np.exp(x + z1 - 0.5) * u
    elif fam == "fig2":
        y = 0.25 * (z1 + np.sin(2 * pi * x) * u + 2 * u)
    elif fam in ("mono_a", "mono_b", "mono_c"):
        y = np.exp(np.cos(pi * x + 3 * z1) + u)
    elif fam == "mono_d":
        y = np.exp(random_mlp(np.column_stack([x, z1]), spec.mlp_seed) + u)
    elif fam == "mono_e":
        # direction of the noise effect flips with the sign of x
        y = np.exp(random_mlp(np.column_stack([x, z1]), spec.mlp_seed) + (x / 3.0) * u)
    elif fam == "dose_cont":
        y = z1 * np.exp(-x) + 0.5 * np.sin(pi * x) + 0.3 * u
    elif fam == "dose_dis":
        y = z1 + x * (1 + z1) * 0.5 + 0.3 * u
    else:
        y = np.asarray(spec.custom(x, z, u), dtype=np.float64)
    if c is not None and spec.confounder in ("c_to_zy", "c_to_xy"):
        y = y + c
    return y


# ----------------------------------------------------------------------
# data
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    x: float
    z: np.ndarray
    y: float
    e: Optional[float] = None
    c: Optional[float] = None


def interest_sample(spec: ScmSpec, x=0.5, z=0.5, e=0.5, c=None):
    """A hand-picked factual sample, with y generated by the spec itself."""
    zz = np.full(spec.z_dim, float(z))
    y = structural(spec, np.array([x]), zz.reshape(1, -1), g_of_e(spec, np.array([e])),
                   None if c is None else np.array([c]))[0]
    return Sample(x=float(x), z=zz, y=float(y), e=float(e), c=c)


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    spec: ScmSpec
    seed: int
    e: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("x", "z", "y", "e", "c"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        return Sample(
            x=float(self.x[i]),
            z=self.z[i].copy(),
            y=float(self.y[i]),
            e=None if self.e is None else float(self.e[i]),
            c=None if self.c is None else float(self.c[i]),
        )

    def samples(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            x=self.x[idx].copy(), z=self.z[idx].copy(), y=self.y[idx].copy(), spec=self.spec,
            seed=self.seed,
            e=None if self.e is None else self.e[idx].copy(),
            c=None if self.c is None else self.c[idx].copy(),
        )

    def split(self, n_train):
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    def to_csv(self, path=None, hidden=True):
        cols = [self.x[:, None], self.z, self.y[:, None]]
        header = ["x"] + [f"z{k}" for k in range(self.z.shape[1])] + ["y"]
        if hidden and self.e is not None:
            cols.append(self.e[:, None])
            header.append("e")
        if hidden and self.c is not None:
            cols.append(self.c[:, None])
            header.append("c")
        buf = io.StringIO()
        np.savetxt(buf, np.hstack(cols), fmt="%.17g", delimiter=",", header=",".join(header), comments="")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _sample_x(spec, rng, n):
    if spec.x_support == "binary":
        return (rng.random(n) < 0.5).astype(np.float64)
    if spec.x_support == "grid":
        k = int(round((spec.x_hi - spec.x_lo) / spec.x_step))
        return spec.x_lo + spec.x_step * rng.integers(0, k + 1, size=n)
    return rng.uniform(spec.x_lo, spec.x_hi, size=n)


def _sample_e(spec, rng, n):
    if spec.noise_law == "uniform01":
        return rng.random(n)
    if spec.noise_law == "uniform_pm1":
        return rng.uniform(-1.0, 1.0, size=n)
    return rng.standard_normal(n)


def _clip_x(spec, x):
    x = np.clip(x, spec.x_lo, spec.x_hi)
    if spec.x_support == "grid":
        x = spec.x_lo + spec.x_step * np.round((x - spec.x_lo) / spec.x_step)
    return x


def sample_dataset(spec: ScmSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. rows; hidden e (and c when confounded) are kept."""
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    x = _sample_x(spec, rng, n)
    z = rng.uniform(spec.z_lo, spec.z_hi, size=(n, spec.z_dim))
    e = _sample_e(spec, rng, n)
    c = None
    if spec.confounder != "none":
        c = rng.uniform(-C_HALF_WIDTH, C_HALF_WIDTH, size=n)
        if spec.confounder in ("c_to_xz", "c_to_xy"):
            x = _clip_x(spec, x + c)
        if spec.confounder in ("c_to_xz", "c_to_zy"):
            z = z + c[:, None]
    y = structural(spec, x, z, g_of_e(spec, e), c)
    return Dataset(x=x, z=z, y=y, spec=spec, seed=seed, e=e, c=c)


def read_dataset_csv(path, spec: Optional[ScmSpec] = None, seed: int = -1) -> Dataset:
    """Load a dataset CSV written by :meth:`Dataset.to_csv`."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if "x" not in header or "y" not in header:
        raise ConfigurationError(f"{path}: dataset CSV needs x and y columns, got {header}")
    zcols = [i for i, h in enumerate(header) if h.startswith("z")]
    if not zcols:
        raise ConfigurationError(f"{path}: dataset CSV needs at least one z column")
    col = {h: i for i, h in enumerate(header)}
    return Dataset(
        x=data[:, col["x"]].copy(),
        z=data[:, zcols].copy(),
        y=data[:, col["y"]].copy(),
        spec=spec if spec is not None else family_spec("linear"),
        seed=seed,
        e=data[:, col["e"]].copy() if "e" in col else None,
        c=data[:, col["c"]].copy() if "c" in col else None,
    )


def make_confounded(spec: ScmSpec, scenario: str) -> ScmSpec:
    """Add a latent ``C ~ U[-0.5, 0.5]`` to the two named children."""
    if scenario in (None, "none"):
        return spec
    if scenario not in CONFOUNDERS:
        raise ConfigurationError(f"unknown confounder scenario {scenario!r}")
    if spec.confounder != "none":
        raise ConfigurationError("spec is already confounded")
    return replace(spec, confounder=scenario)


# ----------------------------------------------------------------------
# oracles
# ----------------------------------------------------------------------

def _noise_cdf(spec, t):
    t = np.asarray(t, dtype=np.float64)
    if spec.noise_law == "uniform01":
        return np.clip(t, 0.0, 1.0)
    if spec.noise_law == "uniform_pm1":
        return np.clip((t + 1.0) / 2.0, 0.0, 1.0)
    return special.ndtr(t)


def _noise_ppf(spec, q):
    if spec.noise_law == "uniform01":
        return np.asarray(q, dtype=np.float64)
    if spec.noise_law == "uniform_pm1":
        return 2.0 * np.asarray(q, dtype=np.float64) - 1.0
    return special.ndtri(q)


def _cos_cdf(spec, c):
    """P(cos E <= c)."""
    a = np.arccos(np.clip(c, -1.0, 1.0))
    total = 0.0
    for k in range(-6, 7):
        lo, hi = 2 * np.pi * k + a, 2 * np.pi * (k + 1) - a
        total += float(_noise_cdf(spec, hi) - _noise_cdf(spec, lo))
    return total


@functools.lru_cache(maxsize=16)
def _reference_g(noise_law, g_seed):
    spec = ScmSpec(family="mono_c", noise_law=noise_law, g_transform="random_mlp", g_seed=g_seed)
    rng = np.random.Generator(np.random.Philox(0xC0FFEE))
    e = _sample_e(spec, rng, REFERENCE_DRAWS)
    out = np.sort(g_of_e(spec, e))
    out.setflags(write=False)
    return out


def g_cdf(spec: ScmSpec, u):
    """P(g(E) <= u)."""
    kind = spec.g_transform
    u = float(u)
    if kind == "identity":
        return float(_noise_cdf(spec, u))
    if kind == "clip":
        if u >= spec.g_hi:
            return 1.0
        if u < spec.g_lo:
            return 0.0
        return float(_noise_cdf(spec, u))
    if kind == "square":
        if u < 0:
            return 0.0
        r = np.sqrt(u)
        return float(_noise_cdf(spec, r) - _noise_cdf(spec, -r))
    if kind == "cosine":
        return _cos_cdf(spec, u)
    ref = _reference_g(spec.noise_law, spec.g_seed)
    return float(np.searchsorted(ref, u, side="right")) / ref.size


def g_quantile(spec: ScmSpec, tau):
    """Smallest u with P(g(E) <= u) >= tau."""
    kind = spec.g_transform
    if kind == "identity":
        return float(_noise_ppf(spec, tau))
    if kind == "clip":
        return float(np.clip(_noise_ppf(spec, tau), spec.g_lo, spec.g_hi))
    if kind == "square":
        # E is symmetric for the normal and U[-1, 1] laws; U[0, 1] is positive
        if spec.noise_law == "uniform01":
            return float(tau) ** 2
        return float(_noise_ppf(spec, (1.0 + tau) / 2.0)) ** 2
    if kind == "cosine":
        lo, hi = -1.0, 1.0
        if _cos_cdf(spec, lo) >= tau:
            return lo
        return float(optimize.brentq(lambda c: _cos_cdf(spec, c) - tau, lo, hi, xtol=1e-14, rtol=1e-15))
    ref = _reference_g(spec.noise_law, spec.g_seed)
    k = int(np.ceil(tau * ref.size)) - 1
    return float(ref[min(max(k, 0), ref.size - 1)])


def true_counterfactual(spec: ScmSpec, sample: Sample, x_prime):
    """f(x', z, g(e)) with the sample's own noise (and confounder) held fixed."""
    if sample.e is None:
        raise OracleUnavailableError("sample carries no hidden noise value")
    if spec.confounder != "none" and sample.c is None:
        raise OracleUnavailableError("confounded spec but sample carries no hidden confounder")
    xp = np.atleast_1d(np.asarray(x_prime, dtype=np.float64))
    n = xp.shape[0]
    z = np.tile(np.asarray(sample.z, dtype=np.float64).reshape(1, -1), (n, 1))
    u = np.full(n, float(g_of_e(spec, np.array([sample.e]))[0]))
    c = None if sample.c is None else np.full(n, sample.c)
    out = structural(spec, xp, z, u, c)
    return float(out[0]) if np.ndim(x_prime) == 0 else out


def true_quantile(spec: ScmSpec, sample: Sample):
    """F_{g(E)}(g(e)): the factual sample's quantile level."""
    if not spec.monotone:
        raise OracleUnavailableError(f"family {spec.family} is not monotone in g(E)")
    if sample.e is None:
        raise OracleUnavailableError("sample carries no hidden noise value")
    if spec.confounder != "none":
        raise OracleUnavailableError("quantile level is not closed-form under latent confounding")
    return g_cdf(spec, float(g_of_e(spec, np.array([sample.e]))[0]))


def conditional_quantile_oracle(spec: ScmSpec, x, z, tau, seed=12345):
    """tau-quantile of P(Y | X=x, Z=z).

    Closed form for monotone families (f evaluated at the tau-quantile of
    g(E)); otherwise the empirical quantile of brute-force noise draws.
    """
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau={tau} outside (0, 1)")
    if spec.confounder != "none":
        raise OracleUnavailableError("conditional law is not available under latent confounding")
    zz = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if zz.shape[1] != spec.z_dim:
        zz = np.full((1, spec.z_dim), float(np.ravel(z)[0]))
    if spec.monotone:
        u = g_quantile(spec, tau)
        return float(structural(spec, np.array([float(x)]), zz, np.array([u]))[0])
    rng = np.random.Generator(np.random.Philox(seed))
    e = _sample_e(spec, rng, BRUTE_FORCE_DRAWS)
    ys = np.sort(structural(spec, np.full(e.size, float(x)), np.repeat(zz, e.size, axis=0), g_of_e(spec, e)))
    k = int(np.ceil(tau * ys.size)) - 1
    return float(ys[min(max(k, 0), ys.size - 1)])
