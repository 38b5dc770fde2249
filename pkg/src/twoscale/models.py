"""Builtin benchmark models with analytic oracles, plus assumption checkers.

The checkers evaluate the standing regularity and stability conditions on a
sampled region; certificates are numerical evidence over the stated sample,
not symbolic proofs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .rng import RngStream
from .sde import ConfigurationError, ModelSpec

__all__ = [
    "SampleSpec",
    "StabilityCert",
    "RegularityReport",
    "GaussianInvariant",
    "KalmanParams",
    "BuiltinModel",
    "builtin",
    "check_lyapunov",
    "check_regularity",
    "moment_constants",
    "as_spec",
    "certificate_of",
    "BUILTIN_NAMES",
]


# ---------------------------------------------------------------------------
# sampling region

@dataclass(frozen=True)
class SampleSpec:
    """Region and budget for sampled assumption checks.

    z is drawn uniformly from the box [-z_box, z_box]^p and y uniformly from
    the ball of radius ``y_radius`` (default 10 * sqrt(delta0/delta1) when a
    certificate is available, covering the sublevel set where the invariant
    mass concentrates, else 10).
    """

    n_points: int = 4096
    z_box: float = 5.0
    y_radius: Optional[float] = None
    seed: int = 20240901

    def draw(self, p: int, q: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
        gen = RngStream(self.seed).generator()
        z = gen.uniform(-self.z_box, self.z_box, size=(self.n_points, p))
        u = gen.standard_normal((self.n_points, q))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = radius * gen.uniform(0.0, 1.0, self.n_points) ** (1.0 / q)
        return z, u * r[:, None]


def _default_radius(delta0: Optional[float], delta1: Optional[float]) -> float:
    if delta0 is not None and delta1 is not None and delta0 > 0 and delta1 > 0:
        return 10.0 * np.sqrt(delta0 / delta1)
    return 10.0


# ---------------------------------------------------------------------------
# stability certificate

@dataclass(frozen=True)
class StabilityCert:
    """Sampled evidence for the drift condition <h(z,y), Ay> <= d0 - d1 <y,Ay>."""

    A: np.ndarray
    delta0: float
    delta1: float
    valid: bool
    worst_margin: float
    worst_z: np.ndarray
    worst_y: np.ndarray
    n_points: int
    y_radius: float
    z_box: float

    def as_dict(self) -> dict:
        return {
            "A": np.asarray(self.A).tolist(),
            "delta0": self.delta0,
            "delta1": self.delta1,
            "valid": bool(self.valid),
            "worst_margin": float(self.worst_margin),
            "worst_z": np.asarray(self.worst_z).tolist(),
            "worst_y": np.asarray(self.worst_y).tolist(),
            "n_points": self.n_points,
            "y_radius": self.y_radius,
            "z_box": self.z_box,
        }


def _require_spd(A: np.ndarray, q: int) -> np.ndarray:
    A = np.asarray(A, float)
    if A.shape == ():
        A = A.reshape(1, 1)
    if A.shape != (q, q):
        raise ConfigurationError(f"A must be {q}x{q}")
    if not np.allclose(A, A.T, atol=1e-12):
        raise ConfigurationError("A must be symmetric")
    if np.linalg.eigvalsh(A).min() <= 0:
        raise ConfigurationError("A must be positive definite")
    return A


def check_lyapunov(
    model,
    A: np.ndarray,
    delta0: float,
    delta1: float,
    sample: Optional[SampleSpec] = None,
) -> StabilityCert:
    """Evaluate the stability drift condition on a random sample of (z, y)."""
    spec = as_spec(model)
    A = _require_spd(A, spec.q)
    sample = sample or SampleSpec()
    radius = sample.y_radius or _default_radius(delta0, delta1)
    z, y = sample.draw(spec.p, spec.q, radius)
    Ay = y @ A.T
    margin = np.einsum("ij,ij->i", spec.h(z, y), Ay) - delta0 + delta1 * np.einsum(
        "ij,ij->i", y, Ay
    )
    worst = int(np.argmax(margin))
    return StabilityCert(
        A=A,
        delta0=float(delta0),
        delta1=float(delta1),
        valid=bool(margin[worst] <= 1e-9),
        worst_margin=float(margin[worst]),
        worst_z=z[worst],
        worst_y=y[worst],
        n_points=sample.n_points,
        y_radius=float(radius),
        z_box=float(sample.z_box),
    )


# ---------------------------------------------------------------------------
# regularity probes

@dataclass
class RegularityReport:
    """Estimated regularity constants from numerical probes (report-only)."""

    b_sup: float
    eta_sup: float
    h_at_y0: float
    h_growth: float
    sigma_growth: float
    lipschitz: dict
    sigma_min_sv: float
    eta_min_sv: float
    bounded_b: bool
    passed: bool
    failures: list
    notes: list

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "b_sup", "eta_sup", "h_at_y0", "h_growth", "sigma_growth",
            "sigma_min_sv", "eta_min_sv", "bounded_b", "passed")}
        d["lipschitz"] = self.lipschitz
        d["failures"] = list(self.failures)
        d["notes"] = list(self.notes)
        return d


def _norms_of_matrix_field(vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sv = np.linalg.svd(vals, compute_uv=False)
    return sv[..., 0], sv[..., -1]


def _matrix_field(fn, *args, dim: int, npts: int) -> np.ndarray:
    vals = np.asarray(fn(*args), float)
    if vals.ndim == 2:  # constant coefficient
        vals = np.broadcast_to(vals, (npts, dim, dim))
    return vals


def check_regularity(
    model,
    sample: Optional[SampleSpec] = None,
    declared: Optional[dict] = None,
    y0: Optional[np.ndarray] = None,
) -> RegularityReport:
    """Numerical probes of boundedness, growth, Lipschitz quotients, ellipticity.

    ``declared`` may bound any of: b_sup, eta_sup, h_at_y0, h_growth,
    sigma_growth, lip_b, lip_h, lip_sigma, lip_eta, ellipticity.  The sigma
    growth probe uses the linear-growth-in-x reading (see notes in output).
    """
    spec = as_spec(model)
    declared = dict(declared or {})
    if declared is None:
        declared = {}
    sample = sample or SampleSpec()
    cert = certificate_of(model)
    radius = sample.y_radius or _default_radius(
        cert[1] if cert else None, cert[2] if cert else None
    )
    z, y = sample.draw(spec.p, spec.q, radius)
    npts = len(z)

    bvals = np.asarray(spec.b(z, y), float)
    b_norm = np.linalg.norm(bvals, axis=-1)
    b_sup = float(b_norm.max())

    eta_vals = _matrix_field(spec.eta, z, y, dim=spec.q, npts=npts)
    eta_max_sv, eta_min_sv = _norms_of_matrix_field(eta_vals)
    sig_vals = _matrix_field(spec.sigma, z, dim=spec.p, npts=npts)
    sig_max_sv, sig_min_sv = _norms_of_matrix_field(sig_vals)

    y0 = np.zeros(spec.q) if y0 is None else np.atleast_1d(np.asarray(y0, float))
    h_y0 = float(np.linalg.norm(spec.h(z, np.broadcast_to(y0, y.shape)), axis=-1).max())
    h_growth = float(
        (np.linalg.norm(spec.h(z, y), axis=-1) ** 2 / (1 + (y**2).sum(-1))).max()
    )
    sigma_growth = float((sig_max_sv**2 / (1 + (z**2).sum(-1))).max())

    # boundedness heuristic: does sup ||b|| keep growing with the sample radius?
    r = np.linalg.norm(y, axis=1)
    sup_half = b_norm[r <= radius / 2].max() if np.any(r <= radius / 2) else b_sup
    bounded_b = bool(b_sup <= max(1.05 * sup_half, sup_half + 1e-9))
    if "b_sup" in declared:
        bounded_b = bool(b_sup <= declared["b_sup"] * (1 + 1e-9))

    lipschitz = {
        name: _lip_quotients(fn, z, y, kind)
        for name, fn, kind in (
            ("b", spec.b, "xy"),
            ("h", spec.h, "xy"),
            ("sigma", lambda x, _y: spec.sigma(x), "x"),
            ("eta", spec.eta, "xy"),
        )
    }

    failures = []
    checks = {
        "b_sup": b_sup,
        "eta_sup": float(eta_max_sv.max()),
        "h_at_y0": h_y0,
        "h_growth": h_growth,
        "sigma_growth": sigma_growth,
        "lip_b": lipschitz["b"]["joint"],
        "lip_h": lipschitz["h"]["joint"],
        "lip_sigma": lipschitz["sigma"]["joint"],
        "lip_eta": lipschitz["eta"]["joint"],
    }
    for key, estimate in checks.items():
        if key in declared and estimate > declared[key] * (1 + 1e-6) + 1e-12:
            failures.append(f"{key}: estimated {estimate:.6g} > declared {declared[key]:.6g}")
    if "ellipticity" in declared:
        ell = min(float(sig_min_sv.min()), float(eta_min_sv.min()))
        if ell < declared["ellipticity"] * (1 - 1e-6) - 1e-12:
            failures.append(f"ellipticity: estimated {ell:.6g} < declared {declared['ellipticity']:.6g}")
    notes = [
        "sigma growth probed against 1 + ||x||^2 (linear growth in the slow variable)",
        f"sampled {npts} points, z box {sample.z_box}, y radius {radius:.3g}",
    ]
    return RegularityReport(
        b_sup=b_sup,
        eta_sup=float(eta_max_sv.max()),
        h_at_y0=h_y0,
        h_growth=h_growth,
        sigma_growth=sigma_growth,
        lipschitz=lipschitz,
        sigma_min_sv=float(sig_min_sv.min()),
        eta_min_sv=float(eta_min_sv.min()),
        bounded_b=bounded_b,
        passed=not failures,
        failures=failures,
        notes=notes,
    )


def _lip_quotients(fn, z: np.ndarray, y: np.ndarray, kind: str) -> dict:
    """Max difference quotients over sampled point pairs (joint, per argument)."""
    half = len(z) // 2
    z1, z2 = z[:half], z[half : 2 * half]
    y1, y2 = y[:half], y[half : 2 * half]

    def _dist(a, b):
        d = np.asarray(a - b, float)
        return np.sqrt((d.reshape(len(d), -1) ** 2).sum(-1))

    def _quot(a, b, denom):
        num = _dist(a, b)
        ok = denom > 1e-9
        return float((num[ok] / denom[ok]).max()) if np.any(ok) else 0.0

    def f(zz, yy):
        v = np.asarray(fn(zz, yy), float)
        if v.ndim == 0 or v.shape[0] != len(zz):  # constant coefficient
            v = np.broadcast_to(v, (len(zz),) + v.shape)
        return v

    out = {
        "joint": _quot(f(z1, y1), f(z2, y2), np.sqrt(_dist(z1, z2) ** 2 + _dist(y1, y2) ** 2)),
        "x": _quot(f(z1, y1), f(z2, y1), _dist(z1, z2)),
    }
    if kind == "xy":
        out["y"] = _quot(f(z1, y1), f(z1, y2), _dist(y1, y2))
    return out


# ---------------------------------------------------------------------------
# closed-form invariant families (Gaussian) and expectations

def _gh_nodes(q: int, deg: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite.hermgauss(deg)
    if q == 1:
        return (np.sqrt(2.0) * x)[:, None], w / np.sqrt(np.pi)
    grids = np.meshgrid(*([x] * q), indexing="ij")
    pts = np.sqrt(2.0) * np.stack([g.ravel() for g in grids], axis=-1)
    wprod = w
    for _ in range(q - 1):
        wprod = np.multiply.outer(wprod, w)
    return pts, wprod.ravel() / np.pi ** (q / 2.0)


@dataclass(frozen=True)
class GaussianInvariant:
    """Gaussian frozen-invariant family N(mean_fn(z), cov) with quadrature.

    Expectations of smooth test functions are computed by (tensor)
    Gauss-Hermite quadrature, vectorized along a path of z values.
    """

    mean_fn: Callable
    cov: np.ndarray
    q: int
    deg: int = 64

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, float))
        object.__setattr__(self, "cov", cov)
        deg = self.deg if self.q == 1 else min(self.deg, 24)
        pts, w = _gh_nodes(self.q, deg)
        L = np.linalg.cholesky(cov)
        object.__setattr__(self, "_offsets", pts @ L.T)
        object.__setattr__(self, "_weights", w)

    def mean(self, z) -> np.ndarray:
        return np.asarray(self.mean_fn(np.atleast_1d(np.asarray(z, float))), float)

    def expectation(self, f: Callable, z) -> float:
        pts = self.mean(z)[None, :] + self._offsets
        return float(self._weights @ np.asarray(f(pts), float))

    def expectation_vec(self, f: Callable, z) -> np.ndarray:
        """Quadrature of a vector-valued integrand y -> f(y)."""
        pts = self.mean(z)[None, :] + self._offsets
        return self._weights @ np.asarray(f(pts), float)

    def expectation_along(self, f: Callable, Z: np.ndarray) -> np.ndarray:
        """E_{pi^{*,z}}[f] for each row z of Z, shape (M,)."""
        Z = np.atleast_2d(np.asarray(Z, float))
        means = np.asarray(self.mean_fn(Z), float)  # (M, q)
        pts = means[:, None, :] + self._offsets[None, :, :]
        return np.asarray(f(pts), float) @ self._weights

    def sample(self, z, size: int, rng: RngStream) -> np.ndarray:
        L = np.linalg.cholesky(self.cov)
        return self.mean(z)[None, :] + rng.generator().standard_normal((size, self.q)) @ L.T


# ---------------------------------------------------------------------------
# builtin models

@dataclass(frozen=True)
class KalmanParams:
    """Scalar linear-Gaussian coefficients: b = c y + d(x), h = a y + g(x).

    ``g`` and ``d`` are callables of the slow state (None means zero).
    """

    a: float
    c: float
    sigma: float
    eta: float
    g: Optional[Callable] = None
    d: Optional[Callable] = None


@dataclass(frozen=True)
class BuiltinModel:
    """A ModelSpec bundled with its analytic oracles and certificates."""

    name: str
    spec: ModelSpec
    A: np.ndarray
    delta0: float
    delta1: float
    invariant: GaussianInvariant
    averaged_drift: Callable
    declared: dict
    eta_sq_sup: float = 1.0
    kalman: Optional[KalmanParams] = None
    bounded_b: bool = True

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def q(self) -> int:
        return self.spec.q

    def lyapunov_weight(self, y: np.ndarray) -> np.ndarray:
        """V(y) = <y, Ay>, vectorized over leading axes."""
        Ay = np.asarray(y, float) @ np.asarray(self.A).T
        return np.einsum("...i,...i->...", np.asarray(y, float), Ay)

    def moment_constants(self, k: int) -> tuple[float, float]:
        return moment_constants(self.A, self.delta0, self.delta1, self.eta_sq_sup, k)


def moment_constants(A, delta0: float, delta1: float, eta_sq_sup: float, k: int):
    """Drift-condition constants (beta0, beta1) for the weight <y,Ay>^k.

    Valid for eta eta^T <= eta_sq_sup * I uniformly.  Only k in {1, 2} is
    supported; both give beta1 = 2 delta1.
    """
    A = np.atleast_2d(np.asarray(A, float))
    tr = float(np.trace(A))
    lam_max = float(np.linalg.eigvalsh(A).max())
    if k == 1:
        return eta_sq_sup * tr + 2 * delta0, 2 * delta1
    if k == 2:
        c1 = 4 * eta_sq_sup * lam_max + 2 * eta_sq_sup * tr + 4 * delta0
        return c1**2 / (8 * delta1), 2 * delta1
    raise ConfigurationError("moment constants implemented for k in {1, 2}")


# coefficient callbacks are module-level so model objects pickle cleanly

_EYE1 = np.eye(1)
_EYE2 = np.eye(2)


def _sincos_b(x, y):
    return np.cos(y)


def _sincos_h(x, y):
    return np.sin(x) - y


def _const_eye1(*args):
    return _EYE1


def _lingauss_b(x, y):
    return np.array(y, float, copy=True)


def _lingauss_h(x, y):
    return -y


_OU2D_K = np.array([[1.0, 1.2], [0.0, 0.8]])
_OU2D_SIGMA_Y = np.array([[1.0, -5.0 / 12.0], [-5.0 / 12.0, 5.0 / 8.0]])
_OU2D_A = np.array([[1.0, -2.0 / 3.0], [-2.0 / 3.0, 2.25]])


def _ou2d_b(x, y):
    return np.cos(y.sum(axis=-1, keepdims=True))


def _ou2d_h(x, y):
    g = np.concatenate([np.sin(x), np.zeros_like(x)], axis=-1)
    return g - y @ _OU2D_K.T


def _const_eye2(*args):
    return _EYE2


def _sincos_mean(z):
    return np.sin(z)


def _zero_mean(z):
    return np.zeros_like(np.atleast_1d(z))


def _ou2d_mean(z):
    return np.concatenate([np.sin(z), np.zeros_like(z)], axis=-1)


def _sincos_bbar(x):
    return np.exp(-0.25) * np.cos(np.sin(x))


def _lingauss_bbar(x):
    return np.zeros_like(np.atleast_1d(x))


_OU2D_U_VAR = float(np.ones(2) @ _OU2D_SIGMA_Y @ np.ones(2))  # Var(y1 + y2)


def _ou2d_bbar(x):
    return np.exp(-0.5 * _OU2D_U_VAR) * np.cos(np.sin(x))


BUILTIN_NAMES = ("SINCOS", "LINGAUSS", "OU2D")


def builtin(name: str) -> BuiltinModel:
    """Construct a builtin benchmark model by name.

    SINCOS   : p=q=1, b=cos y, sigma=1, h=sin x - y, eta=1.  Frozen invariant
               N(sin z, 1/2); averaged drift exp(-1/4) cos(sin x).
    LINGAUSS : p=q=1, b=y, sigma=1, h=-y, eta=1.  Linear-Gaussian, so the
               conditional law has a Kalman-Bucy closed form; b is unbounded.
    OU2D     : p=1, q=2 fast Ornstein-Uhlenbeck block with a non-identity
               Lyapunov matrix, for matrix-weight coverage.
    """
    key = name.upper()
    if key == "SINCOS":
        spec = ModelSpec(
            p=1, q=1, b=_sincos_b, sigma=_const_eye1, h=_sincos_h, eta=_const_eye1,
            x0=[0.0], y0=[0.0], stability_cap=0.2, label="SINCOS",
        )
        return BuiltinModel(
            name="SINCOS",
            spec=spec,
            A=np.eye(1),
            delta0=0.5,
            delta1=0.5,
            invariant=GaussianInvariant(_sincos_mean, [[0.5]], q=1),
            averaged_drift=_sincos_bbar,
            kalman=None,
            bounded_b=True,
            declared={
                "b_sup": 1.0, "eta_sup": 1.0, "h_at_y0": 1.0, "h_growth": 4.0,
                "sigma_growth": 1.0, "lip_b": 1.0, "lip_h": np.sqrt(2.0),
                "lip_sigma": 0.0, "lip_eta": 0.0, "ellipticity": 1.0,
            },
        )
    if key == "LINGAUSS":
        spec = ModelSpec(
            p=1, q=1, b=_lingauss_b, sigma=_const_eye1, h=_lingauss_h, eta=_const_eye1,
            x0=[0.0], y0=[0.0], stability_cap=0.1, label="LINGAUSS",
        )
        return BuiltinModel(
            name="LINGAUSS",
            spec=spec,
            A=np.eye(1),
            delta0=0.0,
            delta1=1.0,
            invariant=GaussianInvariant(_zero_mean, [[0.5]], q=1),
            averaged_drift=_lingauss_bbar,
            kalman=KalmanParams(a=-1.0, c=1.0, sigma=1.0, eta=1.0),
            bounded_b=False,
            declared={
                "eta_sup": 1.0, "h_at_y0": 0.0, "h_growth": 1.0,
                "sigma_growth": 1.0, "lip_b": 1.0, "lip_h": 1.0,
                "lip_sigma": 0.0, "lip_eta": 0.0, "ellipticity": 1.0,
            },
        )
    if key == "OU2D":
        lam_max = float(np.linalg.eigvalsh(_OU2D_A).max())
        spec = ModelSpec(
            p=1, q=2, b=_ou2d_b, sigma=_const_eye1, h=_ou2d_h, eta=_const_eye2,
            x0=[0.0], y0=[0.0, 0.0], stability_cap=0.2, label="OU2D",
        )
        return BuiltinModel(
            name="OU2D",
            spec=spec,
            A=_OU2D_A,
            delta0=13.0 / 18.0,
            delta1=0.5 / lam_max,
            invariant=GaussianInvariant(_ou2d_mean, _OU2D_SIGMA_Y, q=2),
            averaged_drift=_ou2d_bbar,
            kalman=None,
            bounded_b=True,
            declared={
                "b_sup": 1.0, "eta_sup": 1.0, "h_at_y0": 1.0,
                "sigma_growth": 1.0, "lip_sigma": 0.0, "lip_eta": 0.0,
                "ellipticity": 1.0,
            },
        )
    raise ConfigurationError(f"unknown builtin model '{name}' (have {', '.join(BUILTIN_NAMES)})")


def as_spec(model) -> ModelSpec:
    """Accept either a bare ModelSpec or a BuiltinModel."""
    return model.spec if isinstance(model, BuiltinModel) else model


def certificate_of(model):
    """(A, delta0, delta1) when the model carries a stability certificate."""
    if isinstance(model, BuiltinModel):
        return model.A, model.delta0, model.delta1
    return None
