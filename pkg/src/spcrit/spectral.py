"""Mean semigroup, principal eigenpair and the limit-theorem constants.

The mean semigroup acts on field vectors as exp(t*(Q + diag(alpha))).  Its
principal eigenpair (phi0 right, psi0 left in the m-weighted sense), the
spectral gap and the constants nu and sigma_f^2 feed every limit check
downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.integrate import simpson

from .model import (
    BranchingData,
    SuperprocessModel,
    as_field,
    derived_coefficients,
    m_inner,
    validate_model,
)

TOL_EIG = 1e-10       # componentwise relative tolerance on the eigen relations
TOL_NORM = 1e-12      # tolerance on the two normalizations
TOL_CRITICAL = 1e-9   # |lambda0| below this counts as critical
_COND_LIMIT = 1e8     # eigenvector condition number above which we fall back


class SpectralError(RuntimeError):
    """Eigensolver failure or violated spectral invariant."""


class NotCriticalError(ValueError):
    """Operation requires a critical model (lambda0 = 0)."""


def generator_matrix(model: SuperprocessModel) -> np.ndarray:
    """Generator of the mean semigroup: Q + diag(beta*a)."""
    return model.Q + np.diag(derived_coefficients(model).alpha)


class MeanSemigroup:
    """Action of exp(t*L) with a factorization cached per instance.

    Uses the eigendecomposition of L when it is well conditioned, otherwise
    scaling-and-squaring (scipy's order-13 Pade).  Instances are call-local
    caches; the model itself stays immutable.
    """

    def __init__(self, model: SuperprocessModel):
        self.model = model
        self.L = generator_matrix(model)
        self._cache: dict[float, np.ndarray] = {}
        self._fluct_cache: dict[float, np.ndarray] = {}
        self._eig = None
        n = self.L.shape[0]
        try:
            w, v = sla.eig(self.L)
            cond = np.linalg.cond(v)
            if np.isfinite(cond) and cond < _COND_LIMIT:
                self._eig = (w, v, sla.inv(v))
        except np.linalg.LinAlgError:
            self._eig = None
        self._identity = np.eye(n)

    def matrix(self, t: float) -> np.ndarray:
        """exp(t*L); entry (x, y) is the mean mass at y started from x."""
        if t < 0:
            raise ValueError(f"time must be >= 0, got {t}")
        t = float(t)
        if t == 0.0:
            return self._identity.copy()
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        if self._eig is not None:
            w, v, vinv = self._eig
            out = (v * np.exp(t * w)) @ vinv
            out = out.real
        else:
            out = sla.expm(t * self.L)
        self._cache[t] = out
        return out

    def apply(self, t: float, f: np.ndarray) -> np.ndarray:
        return self.matrix(t) @ f

    def dual_apply(self, t: float, g: np.ndarray) -> np.ndarray:
        """Adjoint action in the m-weighted inner product."""
        m = self.model.m
        return (self.matrix(t).T @ (g * m)) / m

    def fluct_matrix(self, t: float) -> np.ndarray:
        """exp(t*L) with the principal mode removed.

        Agrees with the full matrix on fields whose principal component
        vanishes, but keeps full relative precision on them: through the
        full matrix those images cancel out of O(1) entries and drown in
        roundoff once they shrink below ~1e-16 of the principal scale.
        """
        if t < 0:
            raise ValueError(f"time must be >= 0, got {t}")
        t = float(t)
        hit = self._fluct_cache.get(t)
        if hit is not None:
            return hit
        if self._eig is None:
            # defective generator: best effort via the full matrix
            out = sla.expm(t * self.L)
        else:
            w, v, vinv = self._eig
            weights = np.exp(t * w)
            weights[int(np.argmax(w.real))] = 0.0
            out = ((v * weights) @ vinv).real
        self._fluct_cache[t] = out
        return out

    def fluct_apply(self, t: float, f: np.ndarray) -> np.ndarray:
        return self.fluct_matrix(t) @ f

    def density(self, t: float) -> np.ndarray:
        """Kernel q(t,x,y) of the semigroup with respect to m."""
        if t <= 0:
            raise ValueError(f"density needs t > 0, got {t}")
        return self.matrix(t) / self.model.m[None, :]


def mean_semigroup(model: SuperprocessModel, t: float) -> np.ndarray:
    """Matrix of the mean semigroup at time t (acts by M @ f)."""
    return MeanSemigroup(model).matrix(t)


def density_matrix(model: SuperprocessModel, t: float) -> np.ndarray:
    return MeanSemigroup(model).density(t)


@dataclass(frozen=True, eq=False)
class SpectralData:
    """Principal eigendata of the mean semigroup generator.

    phi0 is the positive right eigenvector with unit m-weighted 2-norm,
    psi0 the positive left one normalized against phi0; gamma is the gap
    to the rest of the spectrum's real parts (+inf for one state) and
    c_expansion the fitted constant of the kernel expansion bound.  The
    reference weights m are carried for inner products.
    """

    lambda0: float
    phi0: np.ndarray
    psi0: np.ndarray
    gamma: float
    c_expansion: float
    m: np.ndarray

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return m_inner(f, g, self.m)

    def psi_weight(self, f: np.ndarray) -> float:
        """The m-weighted pairing of f with psi0."""
        return m_inner(f, self.psi0, self.m)

    @property
    def is_critical(self) -> bool:
        return abs(self.lambda0) <= TOL_CRITICAL


def _principal_pair(L: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Principal eigenvalue, right/left eigenvectors and the spectral gap."""
    w, vl, vr = sla.eig(L, left=True, right=True)
    scale = max(1.0, float(np.abs(L).max()))
    order = np.argsort(-w.real)
    i0 = order[0]
    lam = w[i0]
    if abs(lam.imag) > 1e-9 * scale:
        raise SpectralError(
            f"leading eigenvalue has nonreal part {lam.imag}; expected a real "
            f"simple principal eigenvalue"
        )
    close = np.abs(w - lam) < 1e-9 * scale
    if close.sum() > 1:
        raise SpectralError(
            f"principal eigenvalue {lam.real} is not simple "
            f"(multiplicity {int(close.sum())})"
        )

    def positive_real(vec: np.ndarray, name: str) -> np.ndarray:
        v = vec.real if abs(vec.imag).max() < 1e-9 else None
        if v is None:
            raise SpectralError(f"{name} eigenvector has a nonreal component")
        if v.sum() < 0:
            v = -v
        if not np.all(v > 0):
            raise SpectralError(
                f"{name} eigenvector is not strictly positive; "
                f"the generator may be reducible"
            )
        return v

    right = positive_real(vr[:, i0] / np.abs(vr[:, i0]).max(), "right")
    left = positive_real(vl[:, i0] / np.abs(vl[:, i0]).max(), "left")
    if L.shape[0] == 1:
        gap = math.inf
    else:
        gap = float(lam.real - w.real[order[1]])
    return float(lam.real), right, left, gap


def fit_expansion_constant(
    model: SuperprocessModel,
    lambda0: float,
    phi0: np.ndarray,
    psi0: np.ndarray,
    gamma: float,
    t_grid=None,
) -> float:
    """Smallest constant making the kernel expansion bound hold on the grid.

    The bound compared is |q(t,x,y) e^{-lambda0 t} - phi0(x) psi0(y)| <=
    c e^{-gamma t} phi0(x) psi0(y), fitted as the max ratio over a log grid.
    The default grid is dense enough that oscillating second modes (complex
    eigenvalue pairs, period 2*pi/Im) cannot hide a peak between nodes.
    """
    if t_grid is None:
        t_grid = np.geomspace(1.0, 40.0, 1025)
    sg = MeanSemigroup(model)
    rank_one = np.outer(phi0, psi0)
    c = 0.0
    for t in np.asarray(t_grid, dtype=float):
        dev = np.abs(sg.density(t) * math.exp(-lambda0 * t) - rank_one)
        if not math.isfinite(gamma):
            # single state: the kernel equals the product exactly
            if dev.max() > 1e-10 * rank_one.max():
                raise SpectralError("one-state kernel deviates from its eigenproduct")
            continue
        ratio = dev / (math.exp(-gamma * t) * rank_one)
        c = max(c, float(ratio.max()))
    return c


def spectral_data(model: SuperprocessModel, fit_grid=None) -> SpectralData:
    """Principal eigenpair, spectral gap and fitted expansion constant."""
    validate_model(model)
    m = model.m
    L = generator_matrix(model)
    lambda0, right, left, gamma = _principal_pair(L)

    phi0 = right / math.sqrt(m_inner(right, right, m))
    # psi0 relates to the left eigenvector of L by an elementwise 1/m factor.
    psi0 = (left / m) / np.dot(phi0, left / m * m)

    sg = MeanSemigroup(model)
    grow = math.exp(lambda0)
    for name, vec, img in (
        ("phi0", phi0, sg.apply(1.0, phi0)),
        ("psi0", psi0, sg.dual_apply(1.0, psi0)),
    ):
        rel = np.abs(img - grow * vec) / (grow * vec)
        if rel.max() > TOL_EIG:
            raise SpectralError(
                f"eigen relation for {name} off by relative {rel.max():.3e}"
            )
    if abs(m_inner(phi0, phi0, m) - 1.0) > TOL_NORM:
        raise SpectralError("phi0 normalization drifted beyond tolerance")
    if abs(m_inner(phi0, psi0, m) - 1.0) > TOL_NORM:
        raise SpectralError("phi0/psi0 normalization drifted beyond tolerance")

    c_exp = fit_expansion_constant(model, lambda0, phi0, psi0, gamma, fit_grid)
    phi0.setflags(write=False)
    psi0.setflags(write=False)
    return SpectralData(
        lambda0=lambda0, phi0=phi0, psi0=psi0, gamma=gamma,
        c_expansion=c_exp, m=m,
    )


def criticalize(model: SuperprocessModel) -> SuperprocessModel:
    """Shift the linear coefficient so the principal eigenvalue vanishes."""
    sd = spectral_data(model)
    if abs(sd.lambda0) <= 1e-12:
        return model
    beta = model.branching.beta
    if np.any(beta == 0):
        idx = int(np.argmin(beta))
        raise ValueError(
            f"criticalize needs beta > 0 everywhere; beta[{idx}] = 0"
        )
    shifted = SuperprocessModel(
        space=model.space,
        motion=model.motion,
        branching=BranchingData(
            beta=beta,
            a=model.branching.a - sd.lambda0 / beta,
            b=model.branching.b,
            jumps=model.branching.jumps,
        ),
    )
    residual = spectral_data(shifted).lambda0
    if abs(residual) > 1e-12:
        raise SpectralError(
            f"criticalize left a residual principal eigenvalue {residual:.3e}"
        )
    return shifted


def require_critical(sd: SpectralData) -> None:
    if not sd.is_critical:
        raise NotCriticalError(
            f"model is not critical: lambda0 = {sd.lambda0:.6e}"
        )


def nu(model: SuperprocessModel, sd: SpectralData) -> float:
    """Mean of the exponential limit law: half the psi0-weighted variance
    factor against phi0 squared."""
    require_critical(sd)
    dc = derived_coefficients(model)
    val = 0.5 * float(np.dot(dc.avar * sd.phi0 * sd.phi0 * sd.psi0, sd.m))
    if not 0 < val < math.inf:
        raise SpectralError(f"nu must be positive and finite, got {val}")
    return val


def remove_principal_component(f: np.ndarray, sd: SpectralData) -> np.ndarray:
    """Project out the phi0 direction so the psi0-weight vanishes."""
    return f - sd.psi_weight(f) * sd.phi0


def _weighted_square_integral(
    model: SuperprocessModel,
    sd: SpectralData,
    f: np.ndarray,
    lower: float,
    rtol: float,
) -> float:
    """Integral over [lower, inf) of the psi0-weighted square of the
    evolved field, with an analytic exponential tail estimate.

    Assumes the psi0-weight of f vanishes, so the evolution can run
    through the principal-free propagator; that keeps relative precision
    when the evolved field has decayed far below the principal scale.
    """
    dc = derived_coefficients(model)
    sg = MeanSemigroup(model)
    gamma = sd.gamma
    f = f - m_inner(f, sd.psi0, sd.m) * sd.phi0

    def g(s: float) -> float:
        h = sg.fluct_apply(s, f)
        return float(np.dot(dc.avar * h * h * sd.psi0, sd.m))

    if not math.isfinite(gamma):
        # one state with zero psi0-weight forces f = 0
        return 0.0
    if gamma <= 0:
        raise SpectralError(f"spectral gap must be positive, got {gamma}")

    upper = lower + max(1.0, 8.0 / gamma)
    # extend until the analytic tail estimate g(T)/(2 gamma) is negligible
    for _ in range(200):
        probe = np.linspace(lower, upper, 9)
        rough = float(simpson([g(s) for s in probe], x=probe))
        tail = g(upper) / (2.0 * gamma)
        if tail <= max(rtol * max(abs(rough), 1e-300), 1e-300):
            break
        upper *= 2.0
    else:
        raise SpectralError("tail of the variance integral failed to decay")

    n = 64
    prev = None
    while n <= 2 ** 22:
        xs = np.linspace(lower, upper, n + 1)
        vals = np.fromiter((g(s) for s in xs), dtype=float, count=n + 1)
        cur = float(simpson(vals, x=xs))
        if prev is not None and abs(cur - prev) <= rtol * max(abs(cur), 1e-300):
            return cur + g(upper) / (2.0 * gamma)
        prev = cur
        n *= 2
    raise SpectralError("variance integral quadrature did not converge")


def fluctuation_variance(
    model: SuperprocessModel,
    sd: SpectralData,
    f,
    rtol: float = 1e-10,
) -> float:
    """Time integral of the psi0-weighted squared evolved field.

    Requires the psi0-weight of f to vanish; otherwise the integrand tends
    to a positive constant and the integral diverges.
    """
    f = as_field(model, f)
    require_critical(sd)
    weight = sd.psi_weight(f)
    if abs(weight) > 1e-9 * max(1.0, float(np.abs(f).max())):
        raise ValueError(
            f"psi0-weight of f must vanish (got {weight:.3e}); "
            f"project it out first"
        )
    if not np.any(f != 0):
        return 0.0
    return _weighted_square_integral(model, sd, f, 0.0, rtol)
