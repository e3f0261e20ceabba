"""Finite-state superprocess models.

A model bundles three ingredients: a finite state space with strictly
positive reference weights, a spatial transition-rate generator (killing
encoded as row-sum deficit), and branching data consisting of a rate
``beta``, a linear coefficient ``a``, a quadratic (diffusion) coefficient
``b`` and a per-state list of jump atoms representing a finite jump kernel.

Model files are JSON objects with keys ``states``, ``m``, ``Q``, ``beta``,
``a``, ``b``, ``jumps``.  ``jumps`` holds one array per state whose entries
are ``{"y": size, "w": weight}`` objects.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

# Roundoff slack for the time-dependent dual sub-Markov check.
TOL_DUAL = 1e-10

MODEL_KEYS = ("states", "m", "Q", "beta", "a", "b", "jumps")


class ModelError(ValueError):
    """A model definition violates a structural constraint."""


class ParseError(ModelError):
    """Model text is not valid JSON or not the expected shape."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Finite set of states and strictly positive reference weights."""

    labels: tuple[str, ...]
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        object.__setattr__(self, "m", _freeze(self.m))
        if self.m.ndim != 1 or len(self.labels) != self.m.size or self.m.size < 1:
            raise ModelError(
                f"states and m must be equal-length and nonempty, got "
                f"{len(self.labels)} labels and m of shape {self.m.shape}"
            )
        if len(set(self.labels)) != len(self.labels):
            raise ModelError("state labels must be pairwise distinct")
        for i, v in enumerate(self.m):
            if not v > 0:
                raise ModelError(f"m[{i}] must be > 0, got {v}")

    @property
    def n(self) -> int:
        return self.m.size


@dataclass(frozen=True, eq=False)
class SpatialGenerator:
    """Transition-rate matrix; nonnegative off-diagonal, row sums <= 0."""

    Q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", _freeze(self.Q))
        Q = self.Q
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ModelError(f"Q must be square, got shape {Q.shape}")
        n = Q.shape[0]
        scale = max(1.0, float(np.abs(Q).max(initial=0.0)))
        for i in range(n):
            for j in range(n):
                if i != j and Q[i, j] < 0:
                    raise ModelError(f"Q[{i}][{j}] must be >= 0, got {Q[i, j]}")
            row = float(Q[i].sum())
            if row > 1e-12 * scale:
                raise ModelError(f"row sum of Q[{i}] must be <= 0, got {row}")


@dataclass(frozen=True, eq=False)
class BranchingData:
    """Per-state branching rate, mechanism coefficients and jump atoms.

    ``jumps[i]`` is an (k_i, 2) array of (size, weight) atoms, both > 0.
    """

    beta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    jumps: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "beta", _freeze(self.beta))
        object.__setattr__(self, "a", _freeze(self.a))
        object.__setattr__(self, "b", _freeze(self.b))
        norm = []
        for i, atoms in enumerate(self.jumps):
            arr = np.array(atoms, dtype=float).reshape(-1, 2)
            for k in range(arr.shape[0]):
                if not arr[k, 0] > 0:
                    raise ModelError(f"jumps[{i}][{k}].y must be > 0, got {arr[k, 0]}")
                if not arr[k, 1] > 0:
                    raise ModelError(f"jumps[{i}][{k}].w must be > 0, got {arr[k, 1]}")
            arr.setflags(write=False)
            norm.append(arr)
        object.__setattr__(self, "jumps", tuple(norm))
        n = self.beta.size
        if not (self.a.size == n and self.b.size == n and len(self.jumps) == n):
            raise ModelError(
                f"branching arrays must share one length, got beta:{n} "
                f"a:{self.a.size} b:{self.b.size} jumps:{len(self.jumps)}"
            )
        for i, v in enumerate(self.beta):
            if v < 0:
                raise ModelError(f"beta[{i}] must be >= 0, got {v}")
        for i, v in enumerate(self.b):
            if v < 0:
                raise ModelError(f"b[{i}] must be >= 0, got {v}")

    def jump_second_moment(self) -> np.ndarray:
        """Per-state sum of y^2 * w over the jump atoms."""
        return np.array([(a[:, 0] ** 2 * a[:, 1]).sum() for a in self.jumps])

    def jump_total_weight(self) -> np.ndarray:
        return np.array([a[:, 1].sum() for a in self.jumps])


@dataclass(frozen=True, eq=False)
class SuperprocessModel:
    """Immutable model; safe to share read-only across threads."""

    space: StateSpace
    motion: SpatialGenerator
    branching: BranchingData

    def __post_init__(self):
        n = self.space.n
        if self.motion.Q.shape[0] != n:
            raise ModelError(
                f"Q has {self.motion.Q.shape[0]} states but the space has {n}"
            )
        if self.branching.beta.size != n:
            raise ModelError(
                f"branching data has {self.branching.beta.size} states "
                f"but the space has {n}"
            )
        # Degenerate branching (no diffusion and no jumps anywhere beta > 0)
        # makes the process deterministic in law; excluded.
        activity = self.branching.beta * (
            self.branching.b + self.branching.jump_total_weight()
        )
        if not np.any(activity > 0):
            raise ModelError(
                "beta*(b + total jump weight) vanishes at every state; "
                "the branching mechanism must be non-degenerate somewhere"
            )

    @property
    def n_states(self) -> int:
        return self.space.n

    @property
    def labels(self) -> tuple[str, ...]:
        return self.space.labels

    @property
    def m(self) -> np.ndarray:
        return self.space.m

    @property
    def Q(self) -> np.ndarray:
        return self.motion.Q


@dataclass(frozen=True)
class DerivedCoefficients:
    """Drift weight, local variance factor and their uniform bound.

    ``alpha = beta*a`` drives the mean semigroup; ``avar`` is the local
    branching variance factor beta*(2b + sum y^2 w); ``kbound`` equals
    max(|alpha| + avar) over states.
    """

    alpha: np.ndarray
    avar: np.ndarray
    kbound: float


def derived_coefficients(model: SuperprocessModel) -> DerivedCoefficients:
    br = model.branching
    alpha = br.beta * br.a
    avar = br.beta * (2.0 * br.b + br.jump_second_moment())
    kbound = float(np.max(np.abs(alpha) + avar))
    return DerivedCoefficients(_freeze(alpha), _freeze(avar), kbound)


def is_irreducible(model: SuperprocessModel) -> bool:
    """Strong connectivity of the directed graph of positive rates."""
    n = model.n_states
    if n == 1:
        return True
    adj = (model.Q > 0).astype(int)
    np.fill_diagonal(adj, 0)
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    return n_comp == 1


def validate_model(model: SuperprocessModel) -> SuperprocessModel:
    """Full validation, including the irreducibility requirement.

    Structural checks already ran at construction; irreducibility is kept
    separate so diagnostic checks can still run on reducible generators.
    """
    if not is_irreducible(model):
        raise ModelError(
            "Q is reducible (the directed graph of positive off-diagonal "
            "rates is not strongly connected)"
        )
    return model


# ---------------------------------------------------------------------------
# field / measure vectors

def as_field(model: SuperprocessModel, values) -> np.ndarray:
    """Coerce to a function-on-states vector of the right length."""
    f = np.asarray(values, dtype=float)
    if f.shape != (model.n_states,):
        raise ModelError(
            f"field vector must have shape ({model.n_states},), got {f.shape}"
        )
    return f


def as_measure(model: SuperprocessModel, values, allow_zero: bool = False) -> np.ndarray:
    """Coerce to a finite-measure vector: nonnegative, nonzero by default."""
    mu = as_field(model, values)
    for i, v in enumerate(mu):
        if v < 0:
            raise ModelError(f"measure entry mu[{i}] must be >= 0, got {v}")
    if not allow_zero and not np.any(mu > 0):
        raise ModelError("measure must have positive total mass")
    return mu


def pairing(f: np.ndarray, mu: np.ndarray) -> float:
    """Integral of f against the measure mu."""
    return float(np.dot(f, mu))


def m_inner(f: np.ndarray, g: np.ndarray, m: np.ndarray) -> float:
    """Weighted inner product sum_x f(x) g(x) m(x)."""
    return float(np.dot(f * g, m))


# ---------------------------------------------------------------------------
# serialization

def load_model(text: str) -> SuperprocessModel:
    """Parse and fully validate a JSON model description."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"model text is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"model must be a JSON object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(MODEL_KEYS))
    if unknown:
        raise ParseError(f"unknown model keys: {', '.join(unknown)}")
    missing = [k for k in MODEL_KEYS if k not in raw]
    if missing:
        raise ParseError(f"missing model keys: {', '.join(missing)}")

    jumps = []
    for i, atoms in enumerate(raw["jumps"]):
        state_atoms = []
        for k, atom in enumerate(atoms):
            if not isinstance(atom, dict) or set(atom) != {"y", "w"}:
                raise ParseError(
                    f"jumps[{i}][{k}] must be an object with exactly "
                    f"the keys y and w"
                )
            state_atoms.append((atom["y"], atom["w"]))
        jumps.append(np.array(state_atoms, dtype=float).reshape(-1, 2))

    model = SuperprocessModel(
        space=StateSpace(labels=tuple(raw["states"]), m=np.asarray(raw["m"])),
        motion=SpatialGenerator(Q=np.asarray(raw["Q"])),
        branching=BranchingData(
            beta=np.asarray(raw["beta"]),
            a=np.asarray(raw["a"]),
            b=np.asarray(raw["b"]),
            jumps=tuple(jumps),
        ),
    )
    return validate_model(model)


def load_model_file(path) -> SuperprocessModel:
    with open(path, "r", encoding="utf-8") as fh:
        return load_model(fh.read())


def dump_model(model: SuperprocessModel) -> str:
    """Serialize back to the JSON schema accepted by ``load_model``."""
    doc = {
        "states": list(model.labels),
        "m": model.m.tolist(),
        "Q": model.Q.tolist(),
        "beta": model.branching.beta.tolist(),
        "a": model.branching.a.tolist(),
        "b": model.branching.b.tolist(),
        "jumps": [
            [{"y": float(y), "w": float(w)} for y, w in atoms]
            for atoms in model.branching.jumps
        ],
    }
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# standing-assumption checks

@dataclass(frozen=True)
class DualMarkovReport:
    """Outcome of the dual sub-Markov check with the worst violation seen."""

    ok: bool
    static_ok: bool
    worst_excess: float
    worst_t: float
    worst_state: int

    def __bool__(self) -> bool:
        return self.ok


def dual_submarkov_static(model: SuperprocessModel) -> bool:
    """Column sums of diag(m) Q <= 0; implies the bound at every time."""
    col = model.m @ model.Q
    scale = max(1.0, float(np.abs(model.Q).max()), float(model.m.max()))
    return bool(np.all(col <= 1e-12 * scale))


def check_dual_submarkov(model: SuperprocessModel, t_grid) -> DualMarkovReport:
    """Check sum_x m(x) p(t,x,y) <= 1 at each grid time and state y."""
    ts = np.asarray(t_grid, dtype=float)
    if ts.size == 0 or np.any(ts <= 0):
        raise ModelError("t_grid must be nonempty with strictly positive entries")
    static_ok = dual_submarkov_static(model)
    worst = (-math.inf, math.nan, -1)
    for t in ts:
        # p(t,x,y) = exp(tQ)[x,y] / m(y); the mass integral cancels m(y).
        col = model.m @ expm(t * model.Q) / model.m
        y = int(np.argmax(col))
        excess = float(col[y] - 1.0)
        if excess > worst[0]:
            worst = (excess, float(t), y)
    ok = worst[0] <= TOL_DUAL
    return DualMarkovReport(
        ok=ok,
        static_ok=static_ok,
        worst_excess=worst[0],
        worst_t=worst[1],
        worst_state=worst[2],
    )


@dataclass(frozen=True)
class GreyReport:
    """Sufficient finite-time-extinction certificate.

    When ``b_tilde = min beta*b > 0`` the mechanism dominates the spatially
    homogeneous one ``-kbound*z + b_tilde*z^2``, whose tail integral of the
    reciprocal converges, so extinction occurs in finite time with positive
    probability from every state.
    """

    satisfied: bool
    b_tilde: float
    kbound: float

    def dominating_mechanism(self, z: float) -> float:
        return -self.kbound * z + self.b_tilde * z * z

    def __bool__(self) -> bool:
        return self.satisfied


def check_grey_domination(model: SuperprocessModel) -> GreyReport:
    b_tilde = float(np.min(model.branching.beta * model.branching.b))
    dc = derived_coefficients(model)
    return GreyReport(satisfied=b_tilde > 0, b_tilde=b_tilde, kbound=dc.kbound)
