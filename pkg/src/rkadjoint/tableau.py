"""Runge-Kutta and partitioned Runge-Kutta coefficient sets.

Besides the containers this module carries the tableau algebra used by the
rest of the package: symplecticness defects, low order residuals, reflection,
transposition and the adjoint partner obtained by composing the two.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import sqrt
from pathlib import Path
from typing import Sequence

import numpy as np

from rkadjoint.errors import UnknownTableau, ZeroWeight

SYMPLECTIC_TOL = 1e-14


def _frozen(x, shape) -> np.ndarray:
    arr = np.array(x, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RkTableau:
    """Coefficients (a, b, c) of an s-stage Runge-Kutta method.

    Stage order is kept exactly as given; no sorting by abscissa is done.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).ravel()
        s = b.size
        if s == 0:
            raise ValueError("a tableau needs at least one stage")
        a = np.asarray(self.a, dtype=float)
        c = np.asarray(self.c, dtype=float).ravel()
        if a.shape != (s, s) or c.shape != (s,):
            raise ValueError(
                f"inconsistent tableau dimensions: a{a.shape}, b({s},), c{c.shape}"
            )
        object.__setattr__(self, "a", _frozen(a, (s, s)))
        object.__setattr__(self, "b", _frozen(b, (s,)))
        object.__setattr__(self, "c", _frozen(c, (s,)))

    @property
    def s(self) -> int:
        return self.b.size

    @property
    def explicit(self) -> bool:
        """True iff ``a`` is strictly lower triangular in the stored order."""
        return not np.any(np.triu(self.a) != 0.0)

    def explicit_order(self) -> list[int] | None:
        """Stage evaluation order making the method explicit, if one exists.

        Returns a permutation when the dependency graph ``i -> j for a[i, j] != 0``
        is acyclic (e.g. Runge's 1895 scheme, stored with ``a[0, 1] != 0``),
        otherwise ``None``.
        """
        s = self.s
        deps = [set(np.flatnonzero(self.a[i])) for i in range(s)]
        order: list[int] = []
        done: set[int] = set()
        while len(order) < s:
            ready = [i for i in range(s) if i not in done and deps[i] <= done]
            if not ready:
                return None
            for i in ready:
                order.append(i)
                done.add(i)
        return order

    def nonzero_weights(self) -> bool:
        return bool(np.all(self.b != 0.0))

    def require_nonzero_weights(self) -> None:
        zero = np.flatnonzero(self.b == 0.0)
        if zero.size:
            raise ZeroWeight(int(zero[0]))

    def allclose(self, other: "RkTableau", atol: float = 1e-15) -> bool:
        return (
            self.s == other.s
            and np.allclose(self.a, other.a, rtol=0, atol=atol)
            and np.allclose(self.b, other.b, rtol=0, atol=atol)
            and np.allclose(self.c, other.c, rtol=0, atol=atol)
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "s": self.s,
            "a": self.a.ravel().tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RkTableau":
        s = int(d["s"])
        return cls(
            np.reshape(d["a"], (s, s)), d["b"], d["c"], name=d.get("name", "custom")
        )

    def __repr__(self):
        return f"RkTableau(name={self.name!r}, s={self.s})"


@dataclass(frozen=True, eq=False)
class PrkTableau:
    """A pair of tableaus: ``lower`` advances q, ``upper`` advances p."""

    lower: RkTableau
    upper: RkTableau
    name: str = ""

    def __post_init__(self):
        if self.lower.s != self.upper.s:
            raise ValueError("lower and upper tableaus must have the same stage count")
        if not self.name:
            object.__setattr__(self, "name", f"{self.lower.name}/{self.upper.name}")

    @property
    def s(self) -> int:
        return self.lower.s

    @classmethod
    def diagonal(cls, tab: RkTableau) -> "PrkTableau":
        """Use ``tab`` for both blocks."""
        return cls(tab, tab, name=tab.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "lower": self.lower.to_dict(), "upper": self.upper.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PrkTableau":
        return cls(
            RkTableau.from_dict(d["lower"]),
            RkTableau.from_dict(d["upper"]),
            name=d.get("name", ""),
        )

    def __repr__(self):
        return f"PrkTableau(name={self.name!r}, s={self.s})"


@dataclass(frozen=True)
class SymplecticnessReport:
    defect_matrix: np.ndarray
    weight_defect: np.ndarray
    abscissa_defect: np.ndarray
    tol: float = SYMPLECTIC_TOL
    max_defect: float = field(init=False)

    def __post_init__(self):
        m = max(
            float(np.max(np.abs(arr), initial=0.0))
            for arr in (self.defect_matrix, self.weight_defect, self.abscissa_defect)
        )
        object.__setattr__(self, "max_defect", m)

    @property
    def symplectic(self) -> bool:
        return self.max_defect <= self.tol

    @property
    def symplectic_autonomous(self) -> bool:
        """Symplectic when abscissas play no role (f, g independent of t)."""
        m = max(
            float(np.max(np.abs(self.defect_matrix), initial=0.0)),
            float(np.max(np.abs(self.weight_defect), initial=0.0)),
        )
        return m <= self.tol


def symplectic_defect_rk(tab: RkTableau, tol: float = SYMPLECTIC_TOL) -> SymplecticnessReport:
    """Defects ``b_i a_ij + b_j a_ji - b_i b_j`` of the RK symplecticness conditions."""
    b, a = tab.b, tab.a
    ba = b[:, None] * a
    defect = ba + ba.T - np.outer(b, b)
    z = np.zeros(tab.s)
    return SymplecticnessReport(defect, z, z.copy(), tol=tol)


def symplectic_defect_prk(ptab: PrkTableau, tol: float = SYMPLECTIC_TOL) -> SymplecticnessReport:
    lo, up = ptab.lower, ptab.upper
    b, a, c = lo.b, lo.a, lo.c
    B, A, C = up.b, up.a, up.c
    # b_i A_ij + B_j a_ji - b_i B_j
    defect = b[:, None] * A + (B[:, None] * a).T - np.outer(b, B)
    return SymplecticnessReport(defect, b - B, c - C, tol=tol)


def reflect(tab: RkTableau) -> RkTableau:
    a = tab.b[None, :] - tab.a
    return RkTableau(a, tab.b, 1.0 - tab.c, name=f"reflect({tab.name})")


def transpose(tab: RkTableau) -> RkTableau:
    tab.require_nonzero_weights()
    b = tab.b
    a = tab.a.T * b[None, :] / b[:, None]
    return RkTableau(a, b, 1.0 - tab.c, name=f"transpose({tab.name})")


def adjoint_partner(tab: RkTableau) -> PrkTableau:
    """Pair ``tab`` with the costate coefficients that make the PRK symplectic.

    ``A_ji = b_i - b_i a_ij / b_j``, ``B = b``, ``C = c``; this is the reflection
    of the transposition with abscissas left at ``c``.
    """
    tab.require_nonzero_weights()
    b = tab.b
    upper_a = b[None, :] - tab.a.T * b[None, :] / b[:, None]
    upper = RkTableau(upper_a, b, tab.c, name=f"partner({tab.name})")
    return PrkTableau(tab, upper)


def order_residuals_rk(tab: RkTableau) -> list[tuple[str, float]]:
    """Residuals of the order conditions up to order 3, then row-sum consistency."""
    a, b, c = tab.a, tab.b, tab.c
    ac = a.sum(axis=1)
    out = [
        ("b", float(b.sum() - 1.0)),
        ("ba", float(b @ ac - 0.5)),
        ("baa", float(b @ (a @ ac) - 1.0 / 6.0)),
        ("bcc", float(b @ (ac * ac) - 1.0 / 3.0)),
    ]
    out += [(f"c{i + 1}", float(c[i] - ac[i])) for i in range(tab.s)]
    return out


def order_residuals_prk(ptab: PrkTableau) -> list[tuple[str, float]]:
    lo, up = ptab.lower, ptab.upper
    b, a, B, A = lo.b, lo.a, up.b, up.a
    return [
        ("b", float(b.sum() - 1.0)),
        ("B", float(B.sum() - 1.0)),
        ("ba", float(b @ a.sum(axis=1) - 0.5)),
        ("bA", float(b @ A.sum(axis=1) - 0.5)),
        ("Ba", float(B @ a.sum(axis=1) - 0.5)),
        ("BA", float(B @ A.sum(axis=1) - 0.5)),
    ]


def random_symplectic(b: Sequence[float], rng: np.random.Generator, scale: float = 1.0) -> RkTableau:
    """Symplectic tableau with weights ``b`` and a random strict lower triangle.

    The defect equations are linear in ``a`` once ``b`` is fixed: the diagonal is
    ``b_i / 2`` and the upper triangle follows from the lower one.
    """
    b = np.asarray(b, dtype=float)
    if np.any(b == 0.0):
        raise ZeroWeight(int(np.flatnonzero(b == 0.0)[0]))
    s = b.size
    a = np.zeros((s, s))
    lower = np.tril_indices(s, -1)
    a[lower] = scale * rng.standard_normal(len(lower[0]))
    a[np.diag_indices(s)] = b / 2.0
    for i, j in zip(*lower):
        a[j, i] = b[i] - b[i] * a[i, j] / b[j]
    return RkTableau(a, b, a.sum(axis=1), name="random-symplectic")


# -- catalog -----------------------------------------------------------------

_R3 = sqrt(3.0)


def _catalog() -> dict:
    euler = RkTableau([[0.0]], [1.0], [0.0], name="euler")
    # Lobatto IIIA for q and IIIB for p reproduce velocity Verlet.
    verlet = PrkTableau(
        RkTableau([[0.0, 0.0], [0.5, 0.5]], [0.5, 0.5], [0.0, 1.0], name="lobatto3a2"),
        RkTableau([[0.5, 0.0], [0.5, 0.0]], [0.5, 0.5], [0.0, 1.0], name="lobatto3b2"),
        name="verlet",
    )
    return {
        "euler": euler,
        "implicit-euler": RkTableau([[1.0]], [1.0], [1.0], name="implicit-euler"),
        "midpoint": RkTableau([[0.5]], [1.0], [0.5], name="midpoint"),
        # c = 1/2 -+ sqrt(3)/6, a from the collocation conditions
        "gauss2": RkTableau(
            [[0.25, 0.25 - _R3 / 6.0], [0.25 + _R3 / 6.0, 0.25]],
            [0.5, 0.5],
            [0.5 - _R3 / 6.0, 0.5 + _R3 / 6.0],
            name="gauss2",
        ),
        "radau1a": RkTableau([[1.0]], [1.0], [0.0], name="radau1a"),
        "rk4": RkTableau(
            [[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1.0, 0]],
            [1 / 6, 1 / 3, 1 / 3, 1 / 6],
            [0, 0.5, 0.5, 1.0],
            name="rk4",
        ),
        # stored with the zero weight last, as in Runge's original ordering
        "runge1895": RkTableau([[0.0, 0.5], [0.0, 0.0]], [1.0, 0.0], [0.5, 0.0], name="runge1895"),
        "verlet": verlet,
        "euler-radau": adjoint_partner(euler),
    }


CATALOG = _catalog()


def builtin(name: str) -> RkTableau | PrkTableau:
    try:
        return CATALOG[name]
    except KeyError:
        raise UnknownTableau(
            f"unknown tableau {name!r}; available: {', '.join(sorted(CATALOG))}"
        ) from None


def from_json(text: str) -> RkTableau | PrkTableau:
    d = json.loads(text)
    if "lower" in d:
        return PrkTableau.from_dict(d)
    return RkTableau.from_dict(d)


def to_json(tab: RkTableau | PrkTableau) -> str:
    return json.dumps(tab.to_dict(), indent=2)


def load(spec: str) -> RkTableau | PrkTableau:
    """Resolve a catalog name or a path to a JSON tableau file."""
    if spec in CATALOG:
        return CATALOG[spec]
    path = Path(spec)
    if path.is_file():
        return from_json(path.read_text())
    return builtin(spec)
