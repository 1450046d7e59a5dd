"""System models: the cascade ladder, the driven interference model, custom.

Level kets are 1-based in formulas (|1> .. |N>) and 0-based as array
indices.  The lab-frame Hamiltonian is

    H(t) = H0 + sum_j (Omega_j exp(-i mu_j t) A_j + h.c.)

with a static coupling operator L; a rotating frame is deliberately not
used because it would make L time dependent.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .operator_core import (
    MAX_LEVELS,
    OperatorBasis,
    dagger,
    detect_subspaces,
    is_hermitian,
    nilpotency_index,
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Drive:
    """One rotating drive term Omega * exp(-i mu t) * A + h.c."""

    operator: np.ndarray
    amplitude: float
    frequency: float

    def __post_init__(self):
        object.__setattr__(
            self, "operator", np.asarray(self.operator, dtype=complex)
        )


@dataclass(frozen=True)
class SystemModel:
    dim: int
    h0: np.ndarray
    drives: tuple
    lindblad: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        h0 = np.asarray(self.h0, dtype=complex)
        L = np.asarray(self.lindblad, dtype=complex)
        if self.dim < 2 or self.dim > MAX_LEVELS:
            raise ModelError(f"level count must be in [2, {MAX_LEVELS}]")
        if h0.shape != (self.dim, self.dim) or L.shape != (self.dim, self.dim):
            raise ModelError("H0 and L must be dim x dim")
        object.__setattr__(self, "h0", h0)
        object.__setattr__(self, "lindblad", L)
        object.__setattr__(self, "drives", tuple(self.drives))
        if not self.labels:
            object.__setattr__(
                self, "labels", tuple(str(m) for m in range(1, self.dim + 1))
            )

    def validate(self):
        """Raise ModelError on a model the hierarchy cannot handle."""
        if not is_hermitian(self.h0):
            raise ModelError("H0 is not hermitian")
        p = nilpotency_index(self.lindblad)
        if p is None or p > self.dim:
            raise ModelError(
                "coupling operator is not nilpotent with L^N = 0; "
                "the truncated hierarchy does not close for this model"
            )

    @property
    def truncation_order(self):
        return int(np.clip(self.dim - 2, 0, 2))

    def hamiltonian(self, t):
        """H(t), hermitian by construction."""
        h = self.h0.copy()
        for d in self.drives:
            term = d.amplitude * np.exp(-1j * d.frequency * t) * d.operator
            h += term + dagger(term)
        return h

    def hamiltonian_terms(self):
        """Matrices generating H(t): H0 plus A_j, A_j^dag per drive."""
        out = [self.h0]
        for d in self.drives:
            out.append(d.operator)
            out.append(dagger(d.operator))
        return out

    def subspaces(self, cap=None):
        """Detected invariant operator subspaces (S0, S1, S2)."""
        return detect_subspaces(self.lindblad, self.hamiltonian_terms(), cap=cap)


def hamiltonian_at(model, t):
    return model.hamiltonian(t)


def detect_invariant_subspace(model, order, cap=None):
    """OperatorBasis for hierarchy order 0, 1 or 2."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    return model.subspaces(cap=cap)[order]


def _ket_bra(dim, i, j):
    m = np.zeros((dim, dim), dtype=complex)
    m[i, j] = 1.0
    return m


def build_cascade(omega, kappa):
    """Four-level ladder: diagonal H0, L = sum_m kappa_m |m><m+1|."""
    omega = [float(w) for w in omega]
    kappa = [float(k) for k in kappa]
    if len(omega) != 4 or len(kappa) != 3:
        raise ModelError("cascade needs 4 level energies and 3 channel strengths")
    h0 = np.diag(np.asarray(omega, dtype=complex))
    L = sum(kappa[m] * _ket_bra(4, m, m + 1) for m in range(3))
    return SystemModel(dim=4, h0=h0, drives=(), lindblad=L)


@dataclass(frozen=True)
class InterferenceConvention:
    """Absolute level energies for the driven model.

    The paper fixes only omega4 - omega3 = 1 (units omega = 1); the
    remaining freedom is parametrized as omega3 = omega2 + mu + delta3,
    omega4 = omega3 + 1.  The default delta3 = -1 makes the 2 -> 4 drive
    resonant at mu = 2.
    """

    omega1: float = 0.0
    omega2: float = 0.0
    delta3: float = -1.0

    def energies(self, mu):
        w3 = self.omega2 + mu + self.delta3
        return (self.omega1, self.omega2, w3, w3 + 1.0)


def build_interference(rabi1, rabi2, mu, kappa, convention=None):
    """Driven four-level model: |2> coupled up to |3>, |4>; decay to |1>.

    L = kappa |1><3| + |1><4|; drives (|4><2|, rabi1, mu), (|3><2|, rabi2, mu).
    The ratio rabi2/rabi1 therefore steers population between the weak and
    strong decay channels; the state kappa|4> - |3> is dark under L.
    """
    if convention is None:
        convention = InterferenceConvention()
    energies = convention.energies(mu)
    h0 = np.diag(np.asarray(energies, dtype=complex))
    L = float(kappa) * _ket_bra(4, 0, 2) + _ket_bra(4, 0, 3)
    drives = (
        Drive(_ket_bra(4, 3, 1), float(rabi1), float(mu)),
        Drive(_ket_bra(4, 2, 1), float(rabi2), float(mu)),
    )
    return SystemModel(dim=4, h0=h0, drives=drives, lindblad=L)


@dataclass
class ForbiddenReport:
    """Max entry of S_j * S_k products for every pair with j + k > N - 2."""

    passed: bool
    max_products: dict
    tolerance: float

    def __str__(self):
        lines = ["forbidden-condition check: " + ("PASS" if self.passed else "FAIL")]
        for (j, k), v in sorted(self.max_products.items()):
            mark = "ok" if v < self.tolerance else "VIOLATED"
            lines.append(f"  S{j} * S{k}: max |entry| = {v:.3e}  [{mark}]")
        return "\n".join(lines)


def verify_forbidden(model, tol=1e-10, cap=None):
    """Numerical witness of the closure relations O_j O_k = 0, j + k > N - 2.

    Products are taken over all pairs of detected subspace basis elements;
    empty subspaces contribute a zero maximum.
    """
    bases = model.subspaces(cap=cap)
    cutoff = model.dim - 2
    max_products = {}
    passed = True
    for j in range(3):
        for k in range(3):
            if j + k <= cutoff:
                continue
            worst = 0.0
            for a in bases[j].elements:
                for b in bases[k].elements:
                    worst = max(worst, float(np.max(np.abs(a @ b), initial=0.0)))
            max_products[(j, k)] = worst
            passed &= worst < tol
    return ForbiddenReport(passed=passed, max_products=max_products, tolerance=tol)
