"""Dense complex operator algebra: bases, projections, invariant subspaces.

Everything here works on plain ``numpy`` complex arrays of shape (N, N) with
N small (the built-in models have N = 4; a hard cap of 16 is enforced by the
model layer).  Operator subspaces are represented by stacks of trace-
orthonormal matrices; hierarchy coefficients live in these subspaces.
"""
from __future__ import annotations

import numpy as np

MAX_LEVELS = 16

ORTHO_TOL = 1e-10
ROUNDTRIP_TOL = 1e-10


class SubspaceEscapeError(RuntimeError):
    """An operator left the span of its detected subspace.

    This signals a closure bug in subspace detection, not a user error.
    """


def dagger(a):
    return a.conj().T


def comm(a, b):
    return a @ b - b @ a


def frob(a):
    return float(np.linalg.norm(a))


def is_hermitian(a, tol=1e-10):
    return bool(np.max(np.abs(a - dagger(a)), initial=0.0) <= tol)


def is_zero(a, tol=1e-12):
    return bool(np.max(np.abs(a), initial=0.0) <= tol)


def nilpotency_index(L, tol=1e-12):
    """Smallest p with ``L^p == 0`` entrywise below `tol`, or None.

    Only powers up to the matrix dimension are tried: if L^dim is nonzero
    no higher power can vanish either (Cayley-Hamilton).
    """
    L = np.asarray(L, dtype=complex)
    n = L.shape[0]
    if L.shape != (n, n):
        raise ValueError("L must be square")
    p = np.eye(n, dtype=complex)
    for k in range(1, n + 1):
        p = p @ L
        if np.max(np.abs(p)) <= tol:
            return k
    return None


class OperatorBasis:
    """Ordered trace-orthonormal set of N x N matrices spanning a subspace.

    Orthonormality is with respect to the Hilbert-Schmidt inner product
    ``<A, B> = Tr(A^dag B)``.
    """

    def __init__(self, elements, dim):
        elements = np.asarray(elements, dtype=complex)
        if elements.size == 0:
            elements = np.zeros((0, dim, dim), dtype=complex)
        if elements.ndim != 3 or elements.shape[1:] != (dim, dim):
            raise ValueError("elements must have shape (k, dim, dim)")
        self.elements = elements
        self.dim = dim
        gram = np.einsum("aij,bij->ab", elements.conj(), elements)
        if not np.allclose(gram, np.eye(len(elements)), atol=1e-12):
            raise ValueError("basis is not trace-orthonormal to 1e-12")

    def __len__(self):
        return len(self.elements)

    @property
    def dim_subspace(self):
        return len(self.elements)

    def project(self, x, check=True, rtol=1e-8, atol=1e-10):
        """Coefficients of `x` in this basis; raises if `x` leaves the span."""
        x = np.asarray(x, dtype=complex)
        coeffs = np.einsum("aij,ij->a", self.elements.conj(), x)
        if check:
            residual = frob(x - self.reconstruct(coeffs))
            if residual > max(atol, rtol * frob(x)):
                raise SubspaceEscapeError(
                    f"projection residual {residual:.3e} exceeds tolerance "
                    f"(subspace dim {len(self)}, matrix norm {frob(x):.3e})"
                )
        return coeffs

    def reconstruct(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=complex)
        if len(self) == 0:
            return np.zeros((self.dim, self.dim), dtype=complex)
        return np.tensordot(coeffs, self.elements, axes=([-1], [0]))


def full_basis(dim):
    """The N^2-dimensional matrix-unit basis (always a valid fallback)."""
    eye = np.eye(dim * dim, dtype=complex)
    return OperatorBasis(eye.reshape(dim * dim, dim, dim), dim)


class _GrowingSpan:
    """Incremental Gram-Schmidt span of matrices (trace inner product)."""

    def __init__(self, dim, tol=ORTHO_TOL):
        self.dim = dim
        self.tol = tol
        self.vecs = []  # flattened orthonormal matrices

    def add(self, x):
        """Orthonormalize `x` against the span; returns True if it grew."""
        v = np.asarray(x, dtype=complex).ravel().copy()
        scale = np.linalg.norm(v)
        if scale <= self.tol:
            return False
        for u in self.vecs:
            v -= np.vdot(u, v) * u
        # second pass for numerical robustness
        for u in self.vecs:
            v -= np.vdot(u, v) * u
        nrm = np.linalg.norm(v)
        if nrm <= self.tol * max(1.0, scale):
            return False
        self.vecs.append(v / nrm)
        return True

    def matrices(self):
        return [v.reshape(self.dim, self.dim) for v in self.vecs]

    def __len__(self):
        return len(self.vecs)


def detect_subspaces(L, h_terms, cap=None):
    """Smallest operator subspaces (S0, S1, S2) closed under the hierarchy maps.

    S0 contains L; S1 contains [L, S0]; S2 contains [L, S1].  Each space is
    closed under X -> [H_k, X] for every Hamiltonian term H_k, under
    X -> [L^dag Y, X] for Y in whichever spans feed that equation, and under
    the lowering sources X -> L^dag X from the next space up.  Closure is
    found by numerical rank growth; if any space would exceed `cap` the full
    matrix-unit basis is returned for all three.

    Returns a tuple of three OperatorBasis objects.
    """
    L = np.asarray(L, dtype=complex)
    dim = L.shape[0]
    if cap is None:
        cap = dim * dim
    Ld = dagger(L)
    h_terms = [np.asarray(h, dtype=complex) for h in h_terms]

    s0 = _GrowingSpan(dim)
    s1 = _GrowingSpan(dim)
    s2 = _GrowingSpan(dim)
    s0.add(L)

    def overflow():
        return len(s0) > cap or len(s1) > cap or len(s2) > cap

    changed = True
    while changed:
        changed = False
        m0, m1, m2 = s0.matrices(), s1.matrices(), s2.matrices()
        # S0: [H, S0], [L^dag S0, S0], L^dag S1
        for x in m0:
            for h in h_terms:
                changed |= s0.add(comm(h, x))
            for y in m0:
                changed |= s0.add(comm(Ld @ y, x))
        for c in m1:
            changed |= s0.add(Ld @ c)
        # S1: [L, S0], [H, S1], [L^dag S0, S1], [L^dag S1, S0], L^dag S2
        for x in m0:
            changed |= s1.add(comm(L, x))
        for c in m1:
            for h in h_terms:
                changed |= s1.add(comm(h, c))
            for y in m0:
                changed |= s1.add(comm(Ld @ y, c))
                changed |= s1.add(comm(Ld @ c, y))
        for e in m2:
            changed |= s1.add(Ld @ e)
        # S2: [L, S1], [H, S2], [L^dag S0, S2], [L^dag S1, S1], [L^dag S2, S0]
        for c in m1:
            changed |= s2.add(comm(L, c))
            for c2 in m1:
                changed |= s2.add(comm(Ld @ c, c2))
        for e in m2:
            for h in h_terms:
                changed |= s2.add(comm(h, e))
            for y in m0:
                changed |= s2.add(comm(Ld @ y, e))
                changed |= s2.add(comm(Ld @ e, y))
        if overflow():
            fb = full_basis(dim)
            return fb, fb, fb

    return (
        OperatorBasis(np.array(s0.matrices()).reshape(-1, dim, dim), dim),
        OperatorBasis(np.array(s1.matrices()).reshape(-1, dim, dim), dim),
        OperatorBasis(np.array(s2.matrices()).reshape(-1, dim, dim), dim),
    )
