"""Evolution of the noise-expanded O-operator hierarchy.

The functional-derivative operator O(t, s, z*) is expanded to second order
in the noise,

    O = O0(t, s) + int ds1 z*_{s1} O1(t, s, s1)
               + iint ds1 ds2 z*_{s1} z*_{s2} O2(t, s, s1, s2),

and each order is stored as coefficient vectors over a detected invariant
operator subspace (S0, S1, S2).  Slices are advanced in t with Heun's
method; bar-contractions ``Obar_j = int_0^t ds alpha(t, s) O_j`` use the
matching trapezoid rule.  Fresh boundary slices are appended after every
step:

    O0(t, t) = L,   O1(t, s, t) = [L, O0(t, s)],
    O2(t, s, t, s1) = (1/2) [L, O1(t, s, s1)],

and the s = t faces of O1, O2 vanish because O(t, t, z*) = L exactly.
The O(t, t) = L condition itself is the standard quantum-state-diffusion
boundary value; it is an assumption recorded in the docs, not printed in
the source papers' truncated display.
"""
from __future__ import annotations

import io
import struct
import warnings

import numpy as np

from . import kernels as kmod
from .models import verify_forbidden
from .operator_core import OperatorBasis, comm, dagger, full_basis

DEFAULT_CAP_ELEMENTS = 20_000_000  # complex128 entries, ~320 MB


class MemoryBudgetError(RuntimeError):
    pass


class StructureTensors:
    """Model-and-basis dependent tensors driving the hierarchy equations.

    All maps are built once by projecting dense commutators back onto the
    detected subspaces; a projection residual here means the closure
    detection is buggy and raises SubspaceEscapeError immediately, so the
    per-step evolution never needs to re-check spans.
    """

    def __init__(self, model, bases):
        b0, b1, b2 = bases
        self.bases = bases
        self.dims = (len(b0), len(b1), len(b2))
        L = model.lindblad
        Ld = dagger(L)
        self.l0 = b0.project(L)

        def cmap(target, h, source):
            # matrix of X -> [h, X] restricted to source -> target
            out = np.zeros((len(target), len(source)), dtype=complex)
            for b, e in enumerate(source.elements):
                out[:, b] = target.project(comm(h, e))
            return out

        def bilinear(target, source_y, source_x):
            # T[r, a, b] with [L^dag Y_a, X_b] = sum_r T[r, a, b] E_r
            out = np.zeros((len(target), len(source_y), len(source_x)), dtype=complex)
            for a, y in enumerate(source_y.elements):
                g = Ld @ y
                for b, x in enumerate(source_x.elements):
                    out[:, a, b] = target.project(comm(g, x))
            return out

        def lower(target, source):
            # U[r, c] with L^dag E_c = sum_r U[r, c] E_r
            out = np.zeros((len(target), len(source)), dtype=complex)
            for c, e in enumerate(source.elements):
                out[:, c] = target.project(Ld @ e)
            return out

        # per-subspace commutator maps for H0 and each drive operator
        self.h0_maps = tuple(cmap(b, model.h0, b) for b in bases)
        self.drive_maps = tuple(
            tuple(
                (cmap(b, d.operator, b), cmap(b, dagger(d.operator), b))
                for d in model.drives
            )
            for b in bases
        )
        self.drives = model.drives

        self.t00 = bilinear(b0, b0, b0)
        self.u1 = lower(b0, b1)
        self.t01 = bilinear(b1, b0, b1)
        self.t10 = bilinear(b1, b1, b0)
        self.u2 = lower(b1, b2)
        self.t02 = bilinear(b2, b0, b2)
        self.t11 = bilinear(b2, b1, b1)
        self.t20 = bilinear(b2, b2, b0)
        self.bl0 = cmap(b1, L, b0)
        self.bl1 = cmap(b2, L, b1)

    def hmap(self, j, t):
        """Coefficient matrix of X -> [-i H(t), X] on subspace j."""
        h = self.h0_maps[j].copy()
        for d, (amap, adjmap) in zip(self.drives, self.drive_maps[j]):
            phase = d.amplitude * np.exp(-1j * d.frequency * t)
            h += phase * amap + np.conj(phase) * adjmap
        return -1j * h


class HierarchyTape:
    """Per-step record of bar-contraction coefficients (and slice snapshots).

    Used by the stochastic oracle to rebuild Obar(t, z*) per trajectory
    without re-deriving the O operators.
    """

    def __init__(self, bases, grid):
        self.bases = bases
        self.grid = grid
        self.ob0 = []  # (d0,) per time index
        self.ob1 = []  # (m+1, d1) per time index
        self.ob2 = []  # (m+1, m+1, d2) per time index
        self.slices = {}  # m -> (o0, o1, o2) coefficient snapshots

    def record(self, m, ob0, ob1, ob2):
        assert m == len(self.ob0)
        self.ob0.append(ob0.copy())
        self.ob1.append(None if ob1 is None else ob1.copy())
        self.ob2.append(None if ob2 is None else ob2.copy())

    def obar0_matrix(self, m):
        return self.bases[0].reconstruct(self.ob0[m])


class HierarchyState:
    """Multi-time-grid hierarchy coefficients up to the current step."""

    def __init__(self, model, kernel, grid, order, bases, tensors,
                 cap_elements=DEFAULT_CAP_ELEMENTS):
        self.model = model
        self.kernel = kernel
        self.grid = grid
        self.bases = bases
        self.st = tensors
        d0, d1, d2 = tensors.dims
        order = min(order, model.truncation_order)
        if order >= 1 and d1 == 0:
            order = 0
        elif order >= 2 and d2 == 0:
            order = 1
        self.order = order
        n = grid.n_steps + 1

        self.estimated_elements = n * d0
        if order >= 1:
            self.estimated_elements += n * n * d1
        if order >= 2:
            self.estimated_elements += n * n * n * d2
        if self.estimated_elements > cap_elements:
            raise MemoryBudgetError(
                f"hierarchy storage needs {self.estimated_elements:,} complex "
                f"entries (~{self.estimated_elements * 16 / 1e6:.0f} MB), over "
                f"the cap of {int(cap_elements):,}; coarsen the grid or raise "
                "the cap"
            )

        self.o0 = np.zeros((n, d0), dtype=complex)
        self.o1 = np.zeros((n, n, d1), dtype=complex) if order >= 1 else None
        self.o2 = np.zeros((n, n, n, d2), dtype=complex) if order >= 2 else None
        self.alpha = kmod.kernel_matrix(kernel, grid.times)
        self.m = 0
        self.o0[0] = tensors.l0
        self._contract()

    # -- quadrature helpers -------------------------------------------------
    @property
    def t(self):
        return self.m * self.grid.dt

    def _aw(self, m, nslices):
        """alpha(t_m, t_s) * trapezoid weight, s = 0..nslices-1."""
        w = kmod.trapezoid_weights(nslices - 1, self.grid.dt)
        return self.alpha[m, :nslices] * w

    def _contract_from(self, m, nslices, o0v, o1v, o2v):
        aw = self._aw(m, nslices)
        ob0 = aw @ o0v
        ob1 = None if o1v is None else np.tensordot(aw, o1v, axes=([0], [0]))
        ob2 = None if o2v is None else np.tensordot(aw, o2v, axes=([0], [0]))
        return ob0, ob1, ob2

    def _contract(self):
        S = self.m + 1
        o1v = None if self.o1 is None else self.o1[:S, :S]
        o2v = None if self.o2 is None else self.o2[:S, :S, :S]
        self.ob0, self.ob1, self.ob2 = self._contract_from(
            self.m, S, self.o0[:S], o1v, o2v
        )

    # -- derivative evaluation ---------------------------------------------
    def _derivs(self, t, o0v, o1v, o2v, ob0, ob1, ob2):
        st = self.st
        lin0 = st.hmap(0, t) - np.tensordot(st.t00, ob0, axes=([1], [0]))
        d0v = o0v @ lin0.T
        d1v = d2v = None
        if o1v is not None:
            d0v -= ob1 @ st.u1.T
            lin1 = st.hmap(1, t) - np.tensordot(st.t01, ob0, axes=([1], [0]))
            d1v = o1v @ lin1.T
            cross = np.einsum("rcb,yc->yrb", st.t10, ob1)
            d1v -= np.einsum("yrb,sb->syr", cross, o0v)
            if o2v is not None:
                d1v -= 2.0 * np.tensordot(ob2, st.u2, axes=([2], [1]))
        if o2v is not None:
            lin2 = st.hmap(2, t) - np.tensordot(st.t02, ob0, axes=([1], [0]))
            d2v = o2v @ lin2.T
            sym = np.einsum("ecd,yc->yed", st.t11, ob1)
            part = np.einsum("yed,xzd->xyze", sym, o1v)
            d2v -= 0.5 * (part + part.transpose(0, 2, 1, 3))
            low = np.einsum("reb,yze->yzrb", st.t20, ob2)
            d2v -= np.einsum("yzrb,xb->xyzr", low, o0v)
        return d0v, d1v, d2v

    def _impose_boundary(self, o0a, o1a, o2a, p):
        """Fresh slices at grid index p; s = t faces stay zero."""
        o0a[p] = self.st.l0
        if o1a is not None:
            o1a[: p + 1, p] = o0a[: p + 1] @ self.st.bl0.T
            if o2a is not None:
                half = 0.5 * np.tensordot(
                    o1a[: p + 1, : p + 1], self.st.bl1, axes=([2], [1])
                )
                o2a[: p + 1, p, : p + 1] = half
                o2a[: p + 1, : p + 1, p] = half

    def step(self):
        """Advance every stored slice by one Heun step and append boundaries."""
        m, S, p = self.m, self.m + 1, self.m + 1
        if p > self.grid.n_steps:
            raise RuntimeError("grid exhausted")
        dt = self.grid.dt
        o0v = self.o0[:S]
        o1v = None if self.o1 is None else self.o1[:S, :S]
        o2v = None if self.o2 is None else self.o2[:S, :S, :S]

        d0a, d1a, d2a = self._derivs(self.t, o0v, o1v, o2v,
                                     self.ob0, self.ob1, self.ob2)

        # predictor, extended with boundary slices at index p
        n = self.grid.n_steps + 1
        p0 = np.zeros((p + 1, o0v.shape[1]), dtype=complex)
        p0[:S] = o0v + dt * d0a
        p1 = p2 = None
        if o1v is not None:
            p1 = np.zeros((p + 1, p + 1, o1v.shape[2]), dtype=complex)
            p1[:S, :S] = o1v + dt * d1a
        if o2v is not None:
            p2 = np.zeros((p + 1,) * 3 + (o2v.shape[3],), dtype=complex)
            p2[:S, :S, :S] = o2v + dt * d2a
        self._impose_boundary(p0, p1, p2, p)

        qb0, qb1, qb2 = self._contract_from(p, p + 1, p0, p1, p2)
        d0b, d1b, d2b = self._derivs(
            p * dt,
            p0[:S],
            None if p1 is None else p1[:S, :S],
            None if p2 is None else p2[:S, :S, :S],
            qb0,
            None if qb1 is None else qb1[:S],
            None if qb2 is None else qb2[:S, :S],
        )

        self.o0[:S] += (dt / 2.0) * (d0a + d0b)
        if o1v is not None:
            self.o1[:S, :S] += (dt / 2.0) * (d1a + d1b)
        if o2v is not None:
            self.o2[:S, :S, :S] += (dt / 2.0) * (d2a + d2b)
        self._impose_boundary(self.o0, self.o1, self.o2, p)
        self.m = p
        self._contract()

    # -- views for diagnostics and the master-equation layer ----------------
    def obar_matrices(self):
        """Dense (Obar0, [Obar1(s1)], [[Obar2(s1, s2)]]) at the current time."""
        b0, b1, b2 = self.bases
        ob0 = b0.reconstruct(self.ob0)
        ob1 = None
        ob2 = None
        if self.ob1 is not None:
            ob1 = [b1.reconstruct(c) for c in self.ob1]
        if self.ob2 is not None:
            S = self.m + 1
            ob2 = [[b2.reconstruct(self.ob2[i, j]) for j in range(S)]
                   for i in range(S)]
        return ob0, ob1, ob2

    def boundary_residual(self):
        """Max deviation of O1(t, s, t) from [L, O0(t, s)], recomputed dense."""
        if self.o1 is None:
            return 0.0
        b0, b1 = self.bases[0], self.bases[1]
        L = self.model.lindblad
        worst = 0.0
        for s in range(self.m + 1):
            expect = comm(L, b0.reconstruct(self.o0[s]))
            got = b1.reconstruct(self.o1[s, self.m])
            worst = max(worst, float(np.max(np.abs(got - expect), initial=0.0)))
        return worst

    def exchange_asymmetry(self):
        """Max |O2(t, s, s1, s2) - O2(t, s, s2, s1)| over stored slices."""
        if self.o2 is None:
            return 0.0
        S = self.m + 1
        v = self.o2[:S, :S, :S]
        return float(np.max(np.abs(v - v.transpose(0, 2, 1, 3)), initial=0.0))


def obar_at(state):
    return state.obar_matrices()


def effective_order(model, max_order, compression=True, subspace_cap=None):
    """Truncation order after clamping by model nilpotency and subspace dims.

    Validates the model and closure like `initialize`, but without
    allocating any grid storage -- used to route order-0 problems to the
    memoryless exponential-kernel integrator.
    """
    model.validate()
    report = verify_forbidden(model)
    if not report.passed:
        raise ValueError("model violates the hierarchy closure:\n" + str(report))
    order = min(max_order, model.truncation_order)
    if order > 0 and compression:
        bases = model.subspaces(cap=subspace_cap)
        if len(bases[1]) == 0:
            order = 0
        elif order >= 2 and len(bases[2]) == 0:
            order = 1
    return order


def initialize(model, kernel, grid, max_order=2, compression=True,
               cap_elements=DEFAULT_CAP_ELEMENTS, subspace_cap=None):
    """Fresh hierarchy state at t = 0 with O0(0, 0) = L.

    `compression` selects detected invariant subspaces for storage; with
    it off the full N^2 matrix-unit basis is used (dense fallback for
    correctness cross-checks).
    """
    model.validate()
    report = verify_forbidden(model)
    if not report.passed:
        raise ValueError("model violates the hierarchy closure:\n" + str(report))
    if compression:
        bases = model.subspaces(cap=subspace_cap)
    else:
        fb = full_basis(model.dim)
        bases = (fb, fb, fb)
    tensors = StructureTensors(model, bases)
    return HierarchyState(model, kernel, grid, max_order, bases, tensors,
                          cap_elements=cap_elements)


def run_hierarchy(model, kernel, grid, max_order=2, compression=True,
                  cap_elements=DEFAULT_CAP_ELEMENTS, record_tape=False,
                  snapshot_indices=()):
    """Evolve the hierarchy over the whole grid; optionally record a tape."""
    state = initialize(model, kernel, grid, max_order=max_order,
                       compression=compression, cap_elements=cap_elements)
    tape = HierarchyTape(state.bases, grid) if record_tape else None
    snapshot_indices = set(snapshot_indices)

    def snap():
        if tape is not None:
            tape.record(state.m, state.ob0, state.ob1, state.ob2)
            if state.m in snapshot_indices:
                S = state.m + 1
                tape.slices[state.m] = (
                    state.o0[:S].copy(),
                    None if state.o1 is None else state.o1[:S, :S].copy(),
                    None if state.o2 is None else state.o2[:S, :S, :S].copy(),
                )

    snap()
    for _ in range(grid.n_steps):
        state.step()
        snap()
    return state, tape


def markov_limit_probe(model, gamma, t_max=1.0, points_per_memory=20,
                       max_order=0):
    """Sup-norm deviation of Obar0(t) from L/2 after the initial ramp.

    In the Markov limit (large gamma) Obar0 approaches L times the kernel's
    half-line integral (1/2 for the shipped normalization); the residual
    deviation scales as 1/gamma.
    """
    kernel = kmod.OrnsteinUhlenbeck(gamma)
    dt = min(1.0 / (gamma * points_per_memory), t_max / 100.0)
    n = int(round(t_max / dt))
    grid = kmod.TimeGrid(dt=dt, n_steps=n)
    state = initialize(model, kernel, grid, max_order=max_order)
    target = model.lindblad / 2.0
    t_lo = min(10.0 / gamma, 0.5 * t_max)
    worst = 0.0
    for _ in range(n):
        state.step()
        if state.t >= t_lo:
            dev = np.linalg.norm(state.bases[0].reconstruct(state.ob0) - target)
            worst = max(worst, float(dev))
    return {
        "deviation": worst,
        "l_norm": float(np.linalg.norm(model.lindblad)),
        "gamma": gamma,
        "window": (t_lo, grid.t_max),
    }


_CHECKPOINT_MAGIC = b"NMQH"
_CHECKPOINT_VERSION = 1


def save_checkpoint(state, path):
    """Binary checkpoint of the hierarchy arrays (little-endian float64 pairs)."""
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        d0, d1, d2 = state.st.dims
        header = struct.pack(
            "<iiqiiii d",
            _CHECKPOINT_VERSION,
            state.order,
            state.grid.n_steps,
            state.m,
            d0,
            d1,
            d2,
            state.grid.dt,
        )
        fh.write(header)
        S = state.m + 1
        fh.write(np.ascontiguousarray(state.o0[:S], dtype="<c16").tobytes())
        if state.o1 is not None:
            fh.write(np.ascontiguousarray(state.o1[:S, :S], dtype="<c16").tobytes())
        if state.o2 is not None:
            fh.write(
                np.ascontiguousarray(state.o2[:S, :S, :S], dtype="<c16").tobytes()
            )


def load_checkpoint(model, kernel, path, compression=True,
                    cap_elements=DEFAULT_CAP_ELEMENTS):
    """Rebuild a HierarchyState from a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CHECKPOINT_MAGIC:
            raise ValueError("not a hierarchy checkpoint")
        version, order, n_steps, m, d0, d1, d2, dt = struct.unpack(
            "<iiqiiii d", fh.read(struct.calcsize("<iiqiiii d"))
        )
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        grid = kmod.TimeGrid(dt=dt, n_steps=n_steps)
        state = initialize(model, kernel, grid, max_order=order,
                           compression=compression, cap_elements=cap_elements)
        if state.st.dims != (d0, d1, d2) or state.order != order:
            raise ValueError("checkpoint does not match the rebuilt model")
        S = m + 1

        def read(shape):
            count = int(np.prod(shape))
            buf = fh.read(count * 16)
            return np.frombuffer(buf, dtype="<c16").reshape(shape).astype(complex)

        state.o0[:S] = read((S, d0))
        if state.o1 is not None:
            state.o1[:S, :S] = read((S, S, d1))
        if state.o2 is not None:
            state.o2[:S, :S, :S] = read((S, S, S, d2))
        state.m = m
        state._contract()
        return state
