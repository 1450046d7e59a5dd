"""Stochastic validation path: colored noise, linear QSD trajectories, Novikov.

The linear quantum-state-diffusion equation

    d psi / dt = (-i H(t) + L z*_t - L^dag Obar(t, z*)) psi

is integrated per noise realization with the Obar tape recorded by the
hierarchy run, so the only thing this module adds over the master-equation
pipeline is the noise contraction and the ensemble average -- which is
exactly what the oracle is meant to test.  Trajectory norms are NOT
renormalized; the ensemble mean of |psi><psi| recovers rho.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as kmod
from .master_equation import evolve
from .operator_core import dagger

OVERFLOW_NORM = 1e6


def noise_factor(kernel, grid, jitter=1e-10):
    """Matrix B with z* = B xi reproducing E[z*_i z_j] = alpha(t_i, t_j).

    Built from the eigendecomposition of conj(C) with tiny negative
    eigenvalues clipped; deterministic for a given kernel and grid.
    """
    c = kmod.noise_covariance(kernel, grid, jitter=jitter)
    evals, vecs = np.linalg.eigh(c.conj())
    evals = np.clip(evals, 0.0, None)
    return vecs * np.sqrt(evals)[None, :]


def sample_noise(kernel, grid, seed, count):
    """`count` realizations of z*_t on the grid, shape (count, n_steps + 1).

    Per-realization substreams come from a spawned SeedSequence so parallel
    chunking cannot change the draws.
    """
    factor = noise_factor(kernel, grid)
    n = grid.n_steps + 1
    out = np.empty((count, n), dtype=complex)
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(ss)
        xi = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)
        out[i] = factor @ xi
    return out


def _tape_contract(tape, m, weights, z_star):
    """Per-trajectory Obar coefficients at time index m.

    Returns (c0, c1, c2): c0 shared across trajectories, c1/c2 of shape
    (M, d) from contracting the noise against the tape.
    """
    c0 = tape.ob0[m]
    c1 = c2 = None
    if tape.ob1[m] is not None:
        zw = z_star[:, : m + 1] * weights[None, :]
        c1 = zw @ tape.ob1[m]
        if tape.ob2[m] is not None:
            tmp = np.tensordot(zw, tape.ob2[m], axes=([1], [0]))
            c2 = np.einsum("ms,mse->me", zw, tmp)
    return c0, c1, c2


def _obar_batch(tape, m, weights, z_star):
    """Dense Obar(t_m, z*) per trajectory, shape (M, N, N)."""
    b0, b1, b2 = tape.bases
    c0, c1, c2 = _tape_contract(tape, m, weights, z_star)
    out = np.broadcast_to(b0.reconstruct(c0), (len(z_star),) + b0.elements.shape[1:]).copy()
    if c1 is not None and len(b1):
        out += np.tensordot(c1, b1.elements, axes=([1], [0]))
    if c2 is not None and len(b2):
        out += np.tensordot(c2, b2.elements, axes=([1], [0]))
    return out


@dataclass
class QsdEnsemble:
    """Raw trajectory bundle: states (M, T, N), excluded-overflow mask."""

    times: np.ndarray
    states: np.ndarray
    excluded: np.ndarray

    @property
    def count_included(self):
        return int(np.sum(~self.excluded))


def qsd_trajectories(model, tape, noise, psi0):
    """Batch-integrate the linear QSD equation for every noise realization.

    `tape` must span the full grid (recorded during a hierarchy run).
    Trajectories whose norm passes 1e6 are flagged and frozen to avoid
    overflow; they are excluded from ensemble statistics but counted.
    """
    grid = tape.grid
    dt = grid.dt
    n = grid.n_steps
    psi0 = np.asarray(psi0, dtype=complex)
    psi0 = psi0 / np.linalg.norm(psi0)
    M = len(noise)
    Ld = dagger(model.lindblad)
    psi = np.tile(psi0, (M, 1))
    states = np.empty((M, n + 1, model.dim), dtype=complex)
    states[:, 0] = psi
    excluded = np.zeros(M, dtype=bool)

    def generator(m):
        w = kmod.trapezoid_weights(m, dt)
        obar = _obar_batch(tape, m, w, noise)
        a = -1j * model.hamiltonian(m * dt) - np.einsum(
            "ij,mjk->mik", Ld, obar
        )
        a += noise[:, m, None, None] * model.lindblad
        return a

    a_now = generator(0)
    for m in range(n):
        k1 = np.einsum("mij,mj->mi", a_now, psi)
        a_next = generator(m + 1)
        k2 = np.einsum("mij,mj->mi", a_next, psi + dt * k1)
        psi = psi + (dt / 2.0) * (k1 + k2)
        bad = np.linalg.norm(psi, axis=1) > OVERFLOW_NORM
        if np.any(bad & ~excluded):
            excluded |= bad
            psi[bad] = 0.0
        states[:, m + 1] = psi
        a_now = a_next
    return QsdEnsemble(times=grid.times, states=states, excluded=excluded)


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean_rho: np.ndarray  # (T, N, N)
    stderr: np.ndarray  # per-time Frobenius standard error
    trace_stderr: np.ndarray
    count: int
    excluded: int = 0


def ensemble_average(ensemble):
    """Mean outer product over included trajectories with jackknife errors.

    For the plain mean the jackknife collapses to the standard error of the
    mean, computed here from per-trajectory norms without materializing
    every outer product.
    """
    keep = ~ensemble.excluded
    states = ensemble.states[keep]
    M = len(states)
    if M < 2:
        raise ValueError("need at least two trajectories")
    mean_rho = np.einsum("mti,mtj->tij", states, states.conj()) / M
    norms2 = np.sum(np.abs(states) ** 2, axis=2)  # (M, T): Tr P_m
    # ||P_m||_F^2 = (Tr P_m)^2 for projector outer products
    sum_sq = np.sum(norms2**2, axis=0)
    mean_sq = np.einsum("tij,tij->t", mean_rho, mean_rho.conj()).real
    var = np.clip(sum_sq - M * mean_sq, 0.0, None)
    stderr = np.sqrt(var / (M * (M - 1)))
    trace_stderr = np.std(norms2, axis=0, ddof=1) / np.sqrt(M)
    return EnsembleResult(
        times=ensemble.times,
        mean_rho=mean_rho,
        stderr=stderr,
        trace_stderr=trace_stderr,
        count=M,
        excluded=int(np.sum(ensemble.excluded)),
    )


def qsd_compare(model, kernel, grid, psi0, count, seed, max_order=None,
                compression=True):
    """Run master equation and QSD ensemble on the same grid.

    Returns (trajectory, EnsembleResult, per-time trace distances).
    """
    from .master_equation import trace_distance

    traj = evolve(model, kernel, np.outer(psi0, np.conj(psi0)) /
                  float(np.vdot(psi0, psi0).real), grid,
                  max_order=max_order, compression=compression,
                  record_tape=True, fast_path=False)
    tape = traj.meta["tape"]
    noise = sample_noise(kernel, grid, seed, count)
    ens = ensemble_average(qsd_trajectories(model, tape, noise, psi0))
    dists = np.array(
        [trace_distance(a, b) for a, b in zip(traj.states, ens.mean_rho)]
    )
    return traj, ens, dists


@dataclass
class NovikovReport:
    times: np.ndarray
    max_sigma: float
    per_time_sigma: np.ndarray

    @property
    def passed(self):
        return self.max_sigma <= 5.0


def novikov_probe(model, kernel, grid, count, seed, probe_indices=None,
                  max_order=None, atol=1e-9):
    """Statistical test of the Gaussian contraction identity.

    Compares the Monte Carlo estimate of M[z*_t P_t] against
    int_0^t ds alpha(t, s) M[P_t O^dag(t, s, z*)], both built from the same
    ensemble, and reports the maximum componentwise paired discrepancy in
    standard-error units.  `atol` floors the normalization: at very early
    times the paired difference cancels almost perfectly and its spread
    drops to the integrator's startup-quadrature residual (~1e-11), where
    a sigma ratio stops measuring the statistical identity.
    """
    if probe_indices is None:
        probe_indices = np.unique(
            np.linspace(1, grid.n_steps, 10).astype(int)
        )
    probe_indices = [int(i) for i in probe_indices]
    traj = evolve(
        model, kernel,
        np.diag(np.r_[np.zeros(model.dim - 1), 1.0]).astype(complex),
        grid, max_order=max_order, record_tape=True, fast_path=False,
        snapshot_indices=probe_indices,
    )
    tape = traj.meta["tape"]
    b0, b1, b2 = tape.bases
    noise = sample_noise(kernel, grid, seed, count)
    psi0 = np.zeros(model.dim, dtype=complex)
    psi0[-1] = 1.0  # highest level: nontrivial decay through every order
    ens = qsd_trajectories(model, tape, noise, psi0)
    keep = ~ens.excluded
    z = noise[keep]
    sigmas = []
    for m in probe_indices:
        o0s, o1s, o2s = tape.slices[m]
        w = kmod.trapezoid_weights(m, grid.dt)
        a_conj = np.conj(tape_alpha_row(kernel, grid, m)) * w
        k0 = a_conj @ o0s
        psi = ens.states[keep, m]
        xi = np.broadcast_to(
            b0.reconstruct(k0), (len(psi), model.dim, model.dim)
        ).copy()
        if o1s is not None and len(b1):
            k1 = np.tensordot(a_conj, o1s, axes=([0], [0]))  # (m+1, d1)
            zw = z[:, : m + 1] * w[None, :]
            c1 = zw @ k1
            xi += np.tensordot(c1, b1.elements, axes=([1], [0]))
            if o2s is not None and len(b2):
                k2 = np.tensordot(a_conj, o2s, axes=([0], [0]))
                tmp = np.tensordot(zw, k2, axes=([1], [0]))
                c2 = np.einsum("ms,mse->me", zw, tmp)
                xi += np.tensordot(c2, b2.elements, axes=([1], [0]))
        # lhs_m = z*_t |psi><psi| ; rhs_m = |psi> <Xi psi|
        xipsi = np.einsum("mij,mj->mi", xi, psi)
        lhs = z[:, m, None, None] * np.einsum("mi,mj->mij", psi, psi.conj())
        rhs = np.einsum("mi,mj->mij", psi, xipsi.conj())
        diff = lhs - rhs
        mean = diff.mean(axis=0)
        spread = np.sqrt(
            diff.real.var(axis=0, ddof=1) + diff.imag.var(axis=0, ddof=1)
        ) / np.sqrt(len(diff))
        sigmas.append(float(np.max(np.abs(mean) / (spread + atol))))
    return NovikovReport(
        times=np.asarray(probe_indices) * grid.dt,
        max_sigma=float(max(sigmas)),
        per_time_sigma=np.asarray(sigmas),
    )


def tape_alpha_row(kernel, grid, m):
    """alpha(t_m, t_s) for s = 0..m."""
    times = grid.times
    return kmod.evaluate(kernel, times[m], times[: m + 1])
