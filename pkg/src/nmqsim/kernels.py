"""Bath correlation kernels, time grids, quadrature and noise covariance.

The kernel ``alpha(t, s)`` is the bath memory function.  All shipped
variants are stationary, ``alpha(t, s) = alpha(|t - s|)`` with hermitian
symmetry ``alpha(s, t) = conj(alpha(t, s))`` built in; the two-argument
signature is kept so non-stationary kernels can be added without touching
callers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class KernelRangeError(ValueError):
    """Tabulated kernel evaluated outside its tabulated lag range."""


class CovarianceError(RuntimeError):
    """Noise covariance is not positive semidefinite even after jitter."""


@dataclass(frozen=True)
class OrnsteinUhlenbeck:
    """alpha(tau) = (gamma/2) exp(-gamma |tau|)."""

    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class ExponentialSum:
    """alpha(tau >= 0) = sum_j G_j exp(-lambda_j tau), Re(lambda_j) > 0."""

    terms: tuple  # of (G: complex, lam: complex)

    def __post_init__(self):
        terms = tuple((complex(g), complex(lam)) for g, lam in self.terms)
        for _, lam in terms:
            if lam.real <= 0:
                raise ValueError("exponential rates need positive real part")
        object.__setattr__(self, "terms", terms)


@dataclass(frozen=True)
class Tabulated:
    """Kernel sampled on a uniform tau >= 0 grid, linearly interpolated."""

    tau: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        values = np.asarray(self.values, dtype=complex)
        if tau.ndim != 1 or tau.shape != values.shape:
            raise ValueError("tau and values must be matching 1-d arrays")
        if tau[0] != 0.0 or np.any(np.diff(tau) <= 0):
            raise ValueError("tau grid must start at 0 and increase")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "values", values)


def load_tabulated(path):
    """Load a tabulated kernel from a text file.

    Columns: tau, Re alpha, Im alpha; whitespace separated, '#' comments.
    """
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] < 3:
        raise ValueError("expected three columns: tau, Re alpha, Im alpha")
    return Tabulated(data[:, 0], data[:, 1] + 1j * data[:, 2])


def _stationary(kernel, tau):
    """alpha at signed lag tau = t - s (scalar or array)."""
    tau = np.asarray(tau, dtype=float)
    a = np.abs(tau)
    if isinstance(kernel, OrnsteinUhlenbeck):
        out = (kernel.gamma / 2.0) * np.exp(-kernel.gamma * a) + 0j
    elif isinstance(kernel, ExponentialSum):
        out = np.zeros(a.shape, dtype=complex)
        for g, lam in kernel.terms:
            out += g * np.exp(-lam * a)
    elif isinstance(kernel, Tabulated):
        if np.any(a > kernel.tau[-1] * (1 + 1e-12)):
            raise KernelRangeError(
                f"lag {float(np.max(a)):g} outside tabulated range "
                f"[0, {kernel.tau[-1]:g}]"
            )
        out = np.interp(a, kernel.tau, kernel.values.real) + 1j * np.interp(
            a, kernel.tau, kernel.values.imag
        )
    else:
        raise TypeError(f"unknown kernel type {type(kernel)!r}")
    # hermitian symmetry: alpha(-tau) = conj(alpha(tau))
    out = np.where(tau < 0, np.conj(out), out)
    return out if out.ndim else complex(out)


def evaluate(kernel, t, s):
    """alpha(t, s) for t, s >= 0."""
    return _stationary(kernel, np.asarray(t, dtype=float) - np.asarray(s, dtype=float))


def alpha0(kernel):
    """alpha at zero lag (real and nonnegative for valid kernels)."""
    return complex(evaluate(kernel, 0.0, 0.0))


def exponential_terms(kernel):
    """(G_j, lambda_j) terms if the kernel is an exponential sum, else None."""
    if isinstance(kernel, OrnsteinUhlenbeck):
        return ((kernel.gamma / 2.0 + 0j, kernel.gamma + 0j),)
    if isinstance(kernel, ExponentialSum):
        return kernel.terms
    return None


def markov_rate(kernel):
    """Half-line integral of the kernel, int_0^inf alpha(tau) dtau.

    Analytic for exponential kernels, trapezoid quadrature for tabulated.
    """
    terms = exponential_terms(kernel)
    if terms is not None:
        return complex(sum(g / lam for g, lam in terms))
    return complex(np.trapezoid(kernel.values, kernel.tau))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_k = k * dt, k = 0..n_steps."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def t_max(self):
        return self.dt * self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def order2_elements(self, dim_s2):
        """Storage element count for order-2 hierarchy coefficients."""
        n = self.n_steps + 1
        return n * n * n * max(dim_s2, 1)


def trapezoid_weights(m, dt):
    """Weights for int_0^{t_m} on grid points 0..m (zero-length at m = 0)."""
    if m == 0:
        return np.zeros(1)
    w = np.full(m + 1, dt)
    w[0] = w[-1] = dt / 2.0
    return w


def kernel_matrix(kernel, times):
    """Matrix A[i, j] = alpha(t_i, t_j) over the given sample times."""
    t = np.asarray(times, dtype=float)
    return _stationary(kernel, t[:, None] - t[None, :])


def noise_covariance(kernel, grid, jitter=1e-10):
    """Hermitian PSD covariance C[i, j] = alpha(t_i, t_j) over the grid.

    A diagonal jitter of at most ``jitter * alpha(0)`` is added if the
    smallest eigenvalue is slightly negative; a genuinely indefinite
    covariance raises CovarianceError (invalid user kernel).
    """
    c = kernel_matrix(kernel, grid.times)
    c = 0.5 * (c + c.conj().T)
    a0 = abs(alpha0(kernel))
    if a0 == 0.0:
        return c
    min_eig = float(np.linalg.eigvalsh(c)[0])
    if min_eig < 0.0:
        if min_eig < -jitter * a0:
            raise CovarianceError(
                f"covariance min eigenvalue {min_eig:.3e} below jitter budget"
            )
        c = c + (jitter * a0) * np.eye(len(c))
    return c
