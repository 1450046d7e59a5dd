"""Non-Markovian master-equation simulator for multilevel open systems.

Submodules are imported lazily (PEP 562) so the command-line entry point can
pin BLAS thread counts via environment variables before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "ExponentialSum": "kernels",
    "OrnsteinUhlenbeck": "kernels",
    "Tabulated": "kernels",
    "TimeGrid": "kernels",
    "load_tabulated": "kernels",
    "DensityTrajectory": "master_equation",
    "density_from_state": "master_equation",
    "evolve": "master_equation",
    "lindblad_evolve": "master_equation",
    "steady_state_sweep": "master_equation",
    "trace_distance": "master_equation",
    "InterferenceConvention": "models",
    "SystemModel": "models",
    "build_cascade": "models",
    "build_interference": "models",
    "verify_forbidden": "models",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
