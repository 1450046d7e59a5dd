"""Command-line front end: run, sweep, compare and shipped figure presets.

Exit codes: 0 success, 2 config-validation failure or a failed comparison,
1 any other runtime error.  CSV output carries '#' metadata lines (tool
version, command, seed and the fully resolved config) followed by a column
header and rows printed with 12 significant digits, so byte-identical
reruns are expected for fixed inputs.
"""
from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")

FIGURE_IDS = ("1", "3", "4", "5", "6")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="nmqsim",
        description="non-Markovian multilevel open-system simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output CSV path (overrides the config)")
        p.add_argument("--seed", type=int, help="RNG seed override")
        p.add_argument("--threads", type=int,
                       help="BLAS thread cap (default: NMQSIM_THREADS or "
                            "library default)")

    p = sub.add_parser("run", help="integrate a config with mode = evolve")
    p.add_argument("config")
    common(p)

    p = sub.add_parser("sweep", help="steady-state drive-ratio sweep")
    p.add_argument("config")
    common(p)

    p = sub.add_parser("compare",
                       help="check the solver against an independent oracle")
    p.add_argument("config")
    common(p)

    p = sub.add_parser("figure", help="run a shipped preset")
    p.add_argument("id", choices=FIGURE_IDS)
    common(p)
    return parser


def _apply_threads(requested):
    n = requested
    if n is None:
        env = os.environ.get("NMQSIM_THREADS", "").strip()
        if env:
            try:
                n = int(env)
            except ValueError:
                raise SystemExit(f"NMQSIM_THREADS={env!r} is not an integer")
    if n is not None:
        if n < 1:
            raise SystemExit("thread count must be >= 1")
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(n))
    return n


def _load_config(args):
    from .config import parse_config

    if args.command == "figure":
        from importlib.resources import files

        text = (files("nmqsim") / "configs" / f"fig{args.id}.cfg").read_text()
        source = f"shipped preset fig{args.id}"
    else:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
        source = args.config
    return parse_config(text), source


def _sig(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    return f"{x:.12g}"


def _write_csv(path, meta_lines, header, rows):
    import nmqsim

    lines = [f"# nmqsim {nmqsim.__version__}"]
    lines.extend(f"# {m}" for m in meta_lines)
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_sig(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _meta(cfg, argv, seed):
    from .config import to_text

    meta = [f"command: nmqsim {' '.join(argv)}", f"seed: {seed}", "config:"]
    meta.extend("  " + line for line in to_text(cfg).rstrip("\n").split("\n"))
    return meta


def _resolve_out(cfg, args, default):
    if args.out:
        return args.out
    return cfg.run.out or default


def _cmd_evolve(cfg, args, argv):
    import numpy as np

    from .config import (build_grid, build_kernels, build_model,
                         initial_state)
    from .master_equation import density_from_state, evolve

    model = build_model(cfg)
    grid = build_grid(cfg)
    kernels = build_kernels(cfg)
    rho0 = density_from_state(initial_state(cfg, model.dim))
    seed = args.seed if args.seed is not None else cfg.run.seed

    header = ["t"]
    columns = []
    trajs = []
    for kernel, kcfg_tag in zip(kernels, _kernel_tags(cfg, kernels)):
        traj = evolve(model, kernel, rho0, grid,
                      max_order=cfg.hierarchy.max_order,
                      compression=cfg.hierarchy.compression,
                      cap_elements=cfg.hierarchy.cap_elements,
                      sample_stride=cfg.grid.sample_stride,
                      fast_path=cfg.hierarchy.fast_path,
                      substeps=cfg.grid.substeps)
        trajs.append(traj)
        for name in cfg.run.observables:
            header.append(name if len(kernels) == 1 else f"{name}_{kcfg_tag}")
            columns.append(traj.observable(name))

    rows = np.column_stack([trajs[0].times] + columns)
    meta = _meta(cfg, argv, seed)
    meta.append(f"solver: {trajs[0].meta.get('solver')}")
    meta.append(f"max_trace_error: {max(t.max_trace_error() for t in trajs):.3e}")
    out = _resolve_out(cfg, args, "evolve.csv")
    _write_csv(out, meta, header, rows)
    return 0, out


def _kernel_tags(cfg, kernels):
    if cfg.kernel.type == "ou" and len(kernels) > 1:
        return [f"g{g:g}" for g in cfg.kernel.gammas]
    return [""] * len(kernels)


def _cmd_sweep(cfg, args, argv):
    import numpy as np

    from .config import build_kernels, build_model
    from .master_equation import steady_state_sweep

    s = cfg.sweep
    kernel = build_kernels(cfg)[0]
    ratios = np.linspace(s.ratio_min, s.ratio_max, s.points)

    def build(ratio):
        return build_model(cfg, ratio=ratio), kernel

    rows = steady_state_sweep(
        build, ratios, s.settle_time, s.average_window, dt=cfg.grid.dt,
        evolve_kwargs={"max_order": cfg.hierarchy.max_order,
                       "compression": cfg.hierarchy.compression,
                       "cap_elements": cfg.hierarchy.cap_elements,
                       "fast_path": cfg.hierarchy.fast_path,
                       "sample_stride": cfg.grid.sample_stride,
                       "substeps": cfg.grid.substeps},
    )
    seed = args.seed if args.seed is not None else cfg.run.seed
    header = ["ratio", "p1", "p2", "p3", "p4", "spread", "converged"]
    table = [[r.ratio, *r.populations, r.spread, r.converged] for r in rows]
    meta = _meta(cfg, argv, seed)
    if not all(r.converged for r in rows):
        meta.append("warning: some sweep points did not converge")
    out = _resolve_out(cfg, args, "sweep.csv")
    _write_csv(out, meta, header, table)
    return 0, out


def _cmd_compare(cfg, args, argv):
    import numpy as np

    from .config import (build_grid, build_kernels, build_model,
                         initial_state)

    model = build_model(cfg)
    grid = build_grid(cfg)
    kernel = build_kernels(cfg)[0]
    psi0 = initial_state(cfg, model.dim)
    seed = args.seed if args.seed is not None else cfg.run.seed
    c = cfg.compare

    if c.oracle == "qsd":
        from .stochastic import qsd_compare

        traj, ens, dists = qsd_compare(
            model, kernel, grid, psi0, c.trajectories, seed,
            max_order=cfg.hierarchy.max_order,
            compression=cfg.hierarchy.compression,
        )
        header = ["t", "trace_distance", "ensemble_stderr"]
        rows = np.column_stack([traj.times, dists, ens.stderr])
        extra = [f"trajectories: {ens.count} (excluded {ens.excluded})"]
    elif c.oracle == "bath":
        from .bath_oracle import discretize_kernel, full_solve
        from .master_equation import density_from_state, evolve, trace_distance

        bath = discretize_kernel(kernel, m_modes=c.modes)
        oracle = full_solve(model, bath, c.n_max, psi0, grid,
                            sample_stride=cfg.grid.sample_stride)
        traj = evolve(model, kernel, density_from_state(psi0), grid,
                      max_order=cfg.hierarchy.max_order,
                      compression=cfg.hierarchy.compression,
                      cap_elements=cfg.hierarchy.cap_elements,
                      sample_stride=cfg.grid.sample_stride,
                      fast_path=cfg.hierarchy.fast_path)
        dists = np.array([trace_distance(a, b)
                          for a, b in zip(traj.states, oracle.states)])
        header = ["t", "trace_distance"]
        rows = np.column_stack([traj.times, dists])
        extra = [f"bath basis size: {oracle.meta['basis_size']}"]
    else:  # lindblad
        from . import kernels as kmod
        from .master_equation import (density_from_state, evolve,
                                      lindblad_evolve, trace_distance)

        rate = kmod.markov_rate(kernel)
        rho0 = density_from_state(psi0)
        traj = evolve(model, kernel, rho0, grid,
                      max_order=cfg.hierarchy.max_order,
                      compression=cfg.hierarchy.compression,
                      cap_elements=cfg.hierarchy.cap_elements,
                      sample_stride=cfg.grid.sample_stride,
                      fast_path=cfg.hierarchy.fast_path)
        comp = lindblad_evolve(model, rate, rho0, grid,
                               sample_stride=cfg.grid.sample_stride)
        dists = np.array([trace_distance(a, b)
                          for a, b in zip(traj.states, comp.states)])
        header = ["t", "trace_distance"]
        rows = np.column_stack([traj.times, dists])
        extra = [f"markov rate: {rate:.12g}"]

    worst = float(np.max(rows[:, 1]))
    passed = worst <= c.tolerance
    meta = _meta(cfg, argv, seed)
    meta.extend(extra)
    meta.append(f"max trace distance: {worst:.6g} (tolerance {c.tolerance:g})")
    meta.append("result: PASS" if passed else "result: FAIL")
    out = _resolve_out(cfg, args, "compare.csv")
    _write_csv(out, meta, header, rows)
    print(f"{'PASS' if passed else 'FAIL'}: max trace distance {worst:.6g} "
          f"vs tolerance {c.tolerance:g} ({out})")
    return (0 if passed else 2), out


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _build_parser().parse_args(argv)
    _apply_threads(args.threads)

    from .config import ConfigError

    try:
        cfg, source = _load_config(args)
    except ConfigError as exc:
        print(f"config error in {getattr(args, 'config', args.command)}:\n{exc}",
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1

    mode = cfg.run.mode
    if args.command in ("run", "sweep", "compare"):
        expected = {"run": "evolve", "sweep": "sweep", "compare": "compare"}
        if mode != expected[args.command]:
            print(f"{source}: run.mode is {mode!r}, but the "
                  f"{args.command!r} subcommand needs "
                  f"{expected[args.command]!r}", file=sys.stderr)
            return 2

    handlers = {"evolve": _cmd_evolve, "sweep": _cmd_sweep,
                "compare": _cmd_compare}
    try:
        code, out = handlers[mode](cfg, args, argv)
    except Exception as exc:  # noqa: BLE001 -- CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if code == 0:
        print(f"wrote {out}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
