"""CSV loading and figure layouts.

The input files are the CSVs written by the simulator CLI: a header row,
``#`` metadata lines, and comma-separated numeric rows.  Time-series columns
carry a ``_g<gamma>`` suffix per kernel memory rate (``p4_g0.5``); sweep
files use bare ``ratio``/``p1``..``p4`` columns.
"""
import re

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

GAMMA_STYLES = ("-", "-.", ":", "--")


class PlotDataError(Exception):
    """Raised for unusable input data; the message names file and column."""


def load_csv(path):
    """Read one CSV into a dict of column name -> float array."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh
                 if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise PlotDataError(f"{path}: file contains no data")
    header = [c.strip() for c in lines[0].split(",")]
    rows = lines[1:]
    if not rows:
        raise PlotDataError(f"{path}: no data rows after the header")
    data = np.array([[float(v) for v in row.split(",")] for row in rows])
    if data.shape[1] != len(header):
        raise PlotDataError(f"{path}: row width does not match the header")
    return {name: data[:, i] for i, name in enumerate(header)}


def _gamma_series(tables, base):
    """All ``base_g<gamma>`` columns across files, sorted by gamma.

    Returns a list of (gamma, times, values) triples.
    """
    pat = re.compile(re.escape(base) + r"_g([0-9.]+)$")
    out = []
    for path, table in tables.items():
        if "t" not in table:
            raise PlotDataError(f"{path}: missing column 't'")
        for name, values in table.items():
            m = pat.match(name)
            if m:
                out.append((float(m.group(1)), table["t"], values))
    if not out:
        searched = ", ".join(tables)
        raise PlotDataError(
            f"missing column '{base}_g<gamma>' in {searched}")
    return sorted(out, key=lambda s: s[0])


def _require(table, path, *names):
    for name in names:
        if name not in table:
            raise PlotDataError(f"{path}: missing column '{name}'")


def _time_panels(tables, bases, labels):
    fig, axes = plt.subplots(2, 2, figsize=(9, 6.5), sharex=True)
    for ax, base, label in zip(axes.ravel(), bases, labels):
        for i, (gamma, t, values) in enumerate(_gamma_series(tables, base)):
            ax.plot(t, values, GAMMA_STYLES[i % len(GAMMA_STYLES)],
                    lw=1.4, label=rf"$\gamma = {gamma:g}$")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("t")
    axes[0, 0].legend(frameon=False, fontsize=9)
    fig.tight_layout()
    return fig


def _sweep_panel(tables):
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for path, table in tables.items():
        _require(table, path, "ratio", "p3", "p4")
        ax.plot(table["ratio"], table["p4"], "o-", ms=4, lw=1.4,
                label=r"$p_4$")
        ax.plot(table["ratio"], table["p3"], "s--", ms=4, lw=1.4,
                label=r"$p_3$")
    ax.set_xlabel(r"drive ratio $\Omega_2 / \Omega_1$")
    ax.set_ylabel("long-time population")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    return fig


def fig_decay(tables):
    """Cascade decay: p4, p1 and the two revival-carrying coherences."""
    return _time_panels(
        tables,
        ("p4", "p1", "abs_rho23", "abs_rho14"),
        (r"$p_4$", r"$p_1$", r"$|\rho_{23}|$", r"$|\rho_{14}|$"),
    )


def fig_driven(tables):
    """Driven model: all four populations for each memory rate."""
    return _time_panels(
        tables,
        ("p1", "p2", "p3", "p4"),
        (r"$p_1$", r"$p_2$", r"$p_3$", r"$p_4$"),
    )


FIGURES = {
    "1": fig_decay,
    "3": fig_driven,
    "4": fig_driven,
    "5": _sweep_panel,
    "6": _sweep_panel,
}


def render(figure_id, paths, out):
    """Render one figure from the given CSV paths and write it to *out*."""
    if figure_id not in FIGURES:
        known = ", ".join(sorted(FIGURES))
        raise PlotDataError(f"unknown figure id '{figure_id}' (known: {known})")
    tables = {str(p): load_csv(p) for p in paths}
    fig = FIGURES[figure_id](tables)
    # strip volatile metadata so identical inputs give identical bytes
    meta = {"Date": None} if str(out).endswith((".pdf", ".svg")) else {}
    fig.savefig(out, dpi=150, metadata=meta or None)
    plt.close(fig)
