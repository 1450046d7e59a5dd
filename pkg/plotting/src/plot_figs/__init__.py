"""Render publication-style figures from nmqsim CSV output files."""

from .figures import FIGURES, PlotDataError, load_csv, render

__all__ = ["FIGURES", "PlotDataError", "load_csv", "render"]
