"""
sepfilter Package

Risk-sensitive benchmarked asset management under partial observation:
model specifications, Monte-Carlo simulation, finite-dimensional filters,
criterion estimators under the original, control and reference measures,
and a density solver for the separated problem.

Version: 0.3.0
"""

__version__ = "0.3.0"
__title__ = "sepfilter"
__description__ = "Filtering and separation toolkit for risk-sensitive investment under partial observation"
__author__ = "sepfilter developers"

__all__ = ["__version__", "__title__", "__description__", "__author__"]
