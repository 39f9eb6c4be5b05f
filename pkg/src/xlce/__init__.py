"""Hybrid-field XL-MIMO channel simulation, estimators and benchmarks."""

__version__ = "0.1.0"
