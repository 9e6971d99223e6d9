"""Static voltage-stability analysis: P-V curves, contingency sweeps and critical buses."""

__version__ = "0.1.0"
