"""Panel regressions for policy evaluation, with influence, placebo, and SIR validation tools."""

__version__ = "0.1.0"
