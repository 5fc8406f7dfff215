"""Profile, plan and tune desk-scale CPU kernels with a correctness-gated keep/revert loop."""

__version__ = "0.1.0"
