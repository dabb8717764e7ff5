"""First-order Sobolev calculus for stratified measures."""

__version__ = "0.1.0"
