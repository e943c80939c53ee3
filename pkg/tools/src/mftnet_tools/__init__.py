"""Companion tooling for the motor-imagery decoder: dataset conversion to
the canonical trial format and rendering of its interpretability exports."""

__version__ = "0.1.0"
