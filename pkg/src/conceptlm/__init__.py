"""Concept-level language modeling, desk scale and fully self-contained."""

__version__ = "0.1.0"


def version_string() -> str:
    return f"conceptlm-{__version__}"
