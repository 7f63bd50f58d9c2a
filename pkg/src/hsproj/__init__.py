"""Distilling an LLM's hidden states into a teacher embedding space for retrieval.

Modules: ``tensor`` (autograd engine), ``projection_head`` (the mapper),
``losses``, ``trainer``, ``trace_store``, ``retrieval_eval``,
``synthetic_oracle`` (desk-scale stand-in task) and ``cli``.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    DataError,
    HsprojError,
    RuntimeFailure,
)

__all__ = ["ConfigurationError", "DataError", "HsprojError", "RuntimeFailure", "__version__"]
