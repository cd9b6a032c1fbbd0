"""Learned fact retrieval for knowledge-based visual question answering.

Submodules are imported directly (``factrank.kb``, ``factrank.scorer``,
...); this package root stays import-light so the CLI can configure BLAS
threading before numpy loads.
"""

__version__ = "0.1.0"
