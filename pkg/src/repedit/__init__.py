"""Representation-level knowledge editing on a toy transformer.

Modules: ``numerics`` (autodiff helpers, orthonormalization, AdamW),
``tinylm`` (character transformer), ``interventions`` (ReFT/BaFT
operators), ``objectives`` (losses), ``knowledge`` (synthetic facts),
``editing`` (protocols), ``evaluation`` (metrics and profiles),
``theorylab`` (locality-limit checks) and ``cli``.
"""

__version__ = "0.1.0"
