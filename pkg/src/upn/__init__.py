"""Unified personalised / non-personalised speech enhancement at desk scale.

One recurrent enhancer serves both modes. A per-frame binary flag selects
target-speaker extraction (flag 1, conditioned on an enrollment embedding) or
plain noise suppression (flag 0, all-zero condition).
"""

__version__ = "0.1.0"
