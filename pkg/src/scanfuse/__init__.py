"""Globally consistent RGB-D reconstruction.

Hierarchical sparse-then-dense pose optimization over all frames, fused into a
spatially hashed truncated signed distance volume that supports symmetric
integration and de-integration, so the model is corrected on the fly as pose
estimates improve.
"""

__version__ = "0.1.0"
