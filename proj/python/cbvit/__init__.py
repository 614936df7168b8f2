"""Context-broadcasting operators and attention-density diagnostics.

Thin numpy-facing wrapper over the C++ core. The heavy machinery (the ViT
itself, training, sweeps) lives behind the `cbvit` command-line tool; this
module exposes the pure operators for quick interactive checks.
"""

try:
    from ._cbvit import *  # noqa: F401,F403  (installed package layout)
    from ._cbvit import __doc__ as _core_doc
except ImportError:  # pragma: no cover - in-tree builds put _cbvit on sys.path
    from _cbvit import *  # noqa: F401,F403
    from _cbvit import __doc__ as _core_doc

__all__ = [
    "cb",
    "cb_s",
    "cb_gate",
    "cb_hybrid",
    "aggregate_context",
    "softmax_rows",
    "gelu",
    "layer_norm",
    "cosine_lr",
    "attention_entropy",
    "softmax_jacobian",
    "nuclear_norm_analytic",
    "verify_uniform_maximality",
    "relative_distance",
    "scaling_stats",
    "center_occlusion",
]
