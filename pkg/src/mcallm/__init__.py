"""Context-aware prediction of group interaction sociograms.

Per-second multimodal interaction streams become per-window sociograms,
multi-level context is rendered into prompts, a completion backend (or a
baseline) predicts the next window, and predictions are scored for
structural fidelity in single-step and autoregressive runs.
"""

__version__ = "0.1.0"
