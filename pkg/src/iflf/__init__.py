"""Invariant feature learning for cross-domain human activity recognition.

Alternating meta-training of a shared feature extractor and per-domain
softmax heads, DTW-based activity similarity, and few-shot adaptation to
unseen subjects or devices.
"""

__version__ = "0.1.0"
