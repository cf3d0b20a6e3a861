"""Deterministic, desk-scale CLIP training with a hyperparameter ledger."""

from __future__ import annotations

__version__ = "0.1.0"
