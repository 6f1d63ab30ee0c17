"""Approximate neurosymbolic inference: neural surrogates for weighted model counting."""

__version__ = "0.1.0"
