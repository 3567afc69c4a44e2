"""Hierarchical knowledge distillation for multilingual translation.

Bilingual teachers are distilled into one teacher-assistant per language
cluster, and those teacher-assistants are distilled into a single
multilingual student whose per-batch teacher weights follow the
teacher-assistants' perplexities.
"""

__version__ = "0.1.0"
