"""Guided contrastive predictive coding on synthetic phone sequences.

Modules, bottom-up: ``numcore`` (autodiff), ``nets``, ``losses``,
``synthdata``, ``pipeline``, ``evaluate``, ``config``, ``checkpoint``, ``cli``.
"""
__version__ = "0.1.0"
