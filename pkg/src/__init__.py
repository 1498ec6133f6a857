"""
langsim
Language similarity measures for cross-lingual speech transfer.
"""

__version__ = "1.0.0"
