"""
medattn - attention-based multi-label diagnosis prediction
Core package initialization
"""

__version__ = "1.0.0"
__author__ = "medattn Development Team"
