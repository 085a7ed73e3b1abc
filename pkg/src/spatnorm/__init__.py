"""Normality testing for spatially dependent data.

Classical normality statistics are aggregated by a trained neural-network
classifier whose decision threshold adapts to the estimated strength of
spatial dependence.
"""

__version__ = "0.1.0"
