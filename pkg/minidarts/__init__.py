"""
minidarts
=========

A desk-scale differentiable architecture search engine: tape autodiff over
numpy, a NAS-BENCH-201-shaped supernet, first-order bilevel training,
operation-magnitude stop criteria and the two-phase softmax dynamics experiment.
"""

__version__ = "0.1.0"
