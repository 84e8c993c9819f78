"""Scenario-transferable insertion-area prediction pipeline.

Static/dynamic environment representations, semantic graphs, the graph
network predictor with a Gaussian-mixture head, a numpy reverse-mode
autodiff engine for training, and a synthetic scenario simulator.
"""

__version__ = "0.1.0"
