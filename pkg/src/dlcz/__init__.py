"""Simulation and analysis of heralded entanglement between atomic-ensemble memories."""
