"""Relaxed stochastic control on lattices: value solvers, chattering, martingale checks and Markovian selection."""

__version__ = "0.1.0"
