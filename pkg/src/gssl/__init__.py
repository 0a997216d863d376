"""Graph-based semi-supervised learning: Laplace and p-Laplace learning on random geometric graphs."""
__version__ = "0.1.0"
