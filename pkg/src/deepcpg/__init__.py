"""Kuramoto-CPG action layers trained with TD3, a toy crawler and a modular extension."""

__version__ = "0.1.0"
