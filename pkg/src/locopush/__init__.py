"""Desk-scale hierarchical box-pushing simulator and PPO training stack."""

__version__ = "0.1.0"
