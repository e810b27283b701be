"""Contrastive imitation learning at desk scale."""
