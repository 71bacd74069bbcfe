"""Semantic-aware range-view LiDAR diffusion at desk scale."""
