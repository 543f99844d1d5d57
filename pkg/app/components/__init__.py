"""Output components: attention heatmaps."""
