"""Run configuration and text formatting utilities."""
