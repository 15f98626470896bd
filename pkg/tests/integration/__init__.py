"""Integration tests for finegrid."""
