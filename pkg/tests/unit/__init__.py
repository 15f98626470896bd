"""Unit tests for finegrid."""
