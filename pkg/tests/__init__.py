"""finegrid test suite."""
