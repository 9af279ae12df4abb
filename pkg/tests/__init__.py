"""Universal representation kit - Test suite."""
