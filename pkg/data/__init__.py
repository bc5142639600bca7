"""Domain models, run configuration and errors."""
