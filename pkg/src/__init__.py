"""Package initialization for the bundle-forge pipeline."""
