"""Flow engine, OPE coefficients and experiment drivers."""
