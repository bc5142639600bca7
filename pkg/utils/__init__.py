"""Propagators, Taylor arithmetic, oracles and bound formulas."""
