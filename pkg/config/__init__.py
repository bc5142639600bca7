"""Typed defaults for the flow engine and the experiments."""
