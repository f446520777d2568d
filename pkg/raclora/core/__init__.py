"""Numerical core: linear algebra, sketches, objectives, chains and the federated protocol."""
