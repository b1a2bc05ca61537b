"""Numerical operator systems: cb norms, ucp approximation, amalgamation and chain builders."""
