"""
Numerical core: depth processing, registration, Poisson reconstruction and volume.
"""
