"""Wiener chaos expansions of Schwartz distributions composed with diffusions.

Modules
-------
hermite
    Hermite polynomials, normalized Hermite functions and Gauss-Hermite rules.
distcat
    Distribution catalog, Gaussian pairings and mollifiers.
chaos
    Chaos vectors, Sobolev norms, scaling and smoothing identities, tail fits.
diffusion
    Lamperti map, flows, transition kernels, scale/speed, Bessel kernels.
localtime
    Local time chaos norms and Hoelder bounds.
mcverify
    Monte Carlo checks of the duality pairing and the Ito formula.
cli
    Command line experiment runner.
"""
__version__ = "0.1.0"
