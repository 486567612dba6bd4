"""Finite-element DNS of coupled Navier-Stokes / Poisson-Nernst-Planck
electrokinetics on adaptively refined quadtree and octree meshes."""

__version__ = "0.1.0"
