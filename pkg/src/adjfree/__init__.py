"""Adjoint-free 4D-Var solvers and a Lorenz-96 twin-experiment harness."""

__version__ = "0.1.0"
