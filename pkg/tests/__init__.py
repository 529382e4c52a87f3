"""Test suite for symmetry-cad."""
