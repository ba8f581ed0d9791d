"""Fluorescence lifetime estimation with 1-D adder networks."""
