"""Least-squares convex regression with shape constraints."""
