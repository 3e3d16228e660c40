"""Citrinet CLI command modules."""
