"""Osteophyte patch datasets from annotated spine radiographs.

Two patch generators (a fixed tiling baseline and per-vertebra SegPatch
crops), a synthetic corpus generator and a small deterministic classifier
to compare them.
"""
__version__ = "0.1.0"
