"""Instance segmentation by coloring: a C-channel network paints every object
with one of several colors so that neighbours differ; instances are the
connected components of the argmax map."""

__version__ = "0.1.0"
