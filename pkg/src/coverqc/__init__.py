"""coverqc: coverage quality control for short-axis cardiac MR stacks.

Pipeline: carve labelled 3-slice stacks from cine volumes, train a small 3D
CNN per task (apex / basal) to detect the boundary slice, explain each
prediction with a superpixel surrogate, refine predicted negatives on the
salient region (optionally with a dedicated segmenter), and report 5-fold
cross-validated metrics.
"""

__version__ = "0.1.0"
