"""Histology slide segmentation pipeline toolkit.

Modules: slide (tile pyramid), tissue (mask + patch grid), augment
(multi-lens distortion and standard transforms), bridge (classifier
backends), heatmap (stitch/resize/fuse), postprocess (refine + cleanup),
metrics / stats (evaluation), cluster (evolutionary k selection), phantom
(synthetic ground truth), pipeline (orchestration), cli (entry points).
"""

__version__ = "0.1.0"
