"""pointseg: weakly supervised 3D segmentation from seven-point annotations.

Two training stages: (1) geodesic seed expansion turns the points into a
partial label map used with partially-supervised, multi-view CRF and
region-variance losses; (2) two asymmetric networks refine each other via
self-training on cached pseudo labels plus temperature-softened cross
distillation.
"""

__version__ = "0.1.0"
