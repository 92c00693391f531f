"""Multilevel-consistency semi-supervised point-cloud segmentation toolkit.

Provides hierarchical label schemas, perturbation-pair generation,
consistency loss kernels with analytic gradients, part-substitution
augmentation, segmentation metrics, a synthetic shape generator, and a
small trainable pointwise model tying everything together.
"""

from mlcseg.core import (
    UNLABELED,
    Correspondence,
    HierLabels,
    LabelSchema,
    LabeledCloud,
    PartNode,
    PartTree,
    PointCloud,
    ProbField,
    coarsen_labels,
    tree_from_labels,
    validate_schema,
)

__version__ = "0.1.0"

__all__ = [
    "UNLABELED",
    "Correspondence",
    "HierLabels",
    "LabelSchema",
    "LabeledCloud",
    "PartNode",
    "PartTree",
    "PointCloud",
    "ProbField",
    "coarsen_labels",
    "tree_from_labels",
    "validate_schema",
    "__version__",
]
