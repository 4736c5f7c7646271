"""
Soft labels for look-alike reports
==================================

Two reports in a batch are near copies of each other. Hard-label InfoNCE
pushes image 0 away from report 1 anyway; the soft-label targets give that
pair a small share of the probability mass instead.
"""

import numpy as np

from sista.instance import (InstanceLossConfig, SemanticMatrix, build_semantic_matrix,
                            sia_loss)

rng = np.random.default_rng(0)
reports = rng.normal(size=(4, 8))
reports[1] = reports[0] + 0.02 * rng.normal(size=8)
images = reports + 0.3 * rng.normal(size=(4, 8))

semantic = build_semantic_matrix(reports)
print("pseudo-positive pairs:\n", semantic.pseudo_positive_mask.astype(int))
print("soft targets:\n", semantic.targets.round(3))

hard = sia_loss(images, reports, SemanticMatrix.identity(4)).item()
soft = sia_loss(images, reports, semantic).item()
literal = sia_loss(images, reports, semantic, cfg=InstanceLossConfig(variant="literal")).item()
print(f"hard-label loss {hard:.4f}")
print(f"soft-label loss {soft:.4f}")
print(f"literal weighted-partition loss {literal:.4f}")
