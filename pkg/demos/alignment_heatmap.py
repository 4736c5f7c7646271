"""
Token-to-patch alignment maps
=============================

Each report token keeps only the patches whose min-max normalized similarity
clears the sparsity threshold, then mixes them with renormalized weights.
The dense export is what a plotting tool would draw as a heatmap.
"""

import sys

import numpy as np

from sista.corpus import CorpusSpec, generate_corpus
from sista.sta import alignment_map, export_alignment_map, write_heatmap

# the worked example: similarities 1, 2, 4 keep patches 1 and 2
amap = alignment_map([[1.0, 0.0]], [[1.0, 0.0], [2.0, 0.0], [4.0, 0.0]])
print("normalized:", amap.normalized[0], "kept:", amap.retained[0], "weights:", amap.weights[0])

# raw synthetic features already carry the planted token/patch pairs
inst = generate_corpus(CorpusSpec(num_instances=1, num_clusters=1, seed=4))[0]
dense = export_alignment_map(alignment_map(inst.tokens, inst.patches))
np.set_printoptions(precision=2, suppress=True)
print("token pathology ids:", inst.token_pathology)
print("patch pathology ids:", inst.patch_pathology)
print(dense)

if len(sys.argv) > 1:
    write_heatmap(dense, sys.argv[1])
    print("wrote", sys.argv[1])
