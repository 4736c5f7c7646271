"""
Planted clusters and pathologies
================================

Tight clusters make unpaired reports almost identical, which is exactly the
false-negative situation. Wider clusters remove them.
"""

import numpy as np

from sista.corpus import CorpusSpec, generate_corpus


def same_cluster_fraction(corpus, threshold=0.9):
    reports = np.vstack([r.report_global for r in corpus])
    clusters = np.array([r.cluster_id for r in corpus])
    same = (clusters[:, None] == clusters[None, :]) & ~np.eye(len(corpus), dtype=bool)
    return float(np.mean((reports @ reports.T)[same] >= threshold))


for spread in (0.05, 0.15, 0.5, 1.0):
    corpus = generate_corpus(CorpusSpec(cluster_spread=spread))
    print(f"spread {spread:4}: same-cluster report pairs above 0.9 = {same_cluster_fraction(corpus):.3f}")

inst = generate_corpus(CorpusSpec(num_instances=1, num_clusters=1))[0]
print("token importance:", inst.token_importance.round(3), "sum", inst.token_importance.sum())
for l, p in enumerate(inst.token_pathology):
    if p >= 0:
        best = int(np.argmax(inst.patches @ inst.tokens[l]))
        print(f"token {l} (pathology {p}) -> best patch {best} (pathology {inst.patch_pathology[best]})")
