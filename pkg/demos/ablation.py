"""
Loss ablation
=============

One model per toggle row: instance losses alone, plus token alignment, plus
the intra-modal losses, and everything together.
"""

import sys

from sista.corpus import CorpusSpec, generate_corpus
from sista.evaluate import ablation_sweep, write_table
from sista.train import TrainConfig

corpus = generate_corpus(CorpusSpec())
rows = ablation_sweep(corpus, TrainConfig(epochs=10), dim=16, workers=4)
for row in rows:
    print(f"{row['row']:<14} recall@1 {row['recall@1']:.3f}  cluster_recall@1 "
          f"{row['cluster_recall@1']:.3f}  hit rate {row['pathology_hit_rate']:.3f}")
if len(sys.argv) > 1:
    write_table(rows, sys.argv[1])
