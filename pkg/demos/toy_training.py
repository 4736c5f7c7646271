"""
Training the projection heads
=============================

The default toy run: 200 instances, batches of 32, 16-dimensional features,
all five losses switched on.
"""

import logging

from sista.corpus import CorpusSpec, generate_corpus
from sista.evaluate import alignment_eval, evaluate_retrieval
from sista.features import SistaModel
from sista.train import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

corpus = generate_corpus(CorpusSpec())
cfg = TrainConfig()
before = SistaModel.init(32, 16, seed=cfg.seed)
print("untrained:", evaluate_retrieval(before, corpus).as_dict())

result = train(corpus, before.copy(), cfg)
rows = [r for r in result.metrics if r.split == "train"]
print(f"train total {rows[0].total:.3f} -> {rows[-1].total:.3f}, best epoch {result.best_epoch}")
print("trained:", evaluate_retrieval(result.model, corpus).as_dict())
score = alignment_eval(result.model, corpus)
print(f"pathology hit rate {score.pathology_hit_rate:.3f} (chance {score.chance:.3f})")
