"""
Hard versus soft labels on a tightly clustered corpus
=====================================================

Two models start from the same weights and see the same batches. The only
difference is whether near-duplicate reports count as partial positives.
"""

from sista.corpus import CorpusSpec
from sista.evaluate import false_negative_experiment
from sista.train import TrainConfig

spec = CorpusSpec(cluster_spread=0.15)
result = false_negative_experiment(spec, TrainConfig(), dim=16)
print("hard:", result.hard.as_dict())
print("soft:", result.soft.as_dict())
print("soft - hard:", {k: round(v, 4) for k, v in result.deltas().items()})
