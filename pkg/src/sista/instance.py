"""Language-guided soft targets and the four instance-level contrastive losses."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DegenerateInputError, ShapeError
from .features import cosine_matrix

VARIANTS = ("canonical", "literal")


@dataclass(frozen=True)
class InstanceLossConfig:
    temperature: float = 0.2
    pseudo_positive_threshold: float = 0.9
    soft_label_value: float = 0.1
    # "literal" keeps the pair weights inside the partition function instead
    # of using them as a target distribution.
    variant: str = "canonical"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.pseudo_positive_threshold <= 1:
            raise ConfigError("pseudo_positive_threshold must lie in (0, 1]")
        if not 0 < self.soft_label_value < 1:
            raise ConfigError("soft_label_value must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class SemanticMatrix:
    """Row-stochastic soft targets plus the pseudo-positive mask.

    ``raw`` keeps the unnormalized scores (1 on the diagonal, the soft label
    on pseudo-positives, 0 elsewhere).
    """

    targets: np.ndarray
    pseudo_positive_mask: np.ndarray
    raw: np.ndarray

    @property
    def size(self):
        return self.targets.shape[0]

    @classmethod
    def identity(cls, size):
        eye = np.eye(size)
        return cls(eye, np.zeros((size, size), dtype=bool), eye.copy())

    def literal_weights(self, soft_label_value):
        """Pair weights for the literal variant: 1, soft label, or 1 for negatives."""
        w = np.ones_like(self.raw)
        w[self.pseudo_positive_mask] = soft_label_value
        return w


def build_semantic_matrix(report_globals, cfg=None):
    """Targets from report-report cosine similarity in the batch.

    Gradients never flow through the result; it is rebuilt from plain values.
    """
    cfg = cfg or InstanceLossConfig()
    t = np.asarray(report_globals.value if isinstance(report_globals, ad.Tensor) else report_globals,
                   dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 1:
        raise ShapeError("report_globals must be a nonempty B x d matrix")
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero report feature")
    unit = t / norms
    sims = unit @ unit.T
    mask = sims >= cfg.pseudo_positive_threshold
    np.fill_diagonal(mask, False)
    raw = np.where(mask, cfg.soft_label_value, 0.0)
    np.fill_diagonal(raw, 1.0)
    targets = raw / raw.sum(axis=1, keepdims=True)
    return SemanticMatrix(targets, mask, raw)


def soft_infonce(sim_row, target_row, temperature):
    """Cross-entropy of ``softmax(sim_row / temperature)`` against a target row."""
    sim = ad.as_matrix(sim_row)
    target = ad.as_matrix(target_row)
    if sim.shape != target.shape or sim.shape[0] != 1:
        raise ShapeError("sim_row and target_row must be vectors of equal length")
    if abs(target.sum() - 1.0) > 1e-6:
        raise ContractError("target row must sum to 1")
    return float(-(target * ad.row_log_softmax(sim, temperature).value).sum())


def soft_cross_entropy(logits, targets, temperature):
    """Mean over rows of ``-sum_k targets[i,k] * log softmax(logits[i]/tau)[k]``."""
    logp = ad.row_log_softmax(logits, temperature)
    return -(logp * targets).sum() / float(logp.rows)


def _directional_pair_loss(a, b, semantic, cfg):
    a, b = ad.tensor(a), ad.tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"feature batches differ in shape: {a.shape} vs {b.shape}")
    if semantic.size != a.rows:
        raise ShapeError(f"semantic matrix is {semantic.size}x{semantic.size} for a batch of {a.rows}")
    sims = cosine_matrix(a, b)
    if cfg.variant == "literal":
        # -log(w_ii e_ii / sum_k w_ik e_ik) is one-hot CE on logits shifted by tau*log w
        shift = cfg.temperature * np.log(semantic.literal_weights(cfg.soft_label_value))
        eye = np.eye(a.rows)
        forward = soft_cross_entropy(sims + shift, eye, cfg.temperature)
        backward = soft_cross_entropy(sims.T + shift, eye, cfg.temperature)
    else:
        forward = soft_cross_entropy(sims, semantic.targets, cfg.temperature)
        backward = soft_cross_entropy(sims.T, semantic.targets, cfg.temperature)
    return (forward + backward) * 0.5


def _cfg_for(temperature, cfg):
    cfg = cfg or InstanceLossConfig()
    if temperature is not None and temperature != cfg.temperature:
        cfg = InstanceLossConfig(temperature, cfg.pseudo_positive_threshold,
                                 cfg.soft_label_value, cfg.variant)
    return cfg


def sia_loss(image_globals, report_globals, semantic, temperature=None, cfg=None):
    """Cross-modal image/report loss, averaged over both directions."""
    return _directional_pair_loss(image_globals, report_globals, semantic, _cfg_for(temperature, cfg))


def sia_aug_loss(image_globals_aug, report_globals_aug, semantic, temperature=None, cfg=None):
    """:func:`sia_loss` on augmented views; ``semantic`` comes from the originals."""
    return _directional_pair_loss(image_globals_aug, report_globals_aug, semantic,
                                  _cfg_for(temperature, cfg))


def siva_loss(image_globals, image_globals_aug, semantic, temperature=None, cfg=None):
    return _directional_pair_loss(image_globals, image_globals_aug, semantic,
                                  _cfg_for(temperature, cfg))


def sila_loss(report_globals, report_globals_aug, semantic, temperature=None, cfg=None):
    return _directional_pair_loss(report_globals, report_globals_aug, semantic,
                                  _cfg_for(temperature, cfg))
