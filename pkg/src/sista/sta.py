"""Sparse token-level alignment: token-to-patch maps and the token contrastive loss.

For each report token the patch inner products are min-max normalized,
patches at or above a threshold are kept, and the kept scores are
renormalized into convex weights. The weighted patch sum is the token's
cross-modal embedding, which is contrasted against the instance's other
tokens.

The keep/drop decision is a constant gate: gradients flow through the kept
weights (and the min/max entries that define them), never through which
patches are kept.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ParseError, ShapeError
from .features import check_token_importance, cosine_matrix


@dataclass(frozen=True)
class StaConfig:
    sparsity_threshold: float = 0.3
    temperature: float = 0.2
    degenerate_epsilon: float = 1e-9

    def __post_init__(self):
        if not 0 <= self.sparsity_threshold < 1:
            raise ConfigError("sparsity_threshold must lie in [0, 1)")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not self.degenerate_epsilon >= 0:
            raise ConfigError("degenerate_epsilon must be nonnegative")


def token_patch_similarities(token, patches):
    """Raw inner products between one token vector and each patch row."""
    token = np.asarray(token, dtype=np.float64).reshape(-1)
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    if patches.shape[1] != token.size:
        raise ShapeError(f"token dim {token.size} vs patch dim {patches.shape[1]}")
    return patches @ token


def minmax_normalize(s, eps=1e-9):
    """Affine map of ``s`` onto [0, 1]; a flat vector maps to all ones."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    lo, hi = s.min(), s.max()
    if hi - lo < eps:
        return np.ones_like(s)
    return (s - lo) / (hi - lo)


def sparse_select(s_hat, threshold):
    """Indices whose normalized similarity is at least ``threshold``."""
    s_hat = np.asarray(s_hat, dtype=np.float64).reshape(-1)
    return np.flatnonzero(s_hat >= threshold)


def alignment_weights(s_hat, retained):
    """Kept scores divided by their sum; uniform if they sum to zero."""
    vals = np.asarray(s_hat, dtype=np.float64).reshape(-1)[np.asarray(retained)]
    if vals.size == 0:
        raise ConfigError("no retained patches")
    total = vals.sum()
    if total <= 0:
        return np.full(vals.size, 1.0 / vals.size)
    return vals / total


def cross_modal_embedding(weights, retained, patches):
    """Weighted sum of the retained patch rows."""
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    return np.asarray(weights, dtype=np.float64) @ patches[np.asarray(retained)]


@dataclass
class AlignmentMap:
    """Per-token sparse patch weights for one instance.

    ``retained[l]`` lists kept patch indices and ``weights[l]`` the matching
    convex weights; ``raw_similarities`` and ``normalized`` are L x M.
    """

    retained: list
    weights: list
    raw_similarities: np.ndarray
    normalized: np.ndarray

    @property
    def num_tokens(self):
        return self.raw_similarities.shape[0]

    @property
    def num_patches(self):
        return self.raw_similarities.shape[1]

    def top_patch(self, token):
        idx = int(np.argmax(self.weights[token]))
        return int(self.retained[token][idx])


def alignment_map(tokens, patches, cfg=None):
    """Build the :class:`AlignmentMap` for one instance from plain arrays."""
    cfg = cfg or StaConfig()
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    if tokens.shape[1] != patches.shape[1]:
        raise ShapeError("token and patch dims differ")
    raw = tokens @ patches.T
    norm = np.vstack([minmax_normalize(row, cfg.degenerate_epsilon) for row in raw])
    retained, weights = [], []
    for row in norm:
        keep = sparse_select(row, cfg.sparsity_threshold)
        retained.append(keep)
        weights.append(alignment_weights(row, keep))
    return AlignmentMap(retained, weights, raw, norm)


def export_alignment_map(amap):
    """Dense L x M matrix with each token's weights at its retained patches."""
    dense = np.zeros((amap.num_tokens, amap.num_patches))
    for l, (keep, w) in enumerate(zip(amap.retained, amap.weights)):
        dense[l, keep] = w
    return dense


def write_heatmap(matrix, path):
    """Write ``L M`` then one space-separated row of weights per token."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = [f"{matrix.shape[0]} {matrix.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in matrix]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_heatmap(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty heatmap file", 1)
    try:
        n_rows, n_cols = (int(x) for x in lines[0].split(" "))
    except ValueError:
        raise ParseError("header must be 'L M'", 1) from None
    if len(lines) - 1 != n_rows:
        raise ParseError(f"expected {n_rows} rows, found {len(lines) - 1}", len(lines))
    out = np.zeros((n_rows, n_cols))
    for i, line in enumerate(lines[1:]):
        parts = line.split(" ")
        if len(parts) != n_cols:
            raise ParseError(f"expected {n_cols} values, found {len(parts)}", i + 2)
        try:
            out[i] = [float(x) for x in parts]
        except ValueError:
            raise ParseError("non-numeric weight", i + 2) from None
    return out


def _minmax_rows(s, eps):
    """Differentiable row-wise min-max normalization (flat rows -> ones, no gradient)."""
    sv = s.value
    lo_idx = sv.argmin(axis=1)
    hi_idx = sv.argmax(axis=1)
    rows = np.arange(sv.shape[0])
    lo = sv[rows, lo_idx][:, None]
    span = sv[rows, hi_idx][:, None] - lo
    flat = (span < eps).reshape(-1)
    safe_span = np.where(flat[:, None], 1.0, span)
    out = np.where(flat[:, None], 1.0, (sv - lo) / safe_span)

    def vjp(g):
        g = np.where(flat[:, None], 0.0, g)
        grad = g / safe_span
        # d/dlo and d/dhi of (s - lo) / (hi - lo)
        d_lo = (-(g / safe_span) + (g * (sv - lo)) / safe_span ** 2).sum(axis=1)
        d_hi = (-(g * (sv - lo)) / safe_span ** 2).sum(axis=1)
        np.add.at(grad, (rows, lo_idx), d_lo)
        np.add.at(grad, (rows, hi_idx), d_hi)
        return (grad,)

    return ad.primitive(out, (s,), vjp)


def cross_modal_embeddings(tokens, patches, cfg):
    """Differentiable cross-modal embeddings for all tokens of one instance."""
    tokens, patches = ad.tensor(tokens), ad.tensor(patches)
    if tokens.cols != patches.cols:
        raise ShapeError(f"token dim {tokens.cols} vs patch dim {patches.cols}")
    s_hat = _minmax_rows(tokens @ patches.T, cfg.degenerate_epsilon)
    gate = (s_hat.value >= cfg.sparsity_threshold).astype(np.float64)
    kept = s_hat * gate
    weights = kept / kept.sum(axis=1)
    return weights @ patches


def fallback_token_importance(tokens, report_global):
    """Softmax over tokens of cos(token, report), rescaled to sum to L."""
    sims = cosine_matrix(ad.tensor(tokens).value, ad.as_matrix(np.asarray(
        report_global.value if isinstance(report_global, ad.Tensor) else report_global))).value
    w = ad.row_softmax(sims.T).value.reshape(-1)
    return w * w.size


def instance_sta_loss(tokens, patches, importance, cfg):
    """Importance-weighted token contrastive loss of one instance (both directions)."""
    tokens = ad.tensor(tokens)
    length = tokens.rows
    u = check_token_importance(importance, length)[:, None]
    w_hat = cross_modal_embeddings(tokens, patches, cfg)
    sims = cosine_matrix(tokens, w_hat)
    eye = np.eye(length)
    t2p = -(ad.row_log_softmax(sims, cfg.temperature) * (eye * u)).sum()
    p2t = -(ad.row_log_softmax(sims.T, cfg.temperature) * (eye * u)).sum()
    return (t2p + p2t) / float(length)


def sta_loss(batch, cfg=None):
    """Sparse token alignment loss averaged over instances and both directions."""
    cfg = cfg or StaConfig()
    if not batch:
        raise ShapeError("sta_loss needs at least one instance")
    total = None
    for pair in batch:
        importance = pair.token_importance
        if importance is None:
            importance = fallback_token_importance(pair.tokens, pair.report_global)
        term = instance_sta_loss(pair.tokens, pair.patches, importance, cfg)
        total = term if total is None else total + term
    return total / (2.0 * len(batch))
