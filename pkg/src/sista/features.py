"""Shared embedding space: normalization, cosine similarity, projection heads."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DegenerateInputError, ShapeError

DEFAULT_DIM = 128


def _vector(v):
    arr = np.asarray(v.value if isinstance(v, ad.Tensor) else v, dtype=np.float64)
    return arr.reshape(-1)


def normalize(v):
    """Return ``v / ||v||`` as a 1-D array."""
    arr = _vector(v)
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize the zero vector")
    return arr / norm


def cosine_sim(u, v):
    """Cosine similarity of two nonzero vectors, clipped to [-1, 1]."""
    a, b = normalize(u), normalize(v)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: lengths {a.size} and {b.size} differ")
    return float(np.clip(a @ b, -1.0, 1.0))


def cosine_matrix(a, b):
    """Pairwise cosine similarities between the rows of ``a`` and ``b``.

    Differentiable: entry ``[i, k]`` is phi(a_i, b_k).
    """
    a, b = ad.tensor(a), ad.tensor(b)
    if a.cols != b.cols:
        raise ShapeError(f"cosine_matrix: feature dims {a.cols} and {b.cols} differ")
    return ad.normalize_rows(a) @ ad.normalize_rows(b).T


class ProjectionHead:
    """Two-layer map ``raw -> d`` followed by row normalization.

    ``y = tanh(x W1 + b1) W2 + b2 + x Ws``. The linear shortcut ``Ws`` lets the
    head start as an exact (padded/truncated) identity via :meth:`identity`.
    """

    param_names = ("w1", "b1", "w2", "b2", "ws")

    def __init__(self, params):
        self.params = {k: np.array(params[k], dtype=np.float64) for k in self.param_names}
        w1, w2, ws = self.params["w1"], self.params["w2"], self.params["ws"]
        if w1.shape[1] != w2.shape[0] or ws.shape != (w1.shape[0], w2.shape[1]):
            raise ShapeError("inconsistent projection head parameter shapes")

    @property
    def in_dim(self):
        return self.params["w1"].shape[0]

    @property
    def out_dim(self):
        return self.params["w2"].shape[1]

    @classmethod
    def init(cls, in_dim, out_dim, rng, hidden_dim=None):
        hidden_dim = hidden_dim or max(in_dim, out_dim)
        return cls({
            "w1": rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden_dim)),
            "b1": np.zeros((1, hidden_dim)),
            "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, out_dim)),
            "b2": np.zeros((1, out_dim)),
            "ws": rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim)),
        })

    @classmethod
    def identity(cls, in_dim, out_dim, hidden_dim=None):
        hidden_dim = hidden_dim or max(in_dim, out_dim)
        return cls({
            "w1": np.zeros((in_dim, hidden_dim)),
            "b1": np.zeros((1, hidden_dim)),
            "w2": np.zeros((hidden_dim, out_dim)),
            "b2": np.zeros((1, out_dim)),
            "ws": np.eye(in_dim, out_dim),
        })

    def copy(self):
        return ProjectionHead(self.params)

    def forward(self, raw, params=None):
        """Project rows of ``raw``; ``params`` may hold tape variables."""
        p = params if params is not None else self.params
        raw = ad.tensor(raw)
        if raw.cols != self.in_dim:
            raise ShapeError(f"head expects raw dim {self.in_dim}, got {raw.cols}")
        hidden = ad.tanh(raw @ p["w1"] + p["b1"])
        return ad.normalize_rows(hidden @ p["w2"] + p["b2"] + raw @ p["ws"])


def project(raw, head):
    """Project one raw vector to a unit-norm feature vector."""
    out = head.forward(ad.as_matrix(_vector(raw)))
    return out.value.reshape(-1)


HEAD_NAMES = ("image_global", "image_local", "text_global", "text_local")


class SistaModel:
    """Four projection heads: global/local for each modality."""

    def __init__(self, heads):
        missing = set(HEAD_NAMES) - set(heads)
        if missing:
            raise ConfigError(f"model is missing heads {sorted(missing)}")
        self.heads = {name: heads[name] for name in HEAD_NAMES}

    @classmethod
    def init(cls, raw_dim, dim, seed, hidden_dim=None):
        rng = np.random.default_rng(seed)
        return cls({name: ProjectionHead.init(raw_dim, dim, rng, hidden_dim) for name in HEAD_NAMES})

    @property
    def raw_dim(self):
        return self.heads["image_global"].in_dim

    @property
    def dim(self):
        return self.heads["image_global"].out_dim

    def named_params(self):
        """Flat ``{"head.param": array}`` view (shares memory with the heads)."""
        return {
            f"{h}.{k}": self.heads[h].params[k]
            for h in HEAD_NAMES
            for k in ProjectionHead.param_names
        }

    def load_params(self, flat):
        for h in HEAD_NAMES:
            for k in ProjectionHead.param_names:
                self.heads[h].params[k] = np.array(flat[f"{h}.{k}"], dtype=np.float64)

    def copy(self):
        return SistaModel({h: head.copy() for h, head in self.heads.items()})


@dataclass
class InstancePair:
    """Projected features of one image-report sample.

    ``patches`` is M x d, ``tokens`` is L x d. Fields may be arrays or
    tensors. ``token_importance`` may be None, in which case the loss falls
    back to report-similarity weights.
    """

    image_global: object
    patches: object
    report_global: object
    tokens: object
    image_global_aug: object
    report_global_aug: object
    token_importance: Optional[np.ndarray] = None


def check_token_importance(weights, length):
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != length:
        raise ShapeError(f"token_importance has {w.size} entries for {length} tokens")
    if np.any(w < 0) or abs(w.sum() - length) > 1e-9 * max(1, length):
        raise ConfigError("token_importance must be nonnegative and sum to the token count")
    return w


@dataclass
class EncodedBatch:
    """Batch features as tensors (B x d globals, per-instance local blocks)."""

    image_global: ad.Tensor
    report_global: ad.Tensor
    image_global_aug: ad.Tensor
    report_global_aug: ad.Tensor
    pairs: list


def encode(model, instances, params=None):
    """Run the four heads over a list of raw instances.

    ``params`` maps flat parameter names to tensors (tape variables during
    training); by default the model's arrays are used as constants.
    """
    if not instances:
        raise ConfigError("cannot encode an empty batch")
    if params is None:
        params = model.named_params()
    head_params = {
        h: {k: params[f"{h}.{k}"] for k in ProjectionHead.param_names} for h in HEAD_NAMES
    }

    def run(head, raw):
        return model.heads[head].forward(raw, head_params[head])

    img = run("image_global", np.vstack([r.image_global for r in instances]))
    img_aug = run("image_global", np.vstack([r.image_global_aug for r in instances]))
    rep = run("text_global", np.vstack([r.report_global for r in instances]))
    rep_aug = run("text_global", np.vstack([r.report_global_aug for r in instances]))
    patches = run("image_local", np.vstack([r.patches for r in instances]))
    tokens = run("text_local", np.vstack([r.tokens for r in instances]))

    pairs = []
    p0 = t0 = 0
    for i, r in enumerate(instances):
        m, length = r.patches.shape[0], r.tokens.shape[0]
        pairs.append(InstancePair(
            image_global=img[i:i + 1],
            patches=patches[p0:p0 + m],
            report_global=rep[i:i + 1],
            tokens=tokens[t0:t0 + length],
            image_global_aug=img_aug[i:i + 1],
            report_global_aug=rep_aug[i:i + 1],
            token_importance=r.token_importance,
        ))
        p0 += m
        t0 += length
    return EncodedBatch(img, rep, img_aug, rep_aug, pairs)
