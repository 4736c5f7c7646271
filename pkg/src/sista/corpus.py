"""Synthetic paired image/report corpora with planted clusters and pathologies.

Each instance draws a latent vector ``z = center[cluster] + spread * noise``.
The raw report global is ``normalize(z)`` and the raw image global is
``normalize(Q z)`` for a fixed random rotation ``Q``, so images and reports
live in different coordinates but share content. Small ``cluster_spread`` therefore makes unpaired reports from one
cluster nearly identical (manufactured false negatives).

Pathology ``p`` owns a random unit direction ``g_p``. A pathology token is
``strength * g_p + noise`` and each of its planted patches is
``strength * g_p + noise``; filler tokens and background patches are
``background_noise`` isotropic noise.
"""

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ParseError

MAGIC = "SISTA-CORPUS v1"


@dataclass(frozen=True)
class CorpusSpec:
    num_instances: int = 200
    raw_dim: int = 32
    num_clusters: int = 4
    cluster_spread: float = 0.5
    patches_per_image: int = 8
    tokens_per_report: int = 6
    num_pathology_tokens_per_instance: int = 2
    num_pathologies: int = 6
    patches_per_pathology: int = 1
    pathology_signal_strength: float = 1.0
    background_noise: float = 0.35
    augment_noise: float = 0.1
    importance_ratio: float = 3.0
    seed: int = 0

    def validate(self):
        if self.num_instances < 0:
            raise ConfigError("num_instances must be nonnegative")
        if self.raw_dim < 1:
            raise ConfigError("raw_dim must be positive")
        if self.num_clusters < 1 or (self.num_instances and self.num_clusters > self.num_instances):
            raise ConfigError("num_clusters must be in [1, num_instances]")
        if self.tokens_per_report < 1 or self.patches_per_image < 1:
            raise ConfigError("tokens_per_report and patches_per_image must be positive")
        if self.num_pathology_tokens_per_instance > self.tokens_per_report:
            raise ConfigError("more pathology tokens than tokens_per_report")
        if self.num_pathology_tokens_per_instance > self.num_pathologies:
            raise ConfigError("more pathology tokens per instance than num_pathologies")
        if self.num_pathology_tokens_per_instance * self.patches_per_pathology > self.patches_per_image:
            raise ConfigError("planted patches exceed patches_per_image")
        for name in ("cluster_spread", "pathology_signal_strength", "background_noise",
                     "augment_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.importance_ratio <= 0:
            raise ConfigError("importance_ratio must be positive")
        return self


@dataclass
class RawInstance:
    """One raw sample. ``token_pathology``/``patch_pathology`` hold -1 for filler."""

    cluster_id: int
    image_global: np.ndarray
    patches: np.ndarray
    report_global: np.ndarray
    tokens: np.ndarray
    token_importance: np.ndarray
    image_global_aug: np.ndarray
    report_global_aug: np.ndarray
    token_pathology: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    patch_pathology: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __eq__(self, other):
        if not isinstance(other, RawInstance):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self)
        )


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _unit_rows(m):
    return np.vstack([_unit(r) for r in m])


def augment_instance(inst, augment_noise, seed):
    """Perturbed, renormalized copies of the raw image and report globals."""
    if augment_noise < 0:
        raise ConfigError("augment_noise must be nonnegative")
    rng = np.random.default_rng(seed)
    return _perturb(inst.image_global, inst.report_global, augment_noise, rng)


def _perturb(image_global, report_global, scale, rng):
    dim = image_global.size
    noise = rng.normal(0.0, 1.0 / np.sqrt(dim), (2, dim))
    if scale == 0:
        return image_global.copy(), report_global.copy()
    return _unit(image_global + scale * noise[0]), _unit(report_global + scale * noise[1])


def generate_corpus(spec):
    """Draw ``spec.num_instances`` instances from one seeded random stream."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.raw_dim
    centers = _unit_rows(rng.normal(size=(spec.num_clusters, d)))
    rotation, _ = np.linalg.qr(rng.normal(size=(d, d)))
    pathology_dirs = _unit_rows(rng.normal(size=(spec.num_pathologies, d)))
    iso = 1.0 / np.sqrt(d)

    corpus = []
    for i in range(spec.num_instances):
        # every cluster is populated before any repeats
        cluster = i % spec.num_clusters if i < spec.num_clusters else int(rng.integers(spec.num_clusters))
        z = centers[cluster] + spec.cluster_spread * rng.normal(0.0, iso, d)
        report = _unit(z)
        image = _unit(rotation @ z)

        n_path = spec.num_pathology_tokens_per_instance
        chosen = rng.choice(spec.num_pathologies, size=n_path, replace=False)
        token_slots = rng.choice(spec.tokens_per_report, size=n_path, replace=False)
        patch_slots = rng.choice(spec.patches_per_image, size=n_path * spec.patches_per_pathology,
                                 replace=False).reshape(n_path, spec.patches_per_pathology)

        tokens = rng.normal(0.0, spec.background_noise * iso, (spec.tokens_per_report, d))
        patches = rng.normal(0.0, spec.background_noise * iso, (spec.patches_per_image, d))
        token_path = np.full(spec.tokens_per_report, -1, dtype=int)
        patch_path = np.full(spec.patches_per_image, -1, dtype=int)
        for p, t_slot, p_slots in zip(chosen, token_slots, patch_slots):
            tokens[t_slot] += spec.pathology_signal_strength * pathology_dirs[p]
            patches[p_slots] += spec.pathology_signal_strength * pathology_dirs[p]
            token_path[t_slot] = p
            patch_path[p_slots] = p

        importance = np.where(token_path >= 0, spec.importance_ratio, 1.0)
        importance = importance * spec.tokens_per_report / importance.sum()

        image_aug, report_aug = _perturb(image, report, spec.augment_noise, rng)
        corpus.append(RawInstance(
            cluster_id=cluster,
            image_global=image,
            patches=patches,
            report_global=report,
            tokens=tokens,
            token_importance=importance,
            image_global_aug=image_aug,
            report_global_aug=report_aug,
            token_pathology=token_path,
            patch_pathology=patch_path,
        ))
    return corpus


# --- file format -----------------------------------------------------------

_SPEC_TYPES = {f.name: f.type for f in fields(CorpusSpec)}


def _fmt(values):
    return " ".join(repr(float(x)) for x in np.asarray(values, dtype=np.float64).reshape(-1))


def _fmt_int(values):
    return " ".join(str(int(x)) for x in np.asarray(values).reshape(-1))


def write_corpus(corpus, path, spec=None):
    """Serialize ``corpus`` (and optionally its spec) as versioned text."""
    lines = [MAGIC]
    spec_items = dataclasses.asdict(spec) if spec is not None else {}
    lines.append(f"spec {len(spec_items)}")
    for key, value in spec_items.items():
        lines.append(f"{key} = {value!r}")
    lines.append(f"instances {len(corpus)}")
    for idx, inst in enumerate(corpus):
        m, d = inst.patches.shape
        length = inst.tokens.shape[0]
        lines.append(f"instance {idx} cluster {inst.cluster_id} dim {d} patches {m} tokens {length}")
        lines.append("image_global " + _fmt(inst.image_global))
        lines.append("report_global " + _fmt(inst.report_global))
        lines.append("image_global_aug " + _fmt(inst.image_global_aug))
        lines.append("report_global_aug " + _fmt(inst.report_global_aug))
        lines.append("token_importance " + _fmt(inst.token_importance))
        lines.append("token_pathology " + _fmt_int(inst.token_pathology))
        lines.append("patch_pathology " + _fmt_int(inst.patch_pathology))
        lines.extend("patch " + _fmt(row) for row in inst.patches)
        lines.extend("token " + _fmt(row) for row in inst.tokens)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


class _Lines:
    def __init__(self, text):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def next(self, what):
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {what}", self.pos + 1)
        self.pos += 1
        return self.lines[self.pos - 1]

    def keyed(self, key, count=None, cast=float):
        line = self.next(key)
        parts = line.split(" ")
        if parts[0] != key:
            raise ParseError(f"expected '{key}', found '{parts[0]}'", self.pos)
        try:
            values = [cast(x) for x in parts[1:]]
        except ValueError:
            raise ParseError(f"malformed number in '{key}' record", self.pos) from None
        if count is not None and len(values) != count:
            raise ParseError(f"'{key}' needs {count} values, found {len(values)}", self.pos)
        return np.array(values, dtype=np.float64 if cast is float else int)


def _parse_spec_value(key, text, lineno):
    kind = _SPEC_TYPES.get(key)
    if kind is None:
        raise ParseError(f"unknown spec key '{key}'", lineno)
    try:
        return int(text) if kind is int else float(text)
    except ValueError:
        raise ParseError(f"bad value for '{key}'", lineno) from None


def read_corpus(path, with_spec=False):
    """Parse a corpus file. Returns the instance list (and spec if asked)."""
    with open(path, encoding="utf-8") as fh:
        src = _Lines(fh.read())
    if src.next("header") != MAGIC:
        raise ParseError(f"missing '{MAGIC}' header", 1)
    n_spec = int(src.keyed("spec", 1, int)[0])
    spec_values = {}
    for _ in range(n_spec):
        line = src.next("spec entry")
        key, sep, text = line.partition(" = ")
        if not sep:
            raise ParseError("spec entry must be 'key = value'", src.pos)
        spec_values[key] = _parse_spec_value(key, text, src.pos)
    n = int(src.keyed("instances", 1, int)[0])
    corpus = []
    for idx in range(n):
        header = src.next("instance record").split(" ")
        if len(header) != 10 or header[0] != "instance" or header[1] != str(idx):
            raise ParseError(f"malformed header for instance {idx}", src.pos)
        try:
            cluster, d, m, length = (int(header[k]) for k in (3, 5, 7, 9))
        except ValueError:
            raise ParseError("non-integer field in instance header", src.pos) from None
        image = src.keyed("image_global", d)
        report = src.keyed("report_global", d)
        image_aug = src.keyed("image_global_aug", d)
        report_aug = src.keyed("report_global_aug", d)
        importance = src.keyed("token_importance", length)
        token_path = src.keyed("token_pathology", length, int)
        patch_path = src.keyed("patch_pathology", m, int)
        patches = np.array([src.keyed("patch", d) for _ in range(m)]).reshape(m, d)
        tokens = np.array([src.keyed("token", d) for _ in range(length)]).reshape(length, d)
        corpus.append(RawInstance(cluster, image, patches, report, tokens, importance,
                                  image_aug, report_aug, token_path, patch_path))
    if src.pos != len(src.lines):
        raise ParseError("trailing content after last instance", src.pos + 1)
    if with_spec:
        spec = CorpusSpec(**spec_values) if spec_values else None
        return corpus, spec
    return corpus
