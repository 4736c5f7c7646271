"""Retrieval, planted-alignment scoring, the hard/soft twin run, and ablations."""

import csv
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import generate_corpus
from .errors import ParseError, ShapeError
from .features import SistaModel, encode
from .sta import StaConfig, alignment_map
from .train import LossToggles, train

DEFAULT_KS = (1, 5)


@dataclass
class RetrievalReport:
    """Image->report and report->image metrics, averaged over both directions."""

    recall_at_k: dict
    cluster_recall_at_k: dict
    mrr: float

    def as_dict(self):
        out = {f"recall@{k}": v for k, v in self.recall_at_k.items()}
        out.update({f"cluster_recall@{k}": v for k, v in self.cluster_recall_at_k.items()})
        out["mrr"] = self.mrr
        return out


@dataclass
class AlignmentScore:
    pathology_hit_rate: float
    mean_retained: float
    chance: float
    num_tokens: int


def _unit_rows(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ShapeError("zero feature vector in retrieval input")
    return x / norms


def _one_direction(sims, clusters, ks):
    # stable sort on -sims: ties go to the lower index
    ranking = np.argsort(-sims, axis=1, kind="stable")
    n = sims.shape[0]
    true_rank = np.argmax(ranking == np.arange(n)[:, None], axis=1)
    same_cluster = clusters[ranking] == clusters[:, None]
    recall = {k: float(np.mean(true_rank < k)) for k in ks}
    cluster_recall = {k: float(np.mean(same_cluster[:, :k].any(axis=1))) for k in ks}
    return recall, cluster_recall, float(np.mean(1.0 / (true_rank + 1)))


def retrieval_eval(image_globals, report_globals, cluster_ids, ks=DEFAULT_KS):
    """Rank all reports for each image by cosine similarity, and vice versa."""
    img, rep = _unit_rows(image_globals), _unit_rows(report_globals)
    clusters = np.asarray(cluster_ids).reshape(-1)
    if img.shape != rep.shape or clusters.size != img.shape[0]:
        raise ShapeError("image, report and cluster arrays must have matching lengths")
    sims = img @ rep.T
    a = _one_direction(sims, clusters, ks)
    b = _one_direction(sims.T, clusters, ks)
    return RetrievalReport(
        recall_at_k={k: (a[0][k] + b[0][k]) / 2 for k in ks},
        cluster_recall_at_k={k: (a[1][k] + b[1][k]) / 2 for k in ks},
        mrr=(a[2] + b[2]) / 2,
    )


def embed(model, corpus):
    """Unit-norm global image and report features for every instance."""
    batch = encode(model, corpus)
    return batch.image_global.value, batch.report_global.value


def evaluate_retrieval(model, corpus, ks=DEFAULT_KS):
    img, rep = embed(model, corpus)
    return retrieval_eval(img, rep, [r.cluster_id for r in corpus], ks)


def alignment_eval(model, corpus, sta_cfg=None):
    """Score each pathology token's top-weight patch against the planted truth."""
    sta_cfg = sta_cfg or StaConfig()
    batch = encode(model, corpus)
    hits, chance, retained, n_path = 0, 0.0, [], 0
    for raw, pair in zip(corpus, batch.pairs):
        amap = alignment_map(pair.tokens.value, pair.patches.value, sta_cfg)
        retained.extend(len(k) for k in amap.retained)
        m = amap.num_patches
        for l, p in enumerate(raw.token_pathology):
            if p < 0:
                continue
            n_path += 1
            hits += int(raw.patch_pathology[amap.top_patch(l)] == p)
            chance += np.count_nonzero(raw.patch_pathology == p) / m
    return AlignmentScore(
        pathology_hit_rate=hits / n_path if n_path else 0.0,
        mean_retained=float(np.mean(retained)) if retained else 0.0,
        chance=chance / n_path if n_path else 0.0,
        num_tokens=n_path,
    )


@dataclass
class FalseNegativeResult:
    hard: RetrievalReport
    soft: RetrievalReport

    def deltas(self):
        h, s = self.hard.as_dict(), self.soft.as_dict()
        return {k: s[k] - h[k] for k in h}


def false_negative_experiment(spec, train_cfg, dim=16, loss_cfg=None, sta_cfg=None, corpus=None):
    """Train hard-label and soft-label twins from one init; compare retrieval.

    The twins differ only in how the batch target matrix is built (identity
    versus pseudo-positive soft labels). Metrics are computed on the full
    corpus.
    """
    corpus = corpus if corpus is not None else generate_corpus(spec)
    init = SistaModel.init(spec.raw_dim, dim, train_cfg.seed)
    reports = {}
    for soft in (False, True):
        cfg = dataclasses.replace(train_cfg, soft_labels=soft)
        result = train(corpus, init.copy(), cfg, loss_cfg, sta_cfg)
        reports[soft] = evaluate_retrieval(result.model, corpus)
    return FalseNegativeResult(hard=reports[False], soft=reports[True])


ABLATION_ROWS = (
    ("sia", LossToggles(siva=False, sila=False, sta=False)),
    ("sia+sta", LossToggles(siva=False, sila=False)),
    ("sia+siva+sila", LossToggles(sta=False)),
    ("full", LossToggles()),
)

ABLATION_COLUMNS = (
    "row", "sia", "sia_aug", "siva", "sila", "sta", "full_model", "config_hash",
    "recall@1", "recall@5", "cluster_recall@1", "cluster_recall@5", "mrr",
    "pathology_hit_rate", "mean_retained",
)


def _ablation_row(name, toggles, corpus, base_cfg, dim, raw_dim, loss_cfg, sta_cfg):
    cfg = dataclasses.replace(base_cfg, toggles=toggles)
    model = SistaModel.init(raw_dim, dim, cfg.seed)
    result = train(corpus, model, cfg, loss_cfg, sta_cfg)
    retrieval = evaluate_retrieval(result.model, corpus)
    align = alignment_eval(result.model, corpus, sta_cfg)
    row = {"row": name}
    row.update({k: getattr(toggles, k) for k in ("sia", "sia_aug", "siva", "sila", "sta")})
    row["full_model"] = all(dataclasses.asdict(toggles).values())
    row["config_hash"] = cfg.config_hash()
    row.update(retrieval.as_dict())
    row["pathology_hit_rate"] = align.pathology_hit_rate
    row["mean_retained"] = align.mean_retained
    return row


def ablation_sweep(corpus, base_cfg, dim=16, loss_cfg=None, sta_cfg=None, workers=1):
    """Train and score one model per loss-toggle row; rows are independent."""
    raw_dim = corpus[0].image_global.size
    args = [(name, toggles, corpus, base_cfg, dim, raw_dim, loss_cfg, sta_cfg)
            for name, toggles in ABLATION_ROWS]
    if workers <= 1:
        return [_ablation_row(*a) for a in args]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda a: _ablation_row(*a), args))


def _cell(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(rows, path, columns=ABLATION_COLUMNS):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _parse_cell(column, text, lineno):
    if column in ("sia", "sia_aug", "siva", "sila", "sta", "full_model"):
        if text not in ("on", "off"):
            raise ParseError(f"column {column} must be on/off", lineno)
        return text == "on"
    if column in ("row", "config_hash"):
        return text
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {column} is not numeric", lineno) from None


def read_table(path, columns=ABLATION_COLUMNS):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(columns):
            raise ParseError("table header does not match expected columns", 1)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(columns):
                raise ParseError(f"expected {len(columns)} fields", lineno)
            rows.append({c: _parse_cell(c, v, lineno) for c, v in zip(columns, rec)})
    return rows
