"""Representational similarity analysis over condensed dissimilarity vectors."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata
from scipy.stats import t as student_t

from .network import NumericError


class InsufficientDataError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass
class RsaConfig:
    q: float = 0.05
    max_items: int = 1000
    p_method: str = "t"     # "t" or "permutation"
    n_permutations: int = 999
    exact_max_items: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.p_method not in ("t", "permutation"):
            raise ValueError("p_method must be 't' or 'permutation'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DSM:
    values: np.ndarray
    n: int
    kind: str = "model"
    source: str = ""

    def __post_init__(self):
        if len(self.values) != self.n * (self.n - 1) // 2:
            raise ValueError("condensed length does not match n")

    def square(self) -> np.ndarray:
        return squareform(self.values, checks=False)


def condensed_pairs(n: int) -> list[tuple[int, int]]:
    """(i, j) for i < j in row-major order."""
    if n < 2:
        raise ValueError("need at least two items")
    i, j = np.triu_indices(n, 1)
    return list(zip(i.tolist(), j.tolist()))


def model_dsm(embeddings, source: str = "") -> DSM:
    """Cosine distance 1 - cos(e_i, e_j) for every pair.

    Computed as half the squared Euclidean distance between unit-normalized
    rows, which is non-negative and exactly zero for duplicate rows.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError("model_dsm needs an n x D matrix with n >= 2")
    norms = np.linalg.norm(e, axis=1)
    bad = np.nonzero(norms == 0)[0]
    if bad.size:
        raise NumericError(f"embedding row {int(bad[0])} has zero norm")
    u = e / norms[:, None]
    return DSM(0.5 * pdist(u, "sqeuclidean"), e.shape[0], "model", source)


def feature_dsm(values, source: str = "") -> DSM:
    """|v_i - v_j| for every pair."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("feature_dsm needs finite values; drop unvoiced items first")
    if v.size < 2:
        raise InsufficientDataError("feature_dsm needs at least two values")
    return DSM(pdist(v[:, None], "cityblock"), v.size, "feature", source)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))


def t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(min(1.0, 2.0 * student_t.sf(abs(t), n - 2)))


def spearman(x, y) -> tuple[float, float]:
    """Spearman's r_s (average ranks for ties) and a two-sided t-approximation p."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("spearman needs equal-length vectors")
    if x.size < 3:
        raise InsufficientDataError("spearman needs at least three observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("spearman is undefined for a constant vector")
    r = max(-1.0, min(1.0, _pearson(rankdata(x), rankdata(y))))
    return r, t_pvalue(r, x.size)


def bh_fdr(p_values, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg rejections, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64).reshape(-1)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    reject = np.zeros(m, dtype=bool)
    if m == 0:
        return reject
    order = np.argsort(p, kind="stable")
    ok = np.nonzero(p[order] <= q * np.arange(1, m + 1) / m)[0]
    if ok.size:
        reject[order[: ok[-1] + 1]] = True
    return reject


def _centered_ranks(dsm: DSM) -> np.ndarray:
    r = rankdata(dsm.values)
    if np.all(r == r[0]):
        raise UndefinedCorrelationError(f"spearman is undefined for a constant DSM ({dsm.source or dsm.kind})")
    r = r - r.mean()
    return r / np.linalg.norm(r)


def permutation_pvalues(model: DSM, features: list[DSM], n_permutations: int = 999, rng=None,
                        exact_max_items: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Spearman r_s of one model DSM against several feature DSMs, with
    item-permutation (Mantel) two-sided p-values.

    Items of the model DSM are relabelled; since that only reorders DSM
    entries, ranks are permuted rather than recomputed, and one set of
    relabellings serves every feature. All n! relabellings are enumerated
    when n <= ``exact_max_items``. Constant feature DSMs give NaN.
    """
    n = model.n
    if any(f.n != n for f in features):
        raise ConsistencyError("DSMs describe different item counts")
    ra = squareform(_centered_ranks(model), checks=False)
    iu = np.triu_indices(n, 1)
    ok = np.array([not np.all(f.values == f.values[0]) for f in features], dtype=bool)
    fr = np.zeros((len(features), len(iu[0])))
    for k, f in enumerate(features):
        if ok[k]:
            fr[k] = _centered_ranks(f)
    r_obs = fr @ ra[iu]
    tol = 1e-12
    if n <= exact_max_items:
        perms = (np.asarray(p) for p in itertools.permutations(range(n)))
        total = math.factorial(n)
        hits = np.zeros(len(features))
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        perms = (rng.permutation(n) for _ in range(n_permutations))
        total = n_permutations + 1
        hits = np.ones(len(features))       # the observed labelling counts once
    for perm in perms:
        null = fr @ ra[np.ix_(perm, perm)][iu]
        hits += np.abs(null) >= np.abs(r_obs) - tol
    r = np.where(ok, np.clip(r_obs, -1.0, 1.0), np.nan)
    p = np.where(ok, np.minimum(hits / total, 1.0), np.nan)
    return r, p


# --------------------------------------------------------------------------
# reports


@dataclass
class RsaDataset:
    """Per-dataset inputs: embeddings per model and feature values per feature."""
    name: str
    embeddings: dict[str, np.ndarray]
    features: dict[str, np.ndarray]
    items: list[str] | None = None


@dataclass
class RsaRow:
    dataset: str
    model: str
    feature: str
    r_s: float
    p: float
    fdr_pass: bool
    retained: bool
    n_items: int
    defined: bool = True


@dataclass
class RsaReport:
    rows: list[RsaRow]
    aggregate: dict[str, dict[str, float]]          # model -> feature -> mean retained r_s
    retained_counts: dict[str, dict[str, int]]
    profile_similarity: dict[str, dict[str, float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def row(self, dataset, model, feature) -> RsaRow:
        for r in self.rows:
            if (r.dataset, r.model, r.feature) == (dataset, model, feature):
                return r
        raise KeyError((dataset, model, feature))

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {
            "rows": [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows],
            "aggregate": {m: {f: clean(v) for f, v in d.items()} for m, d in self.aggregate.items()},
            "retained_counts": self.retained_counts,
            "profile_similarity": {a: {b: clean(v) for b, v in d.items()}
                                   for a, d in self.profile_similarity.items()},
            "profile_similarity_definition": "Spearman correlation across features of each model's "
                                             "mean r_s (over datasets, unfiltered)",
            "note": "DSM entries share items and are not independent observations; "
                    "correlations are descriptive.",
            "config": self.config,
        }

    def save(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["dataset", "model", "feature", "r_s", "p", "fdr_pass", "retained", "n_items"])
            for r in self.rows:
                wr.writerow([r.dataset, r.model, r.feature, _fmt(r.r_s), _fmt(r.p),
                             int(r.fdr_pass), int(r.retained), r.n_items])
            for m, d in self.aggregate.items():
                for f, v in d.items():
                    wr.writerow(["__mean_retained__", m, f, _fmt(v), "", "", self.retained_counts[m][f], ""])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _prepare(ds: RsaDataset, cfg: RsaConfig, rng) -> tuple[dict, dict, int]:
    ns = {len(v) for v in ds.embeddings.values()} | {len(v) for v in ds.features.values()}
    if len(ns) != 1:
        raise ConsistencyError(f"dataset {ds.name!r}: item counts differ across inputs {sorted(ns)}")
    n = ns.pop()
    feats = {k: np.asarray(v, dtype=np.float64) for k, v in ds.features.items()}
    keep = np.ones(n, dtype=bool)
    for v in feats.values():
        keep &= np.isfinite(v)
    idx = np.nonzero(keep)[0]
    if idx.size > cfg.max_items:
        idx = np.sort(rng.choice(idx, size=cfg.max_items, replace=False))
    if idx.size < 3:
        raise InsufficientDataError(f"dataset {ds.name!r}: fewer than three usable items")
    embs = {k: np.asarray(v, dtype=np.float64)[idx] for k, v in ds.embeddings.items()}
    return embs, {k: v[idx] for k, v in feats.items()}, idx.size


def rsa_report(datasets: list[RsaDataset], cfg: RsaConfig | None = None) -> RsaReport:
    """Correlate every model DSM with every feature DSM, per dataset.

    One Benjamini-Hochberg family covers all (dataset, model, feature) tests.
    A correlation is retained when it passes FDR and r_s > 0; cross-dataset
    means use retained values only.
    """
    cfg = cfg or RsaConfig()
    if not datasets:
        raise ValueError("rsa_report needs at least one dataset")
    rng = np.random.default_rng(cfg.seed)
    rows: list[RsaRow] = []
    for ds in datasets:
        embs, feats, n = _prepare(ds, cfg, rng)
        mdsms = {m: model_dsm(e, m) for m, e in embs.items()}
        fdsms = {f: feature_dsm(v, f) for f, v in feats.items()}
        for m, md in mdsms.items():
            if cfg.p_method == "permutation":
                rs, ps = permutation_pvalues(md, list(fdsms.values()), cfg.n_permutations, rng,
                                             cfg.exact_max_items)
            for k, (f, fd) in enumerate(fdsms.items()):
                try:
                    if cfg.p_method == "t":
                        r, p = spearman(md.values, fd.values)
                    elif np.isnan(rs[k]):
                        raise UndefinedCorrelationError(f)
                    else:
                        r, p = float(rs[k]), float(ps[k])
                    rows.append(RsaRow(ds.name, m, f, r, p, False, False, n))
                except UndefinedCorrelationError:
                    rows.append(RsaRow(ds.name, m, f, float("nan"), 1.0, False, False, n, defined=False))

    passed = bh_fdr([r.p for r in rows], cfg.q)
    for r, ok in zip(rows, passed):
        r.fdr_pass = bool(ok and r.defined)
        r.retained = r.fdr_pass and r.r_s > 0

    models = list(dict.fromkeys(r.model for r in rows))
    features = list(dict.fromkeys(r.feature for r in rows))
    aggregate: dict = {m: {} for m in models}
    counts: dict = {m: {} for m in models}
    profile: dict = {m: {} for m in models}
    for m in models:
        for f in features:
            sel = [r for r in rows if r.model == m and r.feature == f]
            kept = [r.r_s for r in sel if r.retained]
            aggregate[m][f] = float(np.mean(kept)) if kept else float("nan")
            counts[m][f] = len(kept)
            defined = [r.r_s for r in sel if r.defined]
            profile[m][f] = float(np.mean(defined)) if defined else float("nan")

    sim: dict = {a: {} for a in models}
    for a in models:
        for b in models:
            va = np.array([profile[a][f] for f in features])
            vb = np.array([profile[b][f] for f in features])
            ok = np.isfinite(va) & np.isfinite(vb)
            try:
                sim[a][b] = 1.0 if a == b else spearman(va[ok], vb[ok])[0]
            except (UndefinedCorrelationError, InsufficientDataError):
                sim[a][b] = float("nan")
    return RsaReport(rows, aggregate, counts, sim, cfg.to_dict())


def inter_model_similarity(datasets: list[dict[str, np.ndarray]]) -> tuple[list[str], np.ndarray]:
    """Spearman r_s between model DSMs, averaged across datasets; diagonal 1."""
    if not datasets:
        raise ValueError("need at least one dataset")
    models = list(datasets[0])
    acc = np.zeros((len(models), len(models)))
    for ds in datasets:
        if list(ds) != models:
            raise ConsistencyError("every dataset must provide the same models")
        ns = {len(v) for v in ds.values()}
        if len(ns) != 1:
            raise ConsistencyError(f"models embed different item counts {sorted(ns)}")
        dsms = [model_dsm(ds[m]).values for m in models]
        for i in range(len(models)):
            acc[i, i] += 1.0
            for j in range(i + 1, len(models)):
                r, _ = spearman(dsms[i], dsms[j])
                acc[i, j] += r
                acc[j, i] += r
    return models, acc / len(datasets)


def save_similarity_csv(path, models: list[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["model"] + models)
        for m, row in zip(models, matrix):
            wr.writerow([m] + [repr(float(v)) for v in row])
