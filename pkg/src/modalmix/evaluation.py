"""Gallery ranking, recall@k, alpha statistics, and attention export.

Scoring uses cosine similarity per stream; the two streams' cosines are
averaged ("mean" integration) or the unit-normalized embeddings are
concatenated ("concat", same ordering).  Ties break by ascending gallery
id so rankings are fully deterministic.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import editors
from .errors import ParameterError

INTEGRATIONS = ("mean", "concat")


@dataclass
class RankingResult:
    query_index: int
    order: np.ndarray  # gallery item ids, best first
    rank: int  # 1-based rank of the ground-truth target


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


def integrated_scores(query_parts, gallery_parts, integration="mean"):
    """Combine per-stream cosine similarities into one [B, N] score matrix."""
    if integration not in INTEGRATIONS:
        raise ParameterError(f"integration must be one of {INTEGRATIONS}, got {integration!r}")
    pairs = [(q, g) for q, g in zip(query_parts, gallery_parts) if q is not None]
    if not pairs:
        raise ParameterError("no stream embeddings to score with")
    cosines = [_unit_rows(q) @ _unit_rows(g).T for q, g in pairs]
    if integration == "concat":
        # concatenating unit-norm halves induces the same ordering as the mean
        scale = 1.0 / len(cosines)
        return sum(cosines) * scale
    return sum(cosines) / len(cosines)


def rank_rows(scores, gallery_ids, target_ids):
    """Per-query deterministic ranking (descending score, ties by ascending id)."""
    gallery_ids = np.asarray(gallery_ids)
    results = []
    for i, row in enumerate(scores):
        order = np.lexsort((gallery_ids, -row))
        ranked_ids = gallery_ids[order]
        rank = int(np.nonzero(ranked_ids == target_ids[i])[0][0]) + 1
        results.append(RankingResult(query_index=i, order=ranked_ids, rank=rank))
    return results


def rank_queries(model, dataset, triplets, integration="mean"):
    """Rank the full catalog for each triplet; returns (results, alphas or None)."""
    if not dataset.catalog:
        raise ParameterError("gallery is empty")
    gallery_ids = [item.id for item in dataset.catalog]
    gallery = model.gallery_embeddings(dataset.images(gallery_ids))
    queries = model.query_embeddings(
        dataset.images([t.query_id for t in triplets]), [t.tokens for t in triplets]
    )
    scores = integrated_scores(queries[:2], gallery, integration)
    results = rank_rows(scores, gallery_ids, [t.target_id for t in triplets])
    return results, queries[2]


def score_gallery(model, dataset, triplet, integration="mean"):
    """Single-query form of rank_queries."""
    results, _ = rank_queries(model, dataset, [triplet], integration)
    return results[0]


def recall_at_k(results, k):
    """Percentage of queries whose target ranks within the top k."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if not results:
        raise ParameterError("no ranking results")
    hits = sum(1 for r in results if r.rank <= k)
    return 100.0 * hits / len(results)


def recall_curve(results, k_max=100):
    return [(k, recall_at_k(results, k)) for k in range(1, k_max + 1)]


def alpha_stats(alphas, triplets):
    """Mean alpha per dominance subset; an empty subset is reported as None."""
    out = {}
    for dom in ("image", "text"):
        if alphas is None:
            out[dom] = None
            continue
        vals = [a for a, t in zip(alphas, triplets) if t.dominance == dom]
        out[dom] = float(np.mean(vals)) if vals else None
    return out


def evaluate(model, dataset, split="val", integration="mean", k_max=100):
    """Full EvalReport over one split, as a plain dict."""
    triplets = dataset.val if split == "val" else dataset.train
    results, alphas = rank_queries(model, dataset, triplets, integration)
    gallery_size = len(dataset.catalog)
    curve = recall_curve(results, min(k_max, gallery_size))
    stats = alpha_stats(alphas, triplets)
    r1, r10, r50 = (recall_at_k(results, k) for k in (1, 10, 50))
    return {
        "split": split,
        "n_queries": len(triplets),
        "gallery_size": gallery_size,
        "integration": integration,
        "r_at_1": r1,
        "r_at_10": r10,
        "r_at_50": r50,
        "mean_r": (r1 + r10 + r50) / 3.0,
        "r_at_gallery_size": recall_at_k(results, gallery_size),
        "mean_alpha_image_dominant": stats["image"],
        "mean_alpha_text_dominant": stats["text"],
        "curve": curve,
    }


def write_report(report, out_dir):
    """Write report.json plus the R@k curve as CSV (k, percentage)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "rk_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("k,percentage\n")
        for k, pct in report["curve"]:
            fh.write(f"{k},{pct!r}\n")


def export_attention(model, dataset, triplets, path):
    """CSV of spatial/word attention weights plus alpha for each query.

    Rows are (query_id, kind, index, weight) with kind in
    {spatial, word, alpha}; query_id is the query's position in the list.
    """
    lines = ["query_id,kind,index,weight"]
    with ad.no_grad():
        for qid, triplet in enumerate(triplets):
            f_ref = model.encoders.encode_image(dataset.image(triplet.query_id))
            f_txt = model.encoders.encode_text(list(triplet.tokens))
            out = editors.combine_query(f_ref, f_txt, model.editor, model.gem_p)
            for idx, w in enumerate(out.spatial_attn.data.ravel()):
                lines.append(f"{qid},spatial,{idx},{float(w)!r}")
            for idx, w in enumerate(out.word_attn.data.ravel()):
                lines.append(f"{qid},word,{idx},{float(w)!r}")
            lines.append(f"{qid},alpha,0,{out.alpha.item()!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
