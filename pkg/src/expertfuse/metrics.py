"""Retrieval evaluation: recall@K, median and mean rank, both directions.

Scores arrive as a (videos x captions) matrix.  Text-to-video ranks each
caption's matched video among all videos; video-to-text ranks every
caption of a video among all captions and keeps the best, so a video with
several captions is judged by its easiest one.

Ties resolve deterministically: a candidate beats the truth if it scores
strictly higher, or ties it from a lower index.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DataIntegrityError, ShapeMismatch


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    r_at: dict
    median_rank: float
    mean_rank: float
    queries: int


def rank_of(row, truth: int) -> int:
    """Rank of the truth index within one score row (1 = best).

    rank = 1 + #{strictly greater} + #{equal at a lower index}.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ShapeMismatch(f"rank_of: expected a 1-D row, got shape {row.shape}")
    if not 0 <= truth < row.shape[0]:
        raise DataIntegrityError(f"rank_of: truth index {truth} outside 0..{row.shape[0] - 1}")
    target = row[truth]
    greater = int((row > target).sum())
    tied_before = int((row[:truth] == target).sum())
    return 1 + greater + tied_before


def _median(values):
    """Mean-of-middles median (even counts average the two central ranks)."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    n = ordered.shape[0]
    mid = n // 2
    if n % 2:
        return float(ordered[mid])
    return float((ordered[mid - 1] + ordered[mid]) / 2.0)


def _report(direction, ranks, recall_ks):
    ranks = np.asarray(ranks, dtype=np.float64)
    r_at = {int(k): float((ranks <= k).mean()) for k in recall_ks}
    return RetrievalReport(
        direction=direction,
        r_at=r_at,
        median_rank=_median(ranks),
        mean_rank=float(ranks.mean()),
        queries=int(ranks.shape[0]),
    )


def evaluate(scores, caption_to_video, recall_ks=(1, 5, 10, 50)):
    """Scores both retrieval directions from one similarity matrix.

    Args:
        scores: (n_videos, n_captions) array.
        caption_to_video: for each caption column, the matched video row.
        recall_ks: cutoffs for recall reporting.

    Returns:
        dict direction -> RetrievalReport.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeMismatch(f"evaluate: expected a 2-D score matrix, got {scores.shape}")
    n_videos, n_captions = scores.shape
    pairing = np.asarray(caption_to_video, dtype=int)
    if pairing.shape != (n_captions,):
        raise DataIntegrityError(
            f"evaluate: pairing length {pairing.shape} does not match {n_captions} captions"
        )
    if pairing.size and (pairing.min() < 0 or pairing.max() >= n_videos):
        raise DataIntegrityError("evaluate: pairing references a video outside the matrix")
    captionless = set(range(n_videos)) - set(pairing.tolist())
    if captionless:
        raise DataIntegrityError(
            f"evaluate: videos without captions: {sorted(captionless)[:5]}"
        )

    t2v = [rank_of(scores[:, j], int(pairing[j])) for j in range(n_captions)]

    v2t = []
    for i in range(n_videos):
        own = np.flatnonzero(pairing == i)
        v2t.append(min(rank_of(scores[i, :], int(j)) for j in own))

    return {
        "text_to_video": _report("text_to_video", t2v, recall_ks),
        "video_to_text": _report("video_to_text", v2t, recall_ks),
    }


def evaluate_model(records, params, cfg, recall_ks=(1, 5, 10, 50)):
    """Encodes a record list with the given parameters and scores it.

    Every caption of every record becomes a query; the pairing maps each
    caption back to its video.  Returns dict direction -> RetrievalReport.
    """
    from .similarity import similarity_graph
    from .text_encoder import encode_texts
    from .video_encoder import encode_videos

    captions = []
    pairing = []
    for idx, record in enumerate(records):
        for cap in record.captions:
            captions.append(cap)
            pairing.append(idx)
    blocks, mask = encode_videos(
        [r.features for r in records], params, cfg, ids=[r.id for r in records]
    )
    t_blocks, weights = encode_texts(captions, params, cfg)
    scores = similarity_graph(blocks, mask, t_blocks, weights).data
    return evaluate(scores, pairing, recall_ks)


def report_metrics(report: RetrievalReport) -> dict:
    """Flat metric-name -> value map (the aggregation vocabulary)."""
    out = {f"R@{k}": v for k, v in sorted(report.r_at.items())}
    out["MdR"] = report.median_rank
    out["MnR"] = report.mean_rank
    return out


def report_to_dict(report: RetrievalReport) -> dict:
    return {
        "direction": report.direction,
        "queries": report.queries,
        "metrics": report_metrics(report),
    }


def format_reports(reports) -> str:
    """Aligned text table, one row per report."""
    reports = list(reports)
    if not reports:
        return ""
    names = list(report_metrics(reports[0]))
    header = ["direction", "queries"] + names
    rows = [header]
    for r in reports:
        metrics = report_metrics(r)
        rows.append(
            [r.direction, str(r.queries)]
            + [f"{metrics[name]:.4f}" for name in names]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in rows
    )
