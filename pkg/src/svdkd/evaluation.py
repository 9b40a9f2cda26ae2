"""Cross-modal retrieval metrics: Rank-k, mAP and mINP.

Galleries are ranked by cosine similarity, ties broken by ascending
``sample_id`` so results are bit-reproducible.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import astuple, dataclass, fields

import numpy as np

from svdkd.data_model import EmbeddingSet, Modality
from svdkd.errors import ArgumentError, EvalError


class EvalMode(enum.Enum):
    C2C = "c2c"
    E2E = "e2e"
    E2C = "e2c"

    @classmethod
    def parse(cls, value: "str | EvalMode") -> "EvalMode":
        if isinstance(value, EvalMode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ArgumentError(f"unknown eval mode {value!r}; expected c2c, e2e or e2c") from None

    @property
    def sources(self) -> tuple[str, str]:
        return {"c2c": ("cloud", "cloud"), "e2e": ("edge", "edge"), "e2c": ("edge", "cloud")}[self.value]


# "synthetic" sets stand in for cloud-side teacher features
_SOURCE_ALIASES = {"cloud": {"cloud", "synthetic"}, "edge": {"edge"}}


@dataclass(frozen=True)
class EvalTask:
    query_modality: Modality
    gallery_modality: Modality

    def __post_init__(self) -> None:
        if self.query_modality == self.gallery_modality:
            raise ArgumentError("query and gallery modalities must differ")

    @classmethod
    def parse(cls, text: str) -> "EvalTask":
        """Parse ``"sketch:rgb"`` style task strings."""
        parts = text.split(":")
        if len(parts) != 2:
            raise ArgumentError(f"task must look like 'query:gallery', got {text!r}")
        return cls(Modality.parse(parts[0]), Modality.parse(parts[1]))

    def __str__(self) -> str:
        return f"{self.query_modality}:{self.gallery_modality}"


# the three retrieval tasks of the benchmark protocol: IR->RGB, text->RGB, sketch->RGB
DEFAULT_TASKS = (
    EvalTask(Modality.IR, Modality.RGB),
    EvalTask(Modality.TEXT, Modality.RGB),
    EvalTask(Modality.SKETCH, Modality.RGB),
)


@dataclass(frozen=True)
class RankingMetrics:
    rank1: float
    rank5: float
    rank10: float
    map: float
    minp: float
    n_queries: int


CSV_HEADER = ("task", "mode", "rank1", "rank5", "rank10", "map", "minp", "n_queries")


def cosine_similarity(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(Q, axis=-1, keepdims=True)
    gn = np.linalg.norm(G, axis=-1, keepdims=True)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ArgumentError("cosine similarity is undefined for zero-norm rows")
    return (Q / qn) @ (G / gn).T


def _score_ranking(matches: np.ndarray) -> tuple[float, float, int]:
    positions = np.flatnonzero(matches) + 1
    hits = np.arange(1, positions.size + 1)
    ap = float(np.mean(hits / positions))
    inp = float(positions.size / positions[-1])
    return ap, inp, int(positions[0])


def rank_gallery(similarities: np.ndarray, gallery_sample_ids: np.ndarray) -> np.ndarray:
    """Gallery order by descending similarity, ascending sample_id on ties."""
    return np.lexsort((gallery_sample_ids, -similarities))


def evaluate_query(query_row: np.ndarray, query_id: int, gallery: EmbeddingSet) -> tuple[float, float, int]:
    """Average precision, inverse negative penalty and 1-based first-hit rank of one query."""
    is_match = gallery.identity_ids == query_id
    if not is_match.any():
        raise ArgumentError(f"identity {query_id} has no true match in the gallery")
    sims = cosine_similarity(np.asarray(query_row, dtype=np.float64)[None, :], gallery.features)[0]
    order = rank_gallery(sims, gallery.sample_ids)
    return _score_ranking(is_match[order])


def _check_sources(query_set: EmbeddingSet, gallery_set: EmbeddingSet, mode: EvalMode) -> None:
    want_q, want_g = mode.sources
    if query_set.source_tag not in _SOURCE_ALIASES[want_q] or gallery_set.source_tag not in _SOURCE_ALIASES[want_g]:
        raise ArgumentError(
            f"{mode.name} contract requires a {want_q!r} query set and a {want_g!r} gallery set; "
            f"got query={query_set.source_tag!r}, gallery={gallery_set.source_tag!r}"
        )


def evaluate_retrieval(
    query_set: EmbeddingSet, gallery_set: EmbeddingSet, task: EvalTask, mode: EvalMode | str
) -> RankingMetrics:
    mode = EvalMode.parse(mode)
    _check_sources(query_set, gallery_set, mode)
    gallery = gallery_set.subset(gallery_set.rows_for(task.gallery_modality))
    q_rows = query_set.rows_for(task.query_modality)
    q_rows = q_rows[np.isin(query_set.identity_ids[q_rows], gallery.identity_ids)]
    if q_rows.size == 0:
        raise EvalError(f"no {task.query_modality} query has a true match among {task.gallery_modality} gallery rows")
    if query_set.d != gallery_set.d:
        raise ArgumentError(f"query dimension {query_set.d} differs from gallery dimension {gallery_set.d}")
    sims = cosine_similarity(query_set.features[q_rows], gallery.features)
    gids = gallery.identity_ids
    aps, inps, firsts = [], [], []
    for qi, row in enumerate(q_rows):
        order = rank_gallery(sims[qi], gallery.sample_ids)
        ap, inp, first = _score_ranking(gids[order] == query_set.identity_ids[row])
        aps.append(ap)
        inps.append(inp)
        firsts.append(first)
    firsts_arr = np.asarray(firsts)
    return RankingMetrics(
        rank1=float(np.mean(firsts_arr <= 1)),
        rank5=float(np.mean(firsts_arr <= 5)),
        rank10=float(np.mean(firsts_arr <= 10)),
        map=float(np.mean(aps)),
        minp=float(np.mean(inps)),
        n_queries=int(q_rows.size),
    )


def metrics_csv(rows: list[tuple[EvalTask, EvalMode, RankingMetrics]]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for task, mode, m in rows:
        writer.writerow([str(task), mode.value, *(repr(v) if isinstance(v, float) else v for v in astuple(m))])
    return out.getvalue()


def metric_names() -> list[str]:
    return [f.name for f in fields(RankingMetrics)]
