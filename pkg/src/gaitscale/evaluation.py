"""Zero-shot gallery/probe retrieval: rank-k accuracy, cross-view matrices, report aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import GaitDataset, center_crop, normalize_sequence


class ProtocolError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    subject_ids: np.ndarray
    view_ids: np.ndarray
    variation_ids: np.ndarray
    # identity of the physical sequence; used to keep a probe out of its own gallery
    sequence_ids: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = self.vectors.shape[0]
        self.subject_ids = np.asarray(self.subject_ids)
        self.view_ids = np.asarray(self.view_ids)
        self.variation_ids = np.asarray(self.variation_ids)
        if self.sequence_ids is None:
            self.sequence_ids = np.full(n, -1)
        self.sequence_ids = np.asarray(self.sequence_ids)
        for name in ("subject_ids", "view_ids", "variation_ids", "sequence_ids"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embeddings must be finite")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def select(self, mask) -> "EmbeddingSet":
        return EmbeddingSet(
            self.vectors[mask], self.subject_ids[mask], self.view_ids[mask],
            self.variation_ids[mask], self.sequence_ids[mask],
        )


def embed_dataset(model, dataset: GaitDataset, batch_size: int = 64) -> EmbeddingSet:
    """Backbone embeddings of center-cropped, normalized sequences (no projection head)."""
    t = model.cfg.crop_length
    vecs = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.sequences[start : start + batch_size]
        x = np.stack([normalize_sequence(center_crop(s, t)).frames for s in chunk]).astype(model.dtype)
        vecs.append(model.embed(x).data.astype(np.float64))
    emb_size = model.cfg.emb_size
    vectors = np.concatenate(vecs) if vecs else np.zeros((0, emb_size))
    seqs = dataset.sequences
    return EmbeddingSet(
        vectors,
        np.array([-1 if s.subject_id is None else s.subject_id for s in seqs]),
        np.array([s.view_id for s in seqs]),
        np.array([s.variation_id for s in seqs]),
        np.arange(len(seqs)),
    )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def rank_k_hits(gallery: EmbeddingSet, probe: EmbeddingSet, k: int) -> np.ndarray:
    """Per-probe hit flags: true id among the k nearest distinct gallery identities.

    Distance is Euclidean between L2-normalized embeddings; ties keep gallery order.
    A probe never matches a gallery entry with the same non-negative sequence id.
    """
    if len(gallery) == 0 or len(probe) == 0:
        raise ProtocolError("empty gallery or probe set")
    if k < 1:
        raise ValueError("k must be >= 1")
    g = _unit(gallery.vectors)
    p = _unit(probe.vectors)
    hits = np.zeros(len(probe), dtype=bool)
    for i in range(len(probe)):
        d = np.sqrt(np.sum((g - p[i]) ** 2, axis=1))
        keep = ~((gallery.sequence_ids == probe.sequence_ids[i]) & (gallery.sequence_ids >= 0))
        order = np.flatnonzero(keep)[np.argsort(d[keep], kind="stable")]
        ranked_ids = gallery.subject_ids[order]
        _, first = np.unique(ranked_ids, return_index=True)
        top = ranked_ids[np.sort(first)[:k]]
        hits[i] = probe.subject_ids[i] in top
    return hits


def rank_k_accuracy(gallery: EmbeddingSet, probe: EmbeddingSet, k: int) -> float:
    return float(np.mean(rank_k_hits(gallery, probe, k)))


def cross_view_matrix(embeds: EmbeddingSet, k: int = 1) -> dict[tuple[int, int], dict[int, float]]:
    """Rank-k per (probe_view, gallery_view) pair and probe variation; identical views skipped."""
    views = np.unique(embeds.view_ids)
    if len(views) < 2:
        raise ProtocolError("cross-view evaluation needs at least two views")
    out: dict[tuple[int, int], dict[int, float]] = {}
    for pv in views:
        for gv in views:
            if pv == gv:
                continue
            gallery = embeds.select(embeds.view_ids == gv)
            per_var = {}
            for var in np.unique(embeds.variation_ids[embeds.view_ids == pv]):
                probe = embeds.select((embeds.view_ids == pv) & (embeds.variation_ids == var))
                per_var[int(var)] = rank_k_accuracy(gallery, probe, k)
            out[(int(pv), int(gv))] = per_var
    return out


def matrix_mean(matrix: dict[tuple[int, int], dict[int, float]]) -> float:
    """Mean over view pairs of the per-pair mean over variations."""
    return float(np.mean([np.mean(list(v.values())) for v in matrix.values()]))


@dataclass
class EvalReport:
    entries: list[dict] = field(default_factory=list)
    rank1: float | None = None
    rank5: float | None = None
    aggregate_controlled: float | None = None
    aggregate_wild: float | None = None
    datasets: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path: str | Path) -> None:
        cols = ("dataset", "probe_view", "gallery_view", "variation", "k", "accuracy")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for e in self.entries:
                w.writerow({c: e.get(c) for c in cols})


def evaluate_controlled(embeds: EmbeddingSet, name: str = "controlled") -> EvalReport:
    """Cross-view protocol: rank-1 (and rank-5) averaged over view pairs and variations."""
    m1 = cross_view_matrix(embeds, 1)
    m5 = cross_view_matrix(embeds, 5)
    entries = []
    for k, m in ((1, m1), (5, m5)):
        for (pv, gv), per_var in m.items():
            for var, acc in per_var.items():
                entries.append(dict(dataset=name, probe_view=pv, gallery_view=gv, variation=var, k=k, accuracy=acc))
    r1 = matrix_mean(m1)
    return EvalReport(entries, r1, matrix_mean(m5), aggregate_controlled=r1, datasets=[name])


def evaluate_wild(gallery: EmbeddingSet, probe: EmbeddingSet, name: str = "wild") -> EvalReport:
    """Plain gallery/probe protocol scored by rank-5 (rank-1 reported alongside)."""
    r1 = rank_k_accuracy(gallery, probe, 1)
    r5 = rank_k_accuracy(gallery, probe, 5)
    return EvalReport([], r1, r5, aggregate_wild=r5, datasets=[name])


def split_gallery_probe(embeds: EmbeddingSet, per_id_gallery: int = 1) -> tuple[EmbeddingSet, EmbeddingSet]:
    """First ``per_id_gallery`` sequences of each subject go to the gallery, the rest probe."""
    is_gallery = np.zeros(len(embeds), dtype=bool)
    for sid in np.unique(embeds.subject_ids):
        idx = np.flatnonzero(embeds.subject_ids == sid)
        is_gallery[idx[:per_id_gallery]] = True
    return embeds.select(is_gallery), embeds.select(~is_gallery)


def aggregate_report(controlled_reports: list[EvalReport], wild_reports: list[EvalReport]) -> EvalReport:
    """Controlled P = mean over datasets of cross-view rank-1; wild P = mean over datasets of rank-5."""
    if not controlled_reports or not wild_reports:
        raise ProtocolError("need at least one controlled and one wild report")
    ctrl = float(np.mean([r.aggregate_controlled for r in controlled_reports]))
    wild = float(np.mean([r.aggregate_wild for r in wild_reports]))
    allr = controlled_reports + wild_reports
    return EvalReport(
        entries=[e for r in allr for e in r.entries],
        rank1=float(np.mean([r.rank1 for r in allr])),
        rank5=float(np.mean([r.rank5 for r in allr])),
        aggregate_controlled=ctrl,
        aggregate_wild=wild,
        datasets=[d for r in allr for d in r.datasets],
    )


def evaluate_model(model, dataset: GaitDataset, per_id_gallery: int = 1) -> EvalReport:
    """Both protocols on one held-out synthetic set, aggregated."""
    emb = embed_dataset(model, dataset)
    ctrl = evaluate_controlled(emb, "synthetic-controlled")
    gal, probe = split_gallery_probe(emb, per_id_gallery)
    wild = evaluate_wild(gal, probe, "synthetic-wild")
    return aggregate_report([ctrl], [wild])


def leave_one_out_rank1(embeds: EmbeddingSet) -> float:
    """Every sequence probes against all others."""
    return rank_k_accuracy(embeds, embeds, 1)
