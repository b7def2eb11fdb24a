"""Dual-path annotation cross-verification.

Two annotation pipelines produce per-image instance sets: a top-down
set (image-level tags pushed through an open-set detector) and a
bottom-up set (class-agnostic regions labeled individually).  Matched
box pairs are established by Hungarian assignment on 1 - IoU costs,
gated by a minimum IoU, then filtered by the cosine similarity of their
tag embeddings.  Surviving pairs keep the top-down geometry; the
bottom-up tag is attached as an alias when the tags differ.

Annotation JSON schema (one file per image and pipeline):

    {"image_id": str, "width": int, "height": int,
     "source": "top_down" | "bottom_up",
     "instances": [{"box": [x1, y1, x2, y2], "tag": str, "score": float}]}

Boxes are normalized corner-form floats.  Verified output instances
additionally carry "similarity" and, when tags differ, "alias_tag".
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import hungarian, iou, validate_box

SOURCES = ("top_down", "bottom_up")

DEFAULT_IOU_GATE = 0.5
DEFAULT_SIM_THRESHOLD = 0.6

HISTOGRAM_EDGES = [round(-1.0 + 0.1 * i, 1) for i in range(21)]


@dataclass(frozen=True)
class Instance:
    """One annotated object: box, tag, confidence, producing pipeline."""

    box: np.ndarray
    tag: str
    score: float
    source: str
    similarity: float | None = None
    alias_tag: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "box", validate_box(self.box, f"box of tag {self.tag!r}"))
        if not self.tag:
            raise ValueError("instance tag must be nonempty")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"instance score must lie in [0, 1], got {self.score}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")

    def to_dict(self) -> dict:
        d = {
            "box": [float(c) for c in self.box],
            "tag": self.tag,
            "score": float(self.score),
        }
        if self.similarity is not None:
            d["similarity"] = float(self.similarity)
        if self.alias_tag is not None:
            d["alias_tag"] = self.alias_tag
        return d


@dataclass(frozen=True)
class AnnotationSet:
    """All instances of one pipeline for one image."""

    image_id: str
    width: int
    height: int
    source: str
    instances: tuple[Instance, ...]

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be nonempty")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        for inst in self.instances:
            if inst.source != self.source:
                raise ValueError(
                    f"instance source {inst.source!r} differs from set source {self.source!r}"
                )

    @classmethod
    def from_dict(cls, obj: dict) -> "AnnotationSet":
        source = obj["source"]
        instances = tuple(
            Instance(
                box=np.asarray(item["box"], dtype=np.float64),
                tag=item["tag"],
                score=float(item["score"]),
                source=source,
                similarity=item.get("similarity"),
                alias_tag=item.get("alias_tag"),
            )
            for item in obj["instances"]
        )
        return cls(
            image_id=str(obj["image_id"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            source=source,
            instances=instances,
        )

    @classmethod
    def from_file(cls, path) -> "AnnotationSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "source": self.source,
            "instances": [inst.to_dict() for inst in self.instances],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class VerificationReport:
    """Counts and tag-similarity summaries for one verified image.

    ``matched`` counts Hungarian pairs before any gating.
    ``retention_rate`` divides retained pairs by the mean of the two
    input counts, a base that is symmetric in the pipelines.
    """

    image_id: str
    input_a: int
    input_b: int
    matched: int
    retained: int
    retention_rate: float
    mean_similarity_before: float
    mean_similarity_after: float
    similarities_before: tuple[float, ...] = field(default=(), repr=False)
    similarities_after: tuple[float, ...] = field(default=(), repr=False)

    @property
    def retention_rate_top_down(self) -> float:
        return self.retained / self.input_a if self.input_a else 0.0

    @property
    def retention_rate_bottom_up(self) -> float:
        return self.retained / self.input_b if self.input_b else 0.0

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "input_a": self.input_a,
            "input_b": self.input_b,
            "matched": self.matched,
            "retained": self.retained,
            "retention_rate": self.retention_rate,
            "retention_rate_top_down": self.retention_rate_top_down,
            "retention_rate_bottom_up": self.retention_rate_bottom_up,
            "mean_similarity_before": self.mean_similarity_before,
            "mean_similarity_after": self.mean_similarity_after,
        }


def _tag_similarity(emb, tag_a: str, tag_b: str) -> float:
    va = np.asarray(emb.embed(tag_a), dtype=np.float64)
    vb = np.asarray(emb.embed(tag_b), dtype=np.float64)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    # Round-off can push the ratio a last-place unit past +-1.
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def cross_verify(
    a: AnnotationSet,
    b: AnnotationSet,
    emb,
    iou_gate: float = DEFAULT_IOU_GATE,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> tuple[AnnotationSet, VerificationReport]:
    """Verify one image's annotations across the two pipelines.

    ``a`` must be the top-down set and ``b`` the bottom-up set for the
    same image.  Pipeline: Hungarian-match all boxes on 1 - IoU costs,
    drop matched pairs with IoU below ``iou_gate``, compute tag-embedding
    cosine similarity for the survivors, and retain pairs with
    similarity >= ``sim_threshold``.  ``sim_threshold`` may go down to
    -1 (cosine range), which retains every gate survivor.
    """
    if a.image_id != b.image_id:
        raise ValueError(f"image_id mismatch: {a.image_id!r} vs {b.image_id!r}")
    if a.source != "top_down" or b.source != "bottom_up":
        raise ValueError("cross_verify expects (top_down, bottom_up) in that order")
    if not 0.0 <= iou_gate <= 1.0:
        raise ValueError(f"iou_gate must lie in [0, 1], got {iou_gate}")
    if not -1.0 <= sim_threshold <= 1.0:
        raise ValueError(f"sim_threshold must lie in [-1, 1], got {sim_threshold}")

    pairs: list[tuple[int, int]] = []
    overlaps = np.zeros((len(a.instances), len(b.instances)))
    if a.instances and b.instances:
        for i, ia in enumerate(a.instances):
            for j, ib in enumerate(b.instances):
                overlaps[i, j] = iou(ia.box, ib.box)
        assignment, _ = hungarian(1.0 - overlaps)
        pairs = sorted(assignment.items())

    sims_before: list[float] = []
    sims_after: list[float] = []
    retained: list[Instance] = []
    for i, j in pairs:
        ia, ib = a.instances[i], b.instances[j]
        if overlaps[i, j] < iou_gate:
            continue
        sim = _tag_similarity(emb, ia.tag, ib.tag)
        sims_before.append(sim)
        if sim < sim_threshold:
            continue
        sims_after.append(sim)
        retained.append(Instance(
            box=ia.box,
            tag=ia.tag,
            score=ia.score,
            source="top_down",
            similarity=sim,
            alias_tag=ib.tag if ib.tag != ia.tag else None,
        ))

    n_a, n_b = len(a.instances), len(b.instances)
    denom = 0.5 * (n_a + n_b)
    report = VerificationReport(
        image_id=a.image_id,
        input_a=n_a,
        input_b=n_b,
        matched=len(pairs),
        retained=len(retained),
        retention_rate=len(retained) / denom if denom > 0 else 0.0,
        mean_similarity_before=float(np.mean(sims_before)) if sims_before else 0.0,
        mean_similarity_after=float(np.mean(sims_after)) if sims_after else 0.0,
        similarities_before=tuple(sims_before),
        similarities_after=tuple(sims_after),
    )
    verified = AnnotationSet(
        image_id=a.image_id,
        width=a.width,
        height=a.height,
        source="top_down",
        instances=tuple(retained),
    )
    return verified, report


def _load_dir(directory) -> tuple[dict[str, AnnotationSet], list[str]]:
    sets: dict[str, AnnotationSet] = {}
    errors: list[str] = []
    for path in sorted(Path(directory).glob("*.json")):
        try:
            ann = AnnotationSet.from_file(path)
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            errors.append(f"{path}: {exc}")
            continue
        if ann.image_id in sets:
            errors.append(f"{path}: duplicate image_id {ann.image_id!r}")
            continue
        sets[ann.image_id] = ann
    return sets, errors


@dataclass(frozen=True)
class BatchVerifyResult:
    reports: tuple[VerificationReport, ...]
    verified: tuple[AnnotationSet, ...]
    unpaired: tuple[str, ...]
    errors: tuple[str, ...]

    @property
    def failed(self) -> bool:
        return bool(self.errors)


def batch_verify(
    dir_a,
    dir_b,
    emb,
    iou_gate: float = DEFAULT_IOU_GATE,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    out_dir=None,
    jobs: int = 1,
) -> BatchVerifyResult:
    """Cross-verify every image_id present in both directories.

    Images present on only one side are reported as unpaired and
    produce no verified output.  Malformed files are recorded as errors
    and processing continues.  With ``out_dir`` set, one verified JSON
    file per image is written as ``<image_id>.json``.
    """
    sets_a, errors_a = _load_dir(dir_a)
    sets_b, errors_b = _load_dir(dir_b)
    shared = sorted(set(sets_a) & set(sets_b))
    unpaired = sorted(set(sets_a) ^ set(sets_b))

    def run(image_id: str):
        return cross_verify(sets_a[image_id], sets_b[image_id], emb,
                            iou_gate=iou_gate, sim_threshold=sim_threshold)

    if jobs > 1 and len(shared) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, shared))
    else:
        results = [run(image_id) for image_id in shared]

    verified = tuple(v for v, _ in results)
    reports = tuple(r for _, r in results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for v in verified:
            (out / f"{v.image_id}.json").write_text(v.to_json())
    return BatchVerifyResult(
        reports=reports,
        verified=verified,
        unpaired=tuple(unpaired),
        errors=tuple(errors_a + errors_b),
    )


def _histogram(values) -> list[int]:
    counts, _ = np.histogram(list(values), bins=HISTOGRAM_EDGES)
    return [int(c) for c in counts]


def retention_stats(reports) -> dict:
    """Aggregate counts, retention rates (mean-of-inputs base plus the
    per-pipeline bases), and tag-similarity histograms (20 bins over
    [-1, 1]) before and after similarity filtering."""
    reports = list(reports)
    input_a = sum(r.input_a for r in reports)
    input_b = sum(r.input_b for r in reports)
    matched = sum(r.matched for r in reports)
    retained = sum(r.retained for r in reports)
    before = [s for r in reports for s in r.similarities_before]
    after = [s for r in reports for s in r.similarities_after]
    denom = 0.5 * (input_a + input_b)
    return {
        "images": len(reports),
        "input_a": input_a,
        "input_b": input_b,
        "matched": matched,
        "retained": retained,
        "retention_rate": retained / denom if denom > 0 else 0.0,
        "retention_rate_top_down": retained / input_a if input_a else 0.0,
        "retention_rate_bottom_up": retained / input_b if input_b else 0.0,
        "filtered_fraction": 1.0 - (retained / denom if denom > 0 else 0.0),
        "mean_similarity_before": float(np.mean(before)) if before else 0.0,
        "mean_similarity_after": float(np.mean(after)) if after else 0.0,
        "histogram_edges": HISTOGRAM_EDGES,
        "similarity_histogram_before": _histogram(before),
        "similarity_histogram_after": _histogram(after),
    }
