"""Per-image orchestration: proposals and embeddings in, labelled detections out."""
from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, TypeVar, Union

from ..core.coco import ImageInfo, load_proposals, read_json
from ..core.types import CountPrediction, Detection, MaskProposal
from ..errors import CountMatchError, FormatError, InputError
from ..matcher import Assignment, MatchingProblem, solve_matching
from ..similarity import (
    DEFAULT_TEMPLATE,
    EmbeddingProvider,
    FileEmbeddingProvider,
    cosine_matrix,
    lookup_embeddings,
    render_prompts,
)
from .counter import Counter, count_objects

log = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class ProposalConfig:
    """Settings handed to the external mask generator; recorded, never executed here."""

    pred_iou_thresh: float = 0.75
    stability_score_thresh: float = 0.75
    points_per_side: int = 24
    crop_n_layers: int = 1
    box_nms_thresh: float = 0.5

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ManifestImage:
    id: str
    file: Optional[Path]
    proposals: Path
    mask_embeddings: Path
    width: int
    height: int

    @property
    def info(self) -> ImageInfo:
        return ImageInfo(self.id, self.width, self.height, self.file.name if self.file else "")


@dataclass(frozen=True)
class Manifest:
    images: tuple[ManifestImage, ...]
    category_embeddings: Optional[Path] = None
    ground_truth: Optional[Path] = None


def load_manifest(path: Union[str, Path]) -> Manifest:
    """Read a manifest; relative paths are resolved against its directory."""
    path = Path(path)
    data = read_json(path)
    root = path.parent

    def resolve(value) -> Optional[Path]:
        if value in (None, ""):
            return None
        p = Path(value)
        return p if p.is_absolute() else root / p

    if not isinstance(data, dict) or not isinstance(data.get("images"), list):
        raise FormatError(f"{path}: manifest needs an 'images' list")
    images = []
    seen: set[str] = set()
    for k, item in enumerate(data["images"]):
        try:
            image_id = str(item["id"])
            entry = ManifestImage(
                id=image_id,
                file=resolve(item.get("file")),
                proposals=resolve(item["proposals"]),
                mask_embeddings=resolve(item["mask_embeddings"]),
                width=int(item["width"]),
                height=int(item["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: image entry {k} is malformed ({exc})") from None
        if image_id in seen:
            raise FormatError(f"{path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        images.append(entry)
    return Manifest(
        images=tuple(images),
        category_embeddings=resolve(data.get("category_embeddings")),
        ground_truth=resolve(data.get("ground_truth")),
    )


@dataclass
class StageTiming:
    image_id: str
    counter_ms: Optional[float] = None
    proposal_ingest_ms: float = 0.0
    embedding_ms: float = 0.0
    matching_ms: float = 0.0
    total_ms: float = 0.0
    n_proposals: int = 0
    n_detections: int = 0
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


STAGES = ("counter_ms", "proposal_ingest_ms", "embedding_ms", "matching_ms", "total_ms")


@dataclass
class ImageResult:
    image_id: str
    detections: list[Detection]
    timing: StageTiming
    assignment: Optional[Assignment] = None
    warnings: list[str] = field(default_factory=list)


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def run_image(
    counts: CountPrediction,
    proposals: Sequence[MaskProposal],
    mask_provider: Optional[EmbeddingProvider],
    cat_provider: Optional[EmbeddingProvider],
    template: str = DEFAULT_TEMPLATE,
    lock: Optional[threading.Lock] = None,
) -> ImageResult:
    """Label proposals with counted categories by solving the matching problem.

    Only categories with a positive count take part. Detections follow
    proposal order and carry no score.
    """
    start = time.perf_counter()
    timing = StageTiming(counts.image_id, n_proposals=len(proposals))
    positive = counts.positive()
    warnings: list[str] = []
    if not positive:
        timing.total_ms = _ms(start)
        return ImageResult(counts.image_id, [], timing)
    if not proposals:
        warnings.append(f"image {counts.image_id}: counts given but no proposals")
        log.warning(warnings[-1])
        timing.total_ms = _ms(start)
        return ImageResult(counts.image_id, [], timing, warnings=warnings)
    if mask_provider is None or cat_provider is None:
        raise InputError(f"image {counts.image_id}: embeddings are required for matching")

    names = list(positive)
    t = time.perf_counter()
    mask_vecs = lookup_embeddings(mask_provider, [p.embedding_key for p in proposals], lock)
    cat_vecs = lookup_embeddings(cat_provider, [p.rendered for p in render_prompts(names, template)], lock)
    sims = cosine_matrix(mask_vecs, cat_vecs)
    timing.embedding_ms = _ms(t)

    t = time.perf_counter()
    assignment = solve_matching(MatchingProblem(sims.values, [positive[n] for n in names]))
    timing.matching_ms = _ms(t)

    detections = [
        Detection(counts.image_id, names[j], proposals[i].bbox, proposals[i].mask)
        for i, j in assignment.pairs
    ]
    timing.n_detections = len(detections)
    timing.total_ms = _ms(start)
    return ImageResult(counts.image_id, detections, timing, assignment, warnings)


def process_image(
    entry: ManifestImage,
    counts: CountPrediction,
    cat_provider: Optional[EmbeddingProvider],
    template: str = DEFAULT_TEMPLATE,
    lock: Optional[threading.Lock] = None,
    counter_timing: Optional[Mapping[str, Any]] = None,
) -> ImageResult:
    """Load one manifest entry's proposals and embeddings, then call :func:`run_image`."""
    start = time.perf_counter()
    if not entry.proposals.exists():
        raise InputError(f"image {entry.id}: proposal file not found: {entry.proposals}")
    proposals = load_proposals(entry.proposals, entry.info)
    ingest_ms = _ms(start)
    mask_provider = None
    if counts.positive() and proposals:
        t = time.perf_counter()
        mask_provider = FileEmbeddingProvider(entry.mask_embeddings)
        ingest_ms += _ms(t)
    result = run_image(counts, proposals, mask_provider, cat_provider, template, lock)
    timing = result.timing
    timing.proposal_ingest_ms = ingest_ms
    timing.total_ms = ingest_ms + timing.total_ms
    if counter_timing:
        usage = counter_timing.get("usage") or {}
        timing.counter_ms = counter_timing.get("latency_ms")
        timing.prompt_tokens = usage.get("prompt_tokens")
        timing.completion_tokens = usage.get("completion_tokens")
        if timing.counter_ms is not None:
            timing.total_ms += float(timing.counter_ms)
    return result


@dataclass
class Failure:
    image_id: str
    error: str
    kind: str

    def to_dict(self) -> dict[str, str]:
        return {"image_id": self.image_id, "error": self.error, "type": self.kind}


def _map_ordered(
    fn: Callable[[ManifestImage], T],
    images: Sequence[ManifestImage],
    workers: int,
    keep_going: bool,
) -> tuple[list[tuple[ManifestImage, T]], list[Failure]]:
    """Apply ``fn`` with bounded parallelism; results keep manifest order."""
    if workers < 1:
        raise InputError(f"workers must be at least 1, got {workers}")
    done: list[tuple[ManifestImage, T]] = []
    failures: list[Failure] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [(entry, pool.submit(fn, entry)) for entry in images]
        for entry, fut in futures:
            try:
                done.append((entry, fut.result()))
            except CountMatchError as exc:
                if not keep_going:
                    for _, other in futures:
                        other.cancel()
                    raise
                log.error("image %s failed: %s", entry.id, exc)
                failures.append(Failure(entry.id, str(exc), type(exc).__name__))
    return done, failures


def run_counting(
    manifest: Manifest,
    counter: Counter,
    prompt: str,
    audit_dir: Union[str, Path, None] = None,
    workers: int = 1,
    keep_going: bool = False,
) -> tuple[dict[str, CountPrediction], list[Failure]]:
    def one(entry: ManifestImage) -> CountPrediction:
        pred, _ = count_objects(counter, entry.id, entry.file, prompt, audit_dir)
        log.info("counted %s: %s", entry.id, dict(pred.counts))
        return pred

    done, failures = _map_ordered(one, manifest.images, workers, keep_going)
    return {entry.id: pred for entry, pred in done}, failures


@dataclass
class DatasetResult:
    detections: list[Detection]
    timings: list[StageTiming]
    failures: list[Failure]
    warnings: list[str] = field(default_factory=list)


def run_matching(
    manifest: Manifest,
    counts: Mapping[str, CountPrediction],
    cat_provider: Optional[EmbeddingProvider] = None,
    template: str = DEFAULT_TEMPLATE,
    workers: int = 1,
    keep_going: bool = False,
    counter_records: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> DatasetResult:
    """Match every manifest image; ``cat_provider`` defaults to the manifest's category embeddings."""
    if cat_provider is None and manifest.category_embeddings is not None:
        needs = any(c.positive() for c in counts.values())
        if needs:
            cat_provider = FileEmbeddingProvider(manifest.category_embeddings)
    lock = threading.Lock()

    def one(entry: ManifestImage) -> ImageResult:
        if entry.id not in counts:
            raise InputError(f"no counts for image {entry.id}")
        record = counter_records.get(entry.id) if counter_records else None
        res = process_image(entry, counts[entry.id], cat_provider, template, lock, record)
        log.info("matched %s: %d detections", entry.id, len(res.detections))
        return res

    done, failures = _map_ordered(one, manifest.images, workers, keep_going)
    detections: list[Detection] = []
    timings: list[StageTiming] = []
    warnings: list[str] = []
    for _, res in done:
        detections.extend(res.detections)
        timings.append(res.timing)
        warnings.extend(res.warnings)
    return DatasetResult(detections, timings, failures, warnings)


def run_dataset(
    manifest: Manifest,
    counter: Counter,
    prompt: str,
    cat_provider: Optional[EmbeddingProvider] = None,
    template: str = DEFAULT_TEMPLATE,
    audit_dir: Union[str, Path, None] = None,
    workers: int = 1,
    keep_going: bool = False,
) -> DatasetResult:
    """Count, then match, every image in the manifest."""
    counts, failures = run_counting(manifest, counter, prompt, audit_dir, workers, keep_going)
    records = None
    if audit_dir is not None:
        from .counter import audit_path

        records = {i: read_json(audit_path(audit_dir, i)) for i in counts}
    ok = Manifest(
        tuple(e for e in manifest.images if e.id in counts),
        manifest.category_embeddings,
        manifest.ground_truth,
    )
    result = run_matching(ok, counts, cat_provider, template, workers, keep_going, records)
    result.failures = failures + result.failures
    return result


def stage_summary(timings: Sequence[StageTiming]) -> dict[str, dict[str, Optional[float]]]:
    """Per-stage total, mean and median over images (missing values skipped)."""
    import statistics

    out: dict[str, dict[str, Optional[float]]] = {}
    for stage in STAGES:
        vals = [getattr(t, stage) for t in timings if getattr(t, stage) is not None]
        out[stage] = {
            "count": len(vals),
            "total": sum(vals) if vals else None,
            "mean": statistics.fmean(vals) if vals else None,
            "median": statistics.median(vals) if vals else None,
        }
    return out
