"""Similarity matrices over externally computed embeddings, prompt templating,
and generated-name to ground-truth-name equivalence."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import FormatError, NormalizationError, ProviderError, ShapeError, TemplateError

DEFAULT_TEMPLATE = "a satellite image of a {category}"
PLACEHOLDER = "{category}"
DEFAULT_EQUIVALENCE_THRESHOLD = 0.95


@dataclass(frozen=True)
class SimilarityMatrix:
    """Dense (n_masks, n_categories) cosine similarities."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"similarity matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(np.abs(v) > 1.0 + 1e-9):
            raise ShapeError("similarity entries must be finite and within [-1, 1]")
        v = np.clip(v, -1.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_masks(self) -> int:
        return self.values.shape[0]

    @property
    def n_categories(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CategoryPrompt:
    category: str
    rendered: str


@dataclass
class EquivalenceMap:
    """Generated category name -> ground-truth name, or None when unmatched."""

    entries: dict[str, Optional[str]] = field(default_factory=dict)
    threshold: float = DEFAULT_EQUIVALENCE_THRESHOLD
    scores: dict[str, float] = field(default_factory=dict)

    def get(self, name: str) -> Optional[str]:
        return self.entries.get(name)

    @property
    def unmatched(self) -> list[str]:
        return [k for k, v in self.entries.items() if v is None]


def normalize(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"embedding must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NormalizationError("embedding has non-finite values")
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise NormalizationError("cannot normalize a zero vector")
    return arr / norm


def _normalize_rows(mat: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(mat)):
        raise NormalizationError(f"{what} embeddings contain non-finite values")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise NormalizationError(f"{what} embedding {int(np.argmin(norms))} is a zero vector")
    return mat / norms[:, None]


def cosine_matrix(mask_embs, cat_embs) -> SimilarityMatrix:
    """Entry (i, j) is the cosine between mask embedding i and category embedding j."""
    a = np.asarray(mask_embs, dtype=np.float64)
    b = np.asarray(cat_embs, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ShapeError(f"need two non-empty embedding stacks, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    sims = _normalize_rows(a, "mask") @ _normalize_rows(b, "category").T
    return SimilarityMatrix(np.clip(sims, -1.0, 1.0))


def render_prompts(categories: Sequence[str], template: str = DEFAULT_TEMPLATE) -> list[CategoryPrompt]:
    if template.count(PLACEHOLDER) != 1:
        raise TemplateError(f"template must contain exactly one {PLACEHOLDER}: {template!r}")
    return [CategoryPrompt(c, template.replace(PLACEHOLDER, c)) for c in categories]


class EmbeddingProvider(Protocol):
    """Returns one row per requested name. ``single_flight`` providers are called serially."""

    single_flight: bool

    def embed(self, names: Sequence[str]) -> np.ndarray: ...


class FileEmbeddingProvider:
    """Reads ``index.json`` + ``vectors.bin`` (little-endian float32, row-major)."""

    single_flight = False

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        index_path = self.directory / "index.json"
        vec_path = self.directory / "vectors.bin"
        try:
            index = json.loads(index_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FormatError(f"missing embedding index: {index_path}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{index_path}: invalid JSON ({exc})") from None
        try:
            dim, count, names = int(index["dim"]), int(index["count"]), list(index["names"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{index_path}: needs integer 'dim', 'count' and a 'names' list") from None
        if index.get("dtype") != "f32le":
            raise FormatError(f"{index_path}: unsupported dtype {index.get('dtype')!r}, expected 'f32le'")
        if dim <= 0 or count != len(names):
            raise FormatError(f"{index_path}: count {count} / names {len(names)} / dim {dim} disagree")
        if len(set(names)) != len(names):
            raise FormatError(f"{index_path}: duplicate names")
        if not vec_path.exists():
            raise FormatError(f"missing embedding vectors: {vec_path}")
        size = vec_path.stat().st_size
        if size != count * dim * 4:
            raise FormatError(
                f"{vec_path}: {size} bytes, expected {count * dim * 4} for {count} x {dim} float32"
            )
        self.dim = dim
        self.vectors = np.fromfile(vec_path, dtype="<f4").reshape(count, dim)
        self.rows = {name: k for k, name in enumerate(names)}

    def __contains__(self, name: str) -> bool:
        return name in self.rows

    def embed(self, names: Sequence[str]) -> np.ndarray:
        idx = []
        for name in names:
            if name not in self.rows:
                raise ProviderError(f"no embedding for {name!r} in {self.directory}", name=name)
            idx.append(self.rows[name])
        return self.vectors[idx].astype(np.float64) if idx else np.zeros((0, self.dim))


class HttpEmbeddingProvider:
    """POSTs ``{"texts": [...]}`` and expects ``{"embeddings": [[...], ...]}`` back."""

    def __init__(self, url: str, timeout: float = 30.0, single_flight: bool = False, client=None):
        import httpx

        self.url = url
        self.single_flight = single_flight
        self._client = client or httpx.Client(timeout=timeout)
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed(self, names: Sequence[str]) -> np.ndarray:
        import httpx

        with self._lock:
            missing = [n for n in dict.fromkeys(names) if n not in self._cache]
        if missing:
            try:
                resp = self._client.post(self.url, json={"texts": missing})
                resp.raise_for_status()
                rows = resp.json()["embeddings"]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise ProviderError(
                    f"embedding request for {missing[0]!r} failed: {exc}", name=missing[0]
                ) from exc
            if len(rows) != len(missing):
                raise ProviderError(
                    f"embedding service returned {len(rows)} vectors for {len(missing)} texts",
                    name=missing[0],
                )
            with self._lock:
                for name, row in zip(missing, rows):
                    self._cache[name] = np.asarray(row, dtype=np.float64)
        with self._lock:
            return np.stack([self._cache[n] for n in names]) if names else np.zeros((0, 0))


class CombinedProvider:
    """Looks names up in several providers in order."""

    def __init__(self, providers: Sequence):
        self.providers = list(providers)
        self.single_flight = any(getattr(p, "single_flight", False) for p in self.providers)

    def embed(self, names: Sequence[str]) -> np.ndarray:
        rows = []
        for name in names:
            last: Optional[ProviderError] = None
            for p in self.providers:
                try:
                    rows.append(p.embed([name])[0])
                    break
                except ProviderError as exc:
                    last = exc
            else:
                raise last or ProviderError(f"no embedding for {name!r}", name=name)
        return np.stack(rows)


def write_embedding_file(directory: str | Path, names: Sequence[str], vectors) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(vectors, dtype="<f4")
    if arr.ndim != 2 or arr.shape[0] != len(names):
        raise ShapeError(f"need {len(names)} rows, got array of shape {arr.shape}")
    index = {"dim": int(arr.shape[1]), "count": len(names), "dtype": "f32le", "names": list(names)}
    (directory / "index.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    arr.tofile(directory / "vectors.bin")


def match_generated_categories(
    generated: Sequence[str],
    ground_truth: Sequence[str],
    provider: EmbeddingProvider,
    threshold: float = DEFAULT_EQUIVALENCE_THRESHOLD,
    template: str = DEFAULT_TEMPLATE,
) -> EquivalenceMap:
    """Map each generated name to its most similar ground-truth name.

    Case-insensitive exact matches win outright. Otherwise the best
    ground-truth name whose prompt-embedding cosine is strictly above
    ``threshold`` is taken (first in ``ground_truth`` order on ties).
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    result = EquivalenceMap(threshold=threshold)
    by_lower = {}
    for name in ground_truth:
        by_lower.setdefault(name.strip().lower(), name)
    pending = []
    for name in dict.fromkeys(generated):
        hit = by_lower.get(name.strip().lower())
        if hit is not None:
            result.entries[name] = hit
            result.scores[name] = 1.0
        else:
            pending.append(name)
    if not pending:
        return result
    if not ground_truth:
        result.entries.update({name: None for name in pending})
        return result
    gen_prompts = [p.rendered for p in render_prompts(pending, template)]
    gt_prompts = [p.rendered for p in render_prompts(list(ground_truth), template)]
    gen_vecs = _embed_named(provider, gen_prompts)
    gt_vecs = _embed_named(provider, gt_prompts)
    sims = cosine_matrix(gen_vecs, gt_vecs).values
    for row, name in zip(sims, pending):
        best = int(np.argmax(row))
        result.scores[name] = float(row[best])
        result.entries[name] = ground_truth[best] if row[best] > threshold else None
    return result


def _embed_named(provider: EmbeddingProvider, names: Sequence[str]) -> np.ndarray:
    try:
        return np.asarray(provider.embed(names), dtype=np.float64)
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"embedding provider failed on {names[0]!r}: {exc}", name=names[0]) from exc


def lookup_embeddings(provider: EmbeddingProvider, names: Sequence[str], lock: Optional[threading.Lock] = None) -> np.ndarray:
    """Call ``provider`` under ``lock`` when it declares single-flight semantics."""
    if lock is not None and getattr(provider, "single_flight", False):
        with lock:
            return _embed_named(provider, names)
    return _embed_named(provider, names)

