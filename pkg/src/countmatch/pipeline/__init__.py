"""Prompt construction, counting client and per-image orchestration."""
from .counter import (
    CounterClientConfig,
    CounterReply,
    HttpCounter,
    ReplayCounter,
    audit_path,
    count_objects,
    parse_count_response,
)
from .prompts import PromptSpec, build_count_prompt, load_prompt_spec, parse_preset, preset
from .runner import (
    DatasetResult,
    ImageResult,
    Manifest,
    ManifestImage,
    ProposalConfig,
    StageTiming,
    load_manifest,
    process_image,
    run_counting,
    run_dataset,
    run_image,
    run_matching,
    stage_summary,
)

__all__ = [
    "CounterClientConfig",
    "CounterReply",
    "DatasetResult",
    "HttpCounter",
    "ImageResult",
    "Manifest",
    "ManifestImage",
    "PromptSpec",
    "ProposalConfig",
    "ReplayCounter",
    "StageTiming",
    "audit_path",
    "build_count_prompt",
    "count_objects",
    "load_manifest",
    "load_prompt_spec",
    "parse_count_response",
    "parse_preset",
    "preset",
    "process_image",
    "run_counting",
    "run_dataset",
    "run_image",
    "run_matching",
    "stage_summary",
]
