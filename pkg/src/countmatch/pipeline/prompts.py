"""Structured counting prompts (JSON or Markdown rendering) and built-in presets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from ..core.coco import read_json
from ..core.types import Setting
from ..errors import InputError

PERSONA_AERIAL = "You are an advanced AI model capable of understanding and analyzing aerial images."
PERSONA_RS = "You are an advanced AI model capable of understanding and analyzing remote sensing images."
RESULT_SENTENCE = (
    "Provide the results in JSON format where the keys are the category names "
    "and the values are the corresponding counts."
)
SUBCLASS_RESULT_SENTENCE = (
    "Provide the results in JSON format where the keys are the names of the "
    "subcategories and the values are the corresponding counts."
)
ANSWER_RULES = ["Ensure the category names are in singular form", "Provide the counts as integers."]
OUTPUT_FORMAT = '{ "category1": count1, "category2": count2, ... }'
SUBCLASS_OUTPUT_FORMAT = '{ "subcategory1": count1, "subcategory2": count2, ... }'


@dataclass(frozen=True)
class PromptSpec:
    setting: Setting
    persona: str
    task: str
    instructions: tuple[str, ...] = ()
    output_format: str = OUTPUT_FORMAT
    examples: tuple[Any, ...] = ()
    # open-vocabulary prompts carry "Examples"; the others carry "Answer" rules
    examples_key: str = "Examples"
    format: str = "json"

    def __post_init__(self) -> None:
        object.__setattr__(self, "setting", Setting.parse(self.setting))
        object.__setattr__(self, "instructions", tuple(self.instructions))
        object.__setattr__(self, "examples", tuple(self.examples))
        if self.format not in ("json", "markdown"):
            raise InputError(f"prompt format must be 'json' or 'markdown', got {self.format!r}")
        if self.examples_key not in ("Examples", "Answer"):
            raise InputError(f"examples_key must be 'Examples' or 'Answer', got {self.examples_key!r}")

    def with_format(self, fmt: str) -> "PromptSpec":
        return PromptSpec(
            self.setting, self.persona, self.task, self.instructions,
            self.output_format, self.examples, self.examples_key, fmt,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "setting": self.setting.value,
            "persona": self.persona,
            "task": self.task,
            "instructions": list(self.instructions),
            "output_format": self.output_format,
            "examples": list(self.examples),
            "examples_key": self.examples_key,
            "format": self.format,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PromptSpec":
        try:
            return cls(
                setting=data["setting"],
                persona=data["persona"],
                task=data["task"],
                instructions=data.get("instructions", []),
                output_format=data.get("output_format", OUTPUT_FORMAT),
                examples=data.get("examples", []),
                examples_key=data.get("examples_key", "Examples"),
                format=data.get("format", "json"),
            )
        except KeyError as exc:
            raise InputError(f"prompt spec is missing {exc.args[0]!r}") from None


def build_count_prompt(spec: PromptSpec) -> str:
    """Render the prompt with fields in the order Persona, Task, Instructions,
    Output format, Examples/Answer."""
    if spec.format == "json":
        payload = {
            "Persona": spec.persona,
            "Task": spec.task,
            "Instructions": list(spec.instructions),
            "Output format": spec.output_format,
            spec.examples_key: list(spec.examples),
        }
        return json.dumps(payload, indent=4, ensure_ascii=False)
    lines = ["## Persona", spec.persona, "", "## Task", spec.task, "", "## Instructions"]
    lines += [f"- {s}" for s in spec.instructions]
    lines += ["", "## Output format", spec.output_format, "", f"## {spec.examples_key}"]
    for ex in spec.examples:
        text = ex if isinstance(ex, str) else json.dumps(ex, ensure_ascii=False)
        lines.append(f"- {text}")
    return "\n".join(lines) + "\n"


def _category_list(names: Sequence[str]) -> str:
    return "[" + ", ".join(f"'{n}'" for n in names) + "]"


NWPU_CATEGORIES = (
    "airplane", "ship", "storage_tank", "baseball_field", "tennis_court",
    "basketball_court", "track_field", "harbor", "bridge", "vehicle",
)
DIOR_CATEGORIES = (
    "airplane", "airport", "baseball field", "basketball court", "bridge", "chimney",
    "expressway service area", "expressway toll station", "dam", "golf field",
    "ground track field", "harbor", "overpass", "ship", "stadium", "storage tank",
    "tennis court", "train station", "vehicle", "windmill",
)


def open_vocabulary_spec(
    categories: Sequence[str],
    instructions: Sequence[str] = (),
    examples: Sequence[Any] = (),
    persona: str = PERSONA_RS,
    fmt: str = "json",
) -> PromptSpec:
    head = f"The {len(categories)} categories in the dataset are: {_category_list(categories)}"
    return PromptSpec(
        setting=Setting.OPEN_VOCABULARY,
        persona=persona,
        task="Given an input satellite imagery, count the number of objects from specific categories. "
        + RESULT_SENTENCE,
        instructions=(head, *instructions),
        output_format=OUTPUT_FORMAT,
        examples=tuple(examples),
        examples_key="Examples",
        format=fmt,
    )


def open_ended_spec(instructions: Sequence[str], objects: str = "objects", fmt: str = "json") -> PromptSpec:
    return PromptSpec(
        setting=Setting.OPEN_ENDED,
        persona=PERSONA_RS,
        task=f"Given an input satellite imagery, count the number of all the visible remote sensing {objects}. "
        + RESULT_SENTENCE,
        instructions=tuple(instructions),
        output_format=OUTPUT_FORMAT,
        examples=tuple(ANSWER_RULES),
        examples_key="Answer",
        format=fmt,
    )


def open_subclass_spec(
    parent: str, instructions: Sequence[str], visible: bool = False, fmt: str = "json"
) -> PromptSpec:
    which = "visible objects" if visible else "objects"
    return PromptSpec(
        setting=Setting.OPEN_SUBCLASS,
        persona=PERSONA_RS,
        task=f"Given an input satellite imagery, count the number of {which} that belong to the "
        f"parent category **{parent}**. " + SUBCLASS_RESULT_SENTENCE,
        instructions=tuple(instructions),
        output_format=SUBCLASS_OUTPUT_FORMAT,
        examples=tuple(ANSWER_RULES),
        examples_key="Answer",
        format=fmt,
    )


_NWPU_EXAMPLES = (
    {
        "airplane": 2, "ship": 0, "storage_tank": 3, "baseball_field": 1, "tennis_court": 0,
        "basketball_court": 0, "track_field": 0, "harbor": 6, "bridge": 0, "vehicle": 0,
    },
    {
        "airplane": 5, "ship": 2, "storage_tank": 0, "baseball_field": 0, "tennis_court": 1,
        "basketball_court": 0, "track_field": 0, "harbor": 0, "bridge": 1, "vehicle": 10,
    },
)
_HARBOR_RULE = (
    "Harbor is defined as a pier to dock ships. If multiple harbors are visible in the image, "
    "count each distinct pier separately."
)
_EMPTY_OBJECT_RULE = "If none of the objects belong to the parent category is visible, output a empty JSON object like { }"


def _nwpu_open_vocabulary() -> PromptSpec:
    spec = open_vocabulary_spec(
        NWPU_CATEGORIES,
        instructions=(
            "The spatial resolution of the imagery in the dataset ranges from 0.08 m to 2 m.",
            "Do not count ships or vehicles that are hard to annotate in the relatively low-resolution "
            "images as they are not annotated due to the small size.",
            _HARBOR_RULE,
        ),
        examples=_NWPU_EXAMPLES,
        persona=PERSONA_AERIAL,
    )
    return PromptSpec(
        spec.setting, spec.persona, spec.task, spec.instructions,
        '{"category1": count1, "category2": count2, ... }', spec.examples, "Examples",
    )


def _dior_open_vocabulary() -> PromptSpec:
    return open_vocabulary_spec(
        DIOR_CATEGORIES,
        instructions=(
            "The spatial resolution of the images is 0.3m-30m.",
            "Airport is a large area of land where aircraft can take off and land. It includes runways "
            "and other facilities. Do not count airport if the it is not compeletely visible in the image.",
            _HARBOR_RULE,
            "Expressway toll station is a toll booth at the entrance of the expressway and spans the road.",
            "Expressway service area is a rest area along an expressway. If it exsits on the both sides "
            "of the expressway, count them separately.",
            "Overpass is a road crossing over another road. Bridge is a road spanning a river. "
            "Distinguish them carefully.",
            "If the overpass or bridge is composed of parallel, separate sections (for example, different "
            "lanes or directions of traffic), each section should be counted individually.",
            "Count every ship and vehicle carefully, even the resolution is low and the objects are small "
            "and dense.",
            "If none of the objects among the categories is visible, output a JSON object with all "
            "categories set to 0",
        ),
        examples=(
            '{ "airplane": 2, "airport": 0, "baseball field": 0, "basketball court": 0, "bridge": 1, ... }',
            '{ "airplane": 0, "airport": 0, "baseball field": 2, "basketball court": 6, "bridge": 0, ... }',
        ),
    )


def _nwpu_open_ended() -> PromptSpec:
    return open_ended_spec(
        (
            "The spatial resolution of the imagery in the dataset ranges from 0.08 m to 2 m.",
            "Do not count ships or vehicles that are too samll and are hard to annotate in the relatively "
            "low-resolution images.",
            "Only count objects that are clearly visible in the imagery. If a category is not visible, "
            "do not include it in the output.",
        )
    )


def _dior_open_ended() -> PromptSpec:
    return open_ended_spec(
        (
            "The spatial resolution of the imagery in the dataset ranges from 0.3 m to 30 m.",
            "If the resolution is too limited or the scene is too dense to accurately count certain "
            "objects, exclude those objects from the results.",
            "Only count objects that are clearly visible in the imagery.",
        ),
        objects="objects or scenes",
    )


def _nwpu_subclass(parent: str) -> PromptSpec:
    if parent == "sports field":
        rules = (
            "The spatial resolution of the images is 0.08m-2m.",
            "Do not count objects that are hard to annotate in the relatively low-resolution images as "
            "they are not annotated due to the small size.",
            _EMPTY_OBJECT_RULE,
        )
    else:
        rules = (
            "The spatial resolution of the imagery in the dataset ranges from 0.08 m to 2 m.",
            "Do not count boats or land vehicles that are hard to annotate in the relatively "
            "low-resolution images as they are not annotated due to the small size.",
            _EMPTY_OBJECT_RULE,
        )
    return open_subclass_spec(parent, rules)


def _dior_subclass(parent: str) -> PromptSpec:
    return open_subclass_spec(
        parent,
        (
            "The spatial resolution of the images is 0.3m-30m.",
            "Return only the categories and counts that meet the visibility and resolution criteria. "
            + _EMPTY_OBJECT_RULE,
        ),
        visible=True,
    )


PARENT_CATEGORIES = ("sports field", "means of transport")


def preset(dataset: str, setting: Union[str, Setting], parent: Optional[str] = None, fmt: str = "json") -> PromptSpec:
    """Built-in prompt for ``dataset`` in {"nwpu", "dior"}."""
    ds = dataset.strip().lower().replace("-", "").replace("_", "")
    ds = {"nwpuvhr10": "nwpu"}.get(ds, ds)
    st = Setting.parse(setting)
    if ds not in ("nwpu", "dior"):
        raise InputError(f"no preset prompts for dataset {dataset!r}")
    if st is Setting.OPEN_VOCABULARY:
        spec = _nwpu_open_vocabulary() if ds == "nwpu" else _dior_open_vocabulary()
    elif st is Setting.OPEN_ENDED:
        spec = _nwpu_open_ended() if ds == "nwpu" else _dior_open_ended()
    else:
        if parent not in PARENT_CATEGORIES:
            raise InputError(f"open-subclass presets need parent in {PARENT_CATEGORIES}, got {parent!r}")
        spec = _nwpu_subclass(parent) if ds == "nwpu" else _dior_subclass(parent)
    return spec.with_format(fmt)


def parse_preset(text: str, fmt: str = "json") -> PromptSpec:
    """Parse ``dataset:setting[:parent]``, e.g. ``dior:open-subclass:sports field``."""
    parts = text.split(":", 2)
    if len(parts) < 2:
        raise InputError(f"preset must look like dataset:setting[:parent], got {text!r}")
    return preset(parts[0], parts[1], parts[2] if len(parts) == 3 else None, fmt)


def load_prompt_spec(path: Union[str, Path], fmt: Optional[str] = None) -> PromptSpec:
    spec = PromptSpec.from_dict(read_json(path))
    return spec.with_format(fmt) if fmt else spec
