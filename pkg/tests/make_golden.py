"""Build the golden end-to-end fixture under tests/data/golden.

Five 48x48 images, four classes. Every ground-truth object has a proposal
whose embedding is the basis vector of its class; distractor proposals
point partly at a class and partly at a spare axis, so they lose every
comparison. Expected detections come from the brute-force matcher, not
from the code path under test.

Run ``python3 tests/make_golden.py`` to regenerate.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from countmatch.core.coco import write_json
from countmatch.core.geometry import rle_encode
from countmatch.matcher import MatchingProblem, brute_force_matching
from countmatch.similarity import DEFAULT_TEMPLATE, write_embedding_file

HERE = Path(__file__).parent
GOLDEN = HERE / "data" / "golden"

SIZE = 48
CLASSES = ["airplane", "ship", "storage_tank", "vehicle"]
SPARE_AXIS = len(CLASSES)
DIM = len(CLASSES) + 1

# image id -> list of ground-truth class indices, one per object
LAYOUT = {
    "img1": [0, 0, 1],
    "img2": [1, 1, 3, 3],
    "img3": [2, 3, 3, 0],
    "img4": [1, 2, 3],
    "img5": [],
}
# distractor proposals per image: the class axis they lean towards
DISTRACTORS = {"img1": [1, 3], "img2": [0, 2], "img3": [1, 2], "img4": [0, 3], "img5": [0]}

# raw counter replies, deliberately varied in formatting
REPLIES = {
    "img1": '```json\n{"Airplane": 2, "ship": 1, "vehicle": 0}\n```',
    "img2": 'Here are the counts: {"ship": 2, "vehicle": 2.0}',
    "img3": '{"storage_tank": 1, "vehicle": 2, "airplane": 1}',
    "img4": '```\n{"ship": 1, "storage_tank": 1, "vehicle": 1, "airplane": 0}\n```',
    "img5": '{"airplane": 0}',
}
USAGE = {
    "img1": {"prompt_tokens": 812, "completion_tokens": 19},
    "img2": {"prompt_tokens": 812, "completion_tokens": 14},
    "img3": {"prompt_tokens": 812, "completion_tokens": 22},
    "img4": {"prompt_tokens": 812, "completion_tokens": None},
    "img5": {"prompt_tokens": None, "completion_tokens": None},
}


def cell_mask(slot: int, size: int = SIZE) -> np.ndarray:
    """A rectangle in grid cell ``slot`` (4x4 cells of 12 px); shapes vary with the slot."""
    r, c = divmod(slot, 4)
    grid = np.zeros((size, size), dtype=bool)
    h = 4 + slot % 5
    w = 3 + (slot * 3) % 7
    grid[r * 12 + 1 : r * 12 + 1 + h, c * 12 + 2 : c * 12 + 2 + w] = True
    return grid


def embedding(axis: int, distractor: bool) -> np.ndarray:
    v = np.zeros(DIM)
    if distractor:
        v[axis], v[SPARE_AXIS] = 0.6, 0.8
    else:
        v[axis] = 1.0
    return v


def build(root: Path = GOLDEN) -> None:
    root.mkdir(parents=True, exist_ok=True)
    images, annotations, manifest_images = [], [], []
    expected = []
    ann_id = 1
    for image_id, objects in LAYOUT.items():
        props, prop_vecs, names = [], [], []
        slot = 0
        for cls in objects:
            rle = rle_encode(cell_mask(slot))
            bbox = rle.tight_bbox().to_xywh()
            annotations.append(
                {"id": ann_id, "image_id": image_id, "category_id": cls + 1, "bbox": bbox,
                 "segmentation": rle.to_coco(), "area": rle.area, "iscrowd": 0}
            )
            ann_id += 1
            props.append({"id": slot, "bbox": bbox, "segmentation": rle.to_coco()})
            prop_vecs.append(embedding(cls, False))
            slot += 1
        for axis in DISTRACTORS[image_id]:
            rle = rle_encode(cell_mask(slot))
            props.append({"id": slot, "bbox": rle.tight_bbox().to_xywh(), "segmentation": rle.to_coco()})
            prop_vecs.append(embedding(axis, True))
            slot += 1
        names = [f"{image_id}#{p['id']}" for p in props]
        write_json(root / "proposals" / f"{image_id}.json", props)
        write_embedding_file(root / "mask_embeddings" / image_id, names, np.array(prop_vecs))
        images.append({"id": image_id, "width": SIZE, "height": SIZE, "file_name": f"{image_id}.png"})
        manifest_images.append(
            {"id": image_id, "proposals": f"proposals/{image_id}.json",
             "mask_embeddings": f"mask_embeddings/{image_id}", "width": SIZE, "height": SIZE}
        )

        counts = {}
        for cls in objects:
            counts[CLASSES[cls]] = counts.get(CLASSES[cls], 0) + 1
        write_json(
            root / "audit" / f"{image_id}.json",
            {"image_id": image_id, "prompt": "", "raw_response": REPLIES[image_id], "parsed": None,
             "usage": USAGE[image_id], "latency_ms": 1000.0 + 250.0 * len(objects), "request": {}},
        )
        order = [c for c in dict.fromkeys(json.loads(_strip(REPLIES[image_id])))]
        order = [c.lower() for c in order if counts.get(c.lower(), 0) > 0]
        if not order:
            continue
        unit = np.array(prop_vecs) / np.linalg.norm(prop_vecs, axis=1, keepdims=True)
        cats = np.eye(DIM)[[CLASSES.index(c) for c in order]]
        result = brute_force_matching(MatchingProblem(unit @ cats.T, [counts[c] for c in order]))
        for i, j in result.pairs:
            expected.append(
                {"image_id": image_id, "category_name": order[j], "category_id": CLASSES.index(order[j]) + 1,
                 "bbox": props[i]["bbox"], "segmentation": props[i]["segmentation"]}
            )

    write_json(
        root / "gt.json",
        {"images": images, "annotations": annotations,
         "categories": [{"id": k + 1, "name": n} for k, n in enumerate(CLASSES)]},
    )
    write_embedding_file(
        root / "category_embeddings",
        [DEFAULT_TEMPLATE.replace("{category}", c) for c in CLASSES],
        np.eye(DIM)[: len(CLASSES)],
    )
    write_json(
        root / "manifest.json",
        {"images": manifest_images, "category_embeddings": "category_embeddings", "ground_truth": "gt.json"},
    )
    write_json(root / "expected" / "detections.json", expected)


def _strip(reply: str) -> str:
    start, end = reply.index("{"), reply.rindex("}")
    return reply[start : end + 1]


if __name__ == "__main__":
    build()
    print(f"wrote {GOLDEN}")
