from __future__ import annotations

import json

import numpy as np
import pytest

from countmatch.core.coco import (
    ImageInfo,
    detections_to_coco,
    load_ground_truth,
    parse_detections,
    parse_ground_truth,
    parse_proposals,
    proposals_to_coco,
    read_json,
)
from countmatch.core.geometry import rle_encode
from countmatch.core.types import BoundingBox, CountPrediction, Detection, MaskProposal, Setting
from countmatch.errors import FormatError, InputError


def square(x0, y0, side, size=10):
    g = np.zeros((size, size), bool)
    g[y0 : y0 + side, x0 : x0 + side] = True
    return rle_encode(g)


def test_box_validation_and_xywh():
    b = BoundingBox.from_xywh([1, 2, 3, 4])
    assert b.as_tuple() == (1, 2, 4, 6)
    assert b.to_xywh() == [1, 2, 3, 4]
    assert b.area == 12
    with pytest.raises(InputError):
        BoundingBox(5, 0, 1, 1)
    with pytest.raises(InputError):
        BoundingBox(0, 0, float("inf"), 1)


def test_count_prediction_rules():
    p = CountPrediction("a", {" Ship ": 3, "harbor": 0})
    assert p.counts == {"Ship": 3, "harbor": 0}
    assert p.positive() == {"Ship": 3}
    with pytest.raises(InputError):
        CountPrediction("a", {"ship": 1, "SHIP": 2})
    with pytest.raises(InputError):
        CountPrediction("a", {"ship": -1})
    with pytest.raises(InputError):
        CountPrediction("a", {"ship": True})


def test_proposal_requires_tight_box():
    m = square(2, 3, 4)
    assert MaskProposal.from_mask(0, "i", m).bbox == BoundingBox(2, 3, 6, 7)
    with pytest.raises(InputError):
        MaskProposal(0, "i", m, BoundingBox(0, 0, 6, 7))
    with pytest.raises(InputError):
        MaskProposal.from_mask(0, "i", rle_encode(np.zeros((4, 4), bool)))
    assert MaskProposal.from_mask(7, "img", m).embedding_key == "img#7"


def test_detection_score_range():
    with pytest.raises(InputError):
        Detection("i", "a", BoundingBox(0, 0, 1, 1), score=1.5)


def test_setting_aliases():
    assert Setting.parse("OV") is Setting.OPEN_VOCABULARY
    assert Setting.parse("open_subclass") is Setting.OPEN_SUBCLASS
    with pytest.raises(InputError):
        Setting.parse("closed")


def test_ground_truth_polygon_and_rle():
    data = {
        "images": [{"id": 1, "width": 10, "height": 10}],
        "categories": [{"id": 3, "name": "ship"}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 3, "segmentation": [[1, 1, 4, 1, 4, 4, 1, 4]]},
            {"id": 2, "image_id": 1, "category_id": 3, "bbox": [5, 5, 2, 2], "segmentation": square(5, 5, 2).to_coco()},
        ],
    }
    gt = parse_ground_truth(data)
    assert gt.category_names == ["ship"]
    assert [d.image_id for d in gt.instances] == ["1", "1"]
    assert gt.instances[0].bbox == BoundingBox(1, 1, 4, 4)
    assert gt.has_masks()


def test_ground_truth_unknown_category():
    with pytest.raises(FormatError):
        parse_ground_truth({"images": [], "categories": [], "annotations": [{"id": 1, "image_id": 1, "category_id": 9, "bbox": [0, 0, 1, 1]}]})


def test_detection_round_trip():
    m = square(1, 1, 3)
    dets = [Detection("x", "ship", m.tight_bbox(), m, 0.5), Detection("x", "car", BoundingBox(0, 0, 2, 2))]
    out = detections_to_coco(dets, {"ship": 4})
    assert out[0]["category_id"] == 4 and "category_id" not in out[1]
    back = parse_detections(json.loads(json.dumps(out)))
    assert back == dets


def test_detection_category_from_id():
    dets = parse_detections([{"image_id": 1, "category_id": 2, "bbox": [0, 0, 1, 1]}], categories={2: "ship"})
    assert dets[0].category == "ship"
    with pytest.raises(FormatError):
        parse_detections([{"image_id": 1, "category_id": 2, "bbox": [0, 0, 1, 1]}])


def test_proposals_parse_and_emit():
    info = ImageInfo("im", 10, 10)
    props = [MaskProposal.from_mask(0, "im", square(0, 0, 2)), MaskProposal.from_mask(5, "im", square(4, 4, 3))]
    assert parse_proposals(proposals_to_coco(props), info) == props
    assert parse_proposals({"annotations": proposals_to_coco(props)}, info) == props


def test_proposals_reject_duplicates_and_bad_boxes():
    info = ImageInfo("im", 10, 10)
    seg = square(0, 0, 2).to_coco()
    with pytest.raises(FormatError):
        parse_proposals([{"id": 1, "segmentation": seg}, {"id": 1, "segmentation": seg}], info)
    with pytest.raises(FormatError):
        parse_proposals([{"id": 1, "segmentation": seg, "bbox": [0, 0, 5, 5]}], info)


def test_read_json_errors(tmp_path):
    with pytest.raises(InputError):
        read_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(FormatError):
        read_json(bad)


def test_golden_ground_truth_loads(golden):
    gt = load_ground_truth(golden / "gt.json")
    assert len(gt.images) == 5 and len(gt.category_names) == 4
    assert len(gt.instances) == 14
