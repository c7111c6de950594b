"""JSON Lines files for per-image predictions and ground truth.

Prediction line::

    {"image_id": "17", "u_ood": 0.0123,
     "detections": [{"cx": .., "cy": .., "w": .., "h": .., "confidence": ..,
                     "class_id": 2, "class_probs": [..], "u_pred": ..}, ...]}

Ground-truth line::

    {"image_id": "17", "objects": [{"cx": .., "cy": .., "w": .., "h": .., "class_id": 0}, ...]}

Floats are written with 17 significant digits, so loading gives back the
exact binary values.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

from .geometry import Box, Detection
from .inference import ImagePrediction
from .metrics import u_pred


class DumpFormatError(ValueError):
    pass


def _encode(obj) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialise non-finite value {obj}")
        text = format(obj, ".17g")
        return text if any(c in text for c in ".en") else text + ".0"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _detection_dict(d: Detection) -> dict:
    return {
        "cx": d.box.cx, "cy": d.box.cy, "w": d.box.w, "h": d.box.h,
        "confidence": d.confidence,
        "class_id": d.class_id,
        "class_probs": list(d.class_probs),
        "u_pred": u_pred(d.confidence),
    }


def dump_detections(path: str | Path, records: list[ImagePrediction]) -> None:
    with open(path, "w") as fh:
        for r in records:
            line = {"image_id": str(r.image_id), "u_ood": float(r.u_ood),
                    "detections": [_detection_dict(d) for d in r.detections]}
            fh.write(_encode(line) + "\n")


def _lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc


def load_detections(path: str | Path) -> list[ImagePrediction]:
    out = []
    for lineno, obj in _lines(path):
        try:
            dets = [
                Detection(Box(d["cx"], d["cy"], d["w"], d["h"]), d["confidence"], tuple(d["class_probs"]))
                for d in obj["detections"]
            ]
            out.append(ImagePrediction(str(obj["image_id"]), dets, obj["u_ood"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DumpFormatError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out


def dump_ground_truth(path: str | Path, gts_by_image: dict) -> None:
    with open(path, "w") as fh:
        for image_id, objects in gts_by_image.items():
            line = {"image_id": str(image_id),
                    "objects": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "class_id": int(c)} for b, c in objects]}
            fh.write(_encode(line) + "\n")


def load_ground_truth(path: str | Path) -> dict:
    out = {}
    for lineno, obj in _lines(path):
        try:
            out[str(obj["image_id"])] = [
                (Box(o["cx"], o["cy"], o["w"], o["h"]), int(o["class_id"])) for o in obj["objects"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DumpFormatError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out
