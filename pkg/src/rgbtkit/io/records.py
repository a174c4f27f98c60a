"""JSONL record schemas: GT groups, detections, annotations and the manifest.

Every file holds one JSON object per line, one image per object. Writers
emit canonical JSON (sorted keys, no whitespace) so identical inputs give
identical bytes.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from ..geometry import BoundingBox, ScoredBox
from ..nms import DetectionPair
from ..pairing import PersonGroup

log = logging.getLogger(__name__)

TAGS = ("day", "night", "unknown")


class DataError(ValueError):
    """Malformed input data; carries the source location when known."""


@dataclass
class GtRecord:
    image_id: str
    groups: list[PersonGroup] = field(default_factory=list)


@dataclass
class PairedDetections:
    image_id: str
    pairs: list[DetectionPair] = field(default_factory=list)
    enclosing: dict[int, BoundingBox] = field(default_factory=dict)


@dataclass
class ModalityDetections:
    image_id: str
    modality: str
    boxes: list[ScoredBox] = field(default_factory=list)


@dataclass
class Annotations:
    image_id: str
    modality: str
    boxes: list[BoundingBox] = field(default_factory=list)


@dataclass
class ManifestEntry:
    image_id: str
    rgb_path: str
    thermal_path: str
    tag: str = "unknown"
    width: int = 640
    height: int = 512


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# -- field validators ---------------------------------------------------------

def _fields(obj, required, optional=(), *, strict, where):
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected an object, got {type(obj).__name__}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise DataError(f"{where}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(required) - set(optional))
    if extra:
        if strict:
            raise DataError(f"{where}: unknown field(s) {', '.join(extra)}")
        log.warning("%s: ignoring unknown field(s) %s", where, ", ".join(extra))


def _number(v, where) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise DataError(f"{where}: expected a finite number, got {v!r}")
    return float(v)


def _int(v, where) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise DataError(f"{where}: expected an integer, got {v!r}")
    return v


def _str(v, where) -> str:
    if not isinstance(v, str):
        raise DataError(f"{where}: expected a string, got {v!r}")
    return v


def _box(v, where) -> BoundingBox:
    if not isinstance(v, list) or len(v) != 4:
        raise DataError(f"{where}: box must be [x1, y1, x2, y2], got {v!r}")
    try:
        return BoundingBox(*(_number(c, where) for c in v))
    except ValueError as e:
        raise DataError(f"{where}: {e}") from None


def _scored(v, where, strict) -> ScoredBox | None:
    if v is None:
        return None
    _fields(v, ("box", "score"), strict=strict, where=where)
    try:
        return ScoredBox(_box(v["box"], where), _number(v["score"], where))
    except DataError:
        raise
    except ValueError as e:
        raise DataError(f"{where}: {e}") from None


def _list(v, where) -> list:
    if not isinstance(v, list):
        raise DataError(f"{where}: expected a list, got {type(v).__name__}")
    return v


def _modality(v, where) -> str:
    if v not in ("rgb", "thermal"):
        raise DataError(f"{where}: modality must be 'rgb' or 'thermal', got {v!r}")
    return v


def _unique(ids, what, where):
    seen = set()
    for i in ids:
        if i in seen:
            raise DataError(f"{where}: duplicate {what} {i!r}")
        seen.add(i)


# -- parsers ------------------------------------------------------------------

def parse_gt(obj, *, strict=False, where="record") -> GtRecord:
    _fields(obj, ("image_id", "groups"), strict=strict, where=where)
    groups = []
    for n, g in enumerate(_list(obj["groups"], where)):
        w = f"{where} groups[{n}]"
        _fields(g, ("person_id", "rgb", "thermal"), strict=strict, where=w)
        rgb = None if g["rgb"] is None else _box(g["rgb"], w)
        t = None if g["thermal"] is None else _box(g["thermal"], w)
        if rgb is None and t is None:
            raise DataError(f"{w}: group has neither an rgb nor a thermal box")
        groups.append(PersonGroup(_int(g["person_id"], w), rgb, t))
    _unique((g.person_id for g in groups), "person_id", where)
    return GtRecord(_str(obj["image_id"], where), groups)


def parse_paired(obj, *, strict=False, where="record") -> PairedDetections:
    _fields(obj, ("image_id", "pairs"), strict=strict, where=where)
    pairs, enclosing = [], {}
    for n, p in enumerate(_list(obj["pairs"], where)):
        w = f"{where} pairs[{n}]"
        _fields(p, ("anchor_id", "rgb", "thermal"), ("enclosing",), strict=strict, where=w)
        rgb = _scored(p["rgb"], w + " rgb", strict)
        t = _scored(p["thermal"], w + " thermal", strict)
        if rgb is None and t is None:
            raise DataError(f"{w}: pair has neither an rgb nor a thermal box")
        aid = _int(p["anchor_id"], w)
        pairs.append(DetectionPair(aid, rgb, t))
        if p.get("enclosing") is not None:
            enclosing[aid] = _box(p["enclosing"], w + " enclosing")
    _unique((p.anchor_id for p in pairs), "anchor_id", where)
    return PairedDetections(_str(obj["image_id"], where), pairs, enclosing)


def parse_modality(obj, *, strict=False, where="record") -> ModalityDetections:
    _fields(obj, ("image_id", "modality", "boxes"), strict=strict, where=where)
    boxes = [_scored(b, f"{where} boxes[{n}]", strict) for n, b in enumerate(_list(obj["boxes"], where))]
    if any(b is None for b in boxes):
        raise DataError(f"{where}: null detection")
    return ModalityDetections(_str(obj["image_id"], where), _modality(obj["modality"], where), boxes)


def parse_annotations(obj, *, strict=False, where="record") -> Annotations:
    _fields(obj, ("image_id", "modality", "boxes"), strict=strict, where=where)
    boxes = [_box(b, f"{where} boxes[{n}]") for n, b in enumerate(_list(obj["boxes"], where))]
    return Annotations(_str(obj["image_id"], where), _modality(obj["modality"], where), boxes)


def parse_detection(obj, *, strict=False, where="record"):
    """Paired or per-modality detections, told apart by their fields."""
    if isinstance(obj, dict) and "pairs" in obj:
        return parse_paired(obj, strict=strict, where=where)
    return parse_modality(obj, strict=strict, where=where)


def parse_manifest_entry(obj, *, strict=False, where="record") -> ManifestEntry:
    _fields(obj, ("image_id", "rgb_path", "thermal_path", "width", "height"), ("tag",),
            strict=strict, where=where)
    tag = obj.get("tag", "unknown")
    if tag not in TAGS:
        raise DataError(f"{where}: tag must be one of {TAGS}, got {tag!r}")
    width, height = _int(obj["width"], where), _int(obj["height"], where)
    if width <= 0 or height <= 0:
        raise DataError(f"{where}: image size must be positive, got {width}x{height}")
    return ManifestEntry(_str(obj["image_id"], where), _str(obj["rgb_path"], where),
                         _str(obj["thermal_path"], where), tag, width, height)


# -- serializers --------------------------------------------------------------

def _scored_json(s: ScoredBox | None):
    return None if s is None else {"box": s.box.to_list(), "score": s.score}


def gt_to_json(r: GtRecord) -> dict:
    return {"image_id": r.image_id, "groups": [
        {"person_id": g.person_id,
         "rgb": g.rgb_box.to_list() if g.rgb_box is not None else None,
         "thermal": g.t_box.to_list() if g.t_box is not None else None} for g in r.groups]}


def paired_to_json(r: PairedDetections) -> dict:
    pairs = []
    for p in r.pairs:
        d = {"anchor_id": p.anchor_id, "rgb": _scored_json(p.rgb), "thermal": _scored_json(p.thermal)}
        if p.anchor_id in r.enclosing:
            d["enclosing"] = r.enclosing[p.anchor_id].to_list()
        pairs.append(d)
    return {"image_id": r.image_id, "pairs": pairs}


def modality_to_json(r: ModalityDetections) -> dict:
    return {"image_id": r.image_id, "modality": r.modality,
            "boxes": [_scored_json(b) for b in r.boxes]}


def annotations_to_json(r: Annotations) -> dict:
    return {"image_id": r.image_id, "modality": r.modality, "boxes": [b.to_list() for b in r.boxes]}


def manifest_to_json(e: ManifestEntry) -> dict:
    return {"image_id": e.image_id, "rgb_path": e.rgb_path, "thermal_path": e.thermal_path,
            "tag": e.tag, "width": e.width, "height": e.height}


_SERIALIZERS = {GtRecord: gt_to_json, PairedDetections: paired_to_json,
                ModalityDetections: modality_to_json, Annotations: annotations_to_json,
                ManifestEntry: manifest_to_json}


def to_json(record) -> dict:
    return _SERIALIZERS[type(record)](record)


# -- streaming ----------------------------------------------------------------

def iter_jsonl(path, parser, *, strict=False) -> Iterator:
    name = os.fspath(path)
    with open(name, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: invalid JSON ({e.msg})") from None
            yield parser(obj, strict=strict, where=where)


def _read(path, parser, strict, what) -> list:
    records = list(iter_jsonl(path, parser, strict=strict))
    _unique((r.image_id for r in records if not isinstance(r, ModalityDetections)),
            f"image_id in {what}", os.fspath(path))
    return records


def read_gt(path, *, strict=False) -> list[GtRecord]:
    return _read(path, parse_gt, strict, "GT")


def read_detections(path, *, strict=False) -> list:
    return _read(path, parse_detection, strict, "detections")


def read_annotations(path, *, strict=False) -> list[Annotations]:
    return list(iter_jsonl(path, parse_annotations, strict=strict))


def read_manifest(path, *, strict=False) -> list[ManifestEntry]:
    return _read(path, parse_manifest_entry, strict, "manifest")


def write_jsonl(path, records: Iterable):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(canonical(to_json(r)) + "\n")
