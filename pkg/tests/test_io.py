import json
import logging

import numpy as np
import pytest

from rgbtkit.geometry import BoundingBox
from rgbtkit.io.formats import (decode_pnm, decode_tensor, encode_pnm, image_to_planes,
                                planes_to_image, read_pnm, read_tensor, write_pnm, write_tensor)
from rgbtkit.io.records import (DataError, GtRecord, canonical, parse_gt, parse_manifest_entry,
                                parse_paired, read_detections, read_gt, read_manifest, to_json,
                                write_jsonl)
from rgbtkit.io.synth import SynthConfig, synth_fixture, write_fixture
from rgbtkit.pairing import mean_pair_shift


def test_tensor_round_trip_bit_identical(tmp_path, rng):
    arr = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "t.cmft", arr)
    back = read_tensor(tmp_path / "t.cmft")
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_header_layout(tmp_path):
    write_tensor(tmp_path / "t.cmft", np.arange(6, dtype=np.float32).reshape(2, 3))
    data = (tmp_path / "t.cmft").read_bytes()
    assert data[:20] == b"CMFT" + bytes([1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0])
    assert len(data) == 20 + 24


def test_tensor_truncated_names_lengths(tmp_path, rng):
    write_tensor(tmp_path / "t.cmft", rng.normal(size=(2, 3)))
    data = (tmp_path / "t.cmft").read_bytes()[:-5]
    with pytest.raises(DataError, match=r"byte offset 20 is 19 bytes, expected 24"):
        decode_tensor(data)
    with pytest.raises(DataError, match="bad magic"):
        decode_tensor(b"XXXX" + data[4:])
    with pytest.raises(DataError, match="truncated header"):
        decode_tensor(b"CMFT")


def test_ppm_hand_fixture():
    data = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30])
    img = decode_pnm(data)
    assert img.shape == (2, 2, 3)
    assert img[0, 0].tolist() == [255, 0, 0]
    assert img[0, 1].tolist() == [0, 255, 0]
    assert img[1, 0].tolist() == [0, 0, 255]
    assert img[1, 1].tolist() == [10, 20, 30]
    assert encode_pnm(img) == data


def test_pgm_comments_and_errors(tmp_path):
    img = decode_pnm(b"P5 # two by one\n2 1\n255\n\x07\x09")
    assert img.tolist() == [[7, 9]]
    with pytest.raises(DataError, match="expected 2"):
        decode_pnm(b"P5\n2 1\n255\n\x07")
    with pytest.raises(DataError, match="maxval"):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
    write_pnm(tmp_path / "a.pgm", np.array([[1, 2], [3, 4]]))
    assert read_pnm(tmp_path / "a.pgm").tolist() == [[1, 2], [3, 4]]


def test_planes_round_trip(rng):
    img = rng.integers(0, 256, (4, 5, 3))
    planes = image_to_planes(img)
    assert planes.shape == (3, 4, 5)
    assert np.array_equal(planes_to_image(planes), img)


def test_gt_examples():
    rec = parse_gt({"image_id": "a", "groups": []})
    assert rec == GtRecord("a", [])
    rec = parse_gt({"image_id": "b", "groups": [{"person_id": 0, "rgb": [0, 0, 1, 2], "thermal": None}]})
    assert rec.groups[0].rgb_box == BoundingBox(0, 0, 1, 2)
    with pytest.raises(DataError, match="neither"):
        parse_gt({"image_id": "c", "groups": [{"person_id": 0, "rgb": None, "thermal": None}]})
    with pytest.raises(DataError, match="inverted box"):
        parse_gt({"image_id": "c", "groups": [{"person_id": 0, "rgb": [5, 0, 1, 2], "thermal": None}]})


def test_strict_unknown_fields(caplog):
    obj = {"image_id": "a", "pairs": [], "extra": 1}
    with pytest.raises(DataError, match="unknown field"):
        parse_paired(obj, strict=True)
    with caplog.at_level(logging.WARNING):
        assert parse_paired(obj).image_id == "a"
    assert "extra" in caplog.text


def test_strict_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "gt.jsonl"
    p.write_text('{"image_id":"a","groups":[]}\n{"image_id":"b","groups":[{"person_id":"x","rgb":null,'
                 '"thermal":[0,0,1,1]}]}\n')
    with pytest.raises(DataError, match=r"gt.jsonl:2"):
        read_gt(p, strict=True)
    p.write_text('{"image_id":"a","groups":[]}\n{"image_id":"a","groups":[]}\n')
    with pytest.raises(DataError, match="duplicate"):
        read_gt(p)


def test_manifest_entry_validation():
    e = parse_manifest_entry({"image_id": "a", "rgb_path": "r", "thermal_path": "t",
                              "width": 640, "height": 512, "tag": "night"})
    assert e.tag == "night"
    with pytest.raises(DataError):
        parse_manifest_entry({"image_id": "a", "rgb_path": "r", "thermal_path": "t",
                              "width": 0, "height": 512})
    with pytest.raises(DataError):
        parse_manifest_entry({"image_id": "a", "rgb_path": "r", "thermal_path": "t",
                              "width": 10, "height": 5, "tag": "dusk"})


def test_canonical_round_trip_three_images(tmp_path):
    fx = synth_fixture(SynthConfig(n_images=3, fp_per_image=1.0, unpaired_rate=0.3, seed=8))
    write_jsonl(tmp_path / "gt.jsonl", fx.gt)
    write_jsonl(tmp_path / "dets.jsonl", fx.detections)
    write_jsonl(tmp_path / "manifest.jsonl", fx.manifest)
    for name, reader in (("gt", read_gt), ("dets", read_detections), ("manifest", read_manifest)):
        src = tmp_path / f"{name}.jsonl"
        write_jsonl(tmp_path / f"{name}2.jsonl", reader(src, strict=True))
        assert (tmp_path / f"{name}2.jsonl").read_bytes() == src.read_bytes()
    # a shuffled-key, spaced rendering normalizes to the same bytes
    line = src.read_text().splitlines()[0]
    messy = json.dumps(dict(reversed(list(json.loads(line).items()))), indent=1)
    assert canonical(to_json(parse_manifest_entry(json.loads(messy)))) == line


def test_synth_deterministic(tmp_path):
    cfg = SynthConfig(n_images=5, fp_per_image=1.0, miss_rate=0.2, seed=3)
    write_fixture(synth_fixture(cfg), tmp_path / "a", images=True)
    write_fixture(synth_fixture(cfg), tmp_path / "b", images=True)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 4 + 10
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_translation_mean_shift():
    fx = synth_fixture(SynthConfig(n_images=20, shift=(5.0, 0.0)))
    groups = [g for r in fx.gt for g in r.groups]
    assert mean_pair_shift(groups) == pytest.approx(5.0, abs=1e-9)


def test_synth_planted_labels_consistent():
    fx = synth_fixture(SynthConfig(n_images=20, miss_rate=0.1, fp_per_image=1.0, seed=1))
    n_missed = sum(len(l["missed_person_ids"]) for l in fx.labels)
    assert n_missed == 10
    for rec, lab in zip(fx.detections, fx.labels):
        assert len(rec.pairs) == len(lab["labels"])
        assert all(l["rgb"] in ("tp", "fp") for l in lab["labels"])


def test_synth_rejects_bad_config():
    with pytest.raises(ValueError):
        SynthConfig(n_images=0)
    with pytest.raises(ValueError):
        SynthConfig(shift_model="affine")
