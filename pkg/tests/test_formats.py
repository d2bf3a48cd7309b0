import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pseudorbox.assign import DEFAULT_LEVELS, LevelPredictions
from pseudorbox.formats import (
    CONFIG_ENV,
    DatasetEntry,
    DatasetIndex,
    FormatError,
    ManifestRecord,
    RunConfig,
    config_from_dict,
    dota_line,
    export_dota_rbox,
    load_candidates,
    load_config,
    parse_annotations,
    parse_point_annotations,
    read_manifest,
    read_prediction_grids,
    save_mask,
    write_manifest,
    write_prediction_grids,
)
from pseudorbox.geometry import RBox, min_area_rect, wrap_angle

CLASSES = ["plane", "ship", "small-vehicle"]


# -- annotations ----------------------------------------------------------------------


def test_point_line():
    [p] = parse_point_annotations("100 200 plane\n", CLASSES)
    assert p.point == (100, 200) and p.class_id == 0


def test_dota_polygon_centroid_and_reference():
    [a] = parse_annotations("40 40 60 40 60 60 40 60 ship 1\n", CLASSES)
    assert a.point.point == (50, 50) and a.point.class_id == 1
    assert a.reference.as_tuple() == pytest.approx((50, 50, 20, 20, 0))


def test_empty_comments_and_headers():
    assert parse_point_annotations("", CLASSES) == []
    text = "imagesource:GoogleEarth\ngsd:0.1\n# comment\n\n1 2 plane\n"
    assert len(parse_point_annotations(text, CLASSES)) == 1


@pytest.mark.parametrize("text,line", [("1 2 plane\n1 2\n", 2), ("1 x plane\n", 1), ("1 2 boat\n", 1),
                                       ("1 2 3 4 plane\n", 1), ("nan 2 plane\n", 1)])
def test_parse_errors_carry_line_number(text, line):
    with pytest.raises(FormatError, match=f"line {line}"):
        parse_point_annotations(text, CLASSES)


def test_unknown_class_lists_line():
    with pytest.raises(FormatError, match="boat"):
        parse_point_annotations("3 4 boat\n", CLASSES)


# -- DOTA export ----------------------------------------------------------------------------


def test_dota_corners_axis_aligned():
    line = dota_line(RBox(50, 50, 20, 10, 0), "plane")
    vals = [float(v) for v in line.split()[:8]]
    assert vals == [40, 45, 60, 45, 60, 55, 40, 55]
    assert line.split()[8:] == ["plane", "0"]


def test_export_empty_and_pairs():
    assert export_dota_rbox([]) == ""
    out = export_dota_rbox([(RBox(5, 5, 2, 2, 0), "ship")])
    assert out.endswith("ship 0\n")


@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(1, 200), st.floats(0.2, 0.95), st.floats(-1.57, 1.57))
def test_dota_round_trip(cx, cy, w, ratio, theta):
    box = RBox(cx, cy, w, w * ratio, theta)
    vals = np.array([float(v) for v in dota_line(box, "plane").split()[:8]]).reshape(4, 2)
    back = min_area_rect(vals)
    assert back.as_tuple()[:4] == pytest.approx(box.as_tuple()[:4], abs=1e-6)
    assert abs(wrap_angle(back.theta - box.theta)) < 1e-6


# -- manifests -------------------------------------------------------------------------------


def test_manifest_round_trip_and_validation(tmp_path):
    d = tmp_path / "img"
    d.mkdir()
    m = np.zeros((10, 12), bool)
    m[2:5, 3:8] = True
    save_mask(m, d / "a.png")
    save_mask(np.zeros((10, 12), bool), d / "empty.png")
    save_mask(np.ones((9, 12), bool), d / "small.png")
    recs = [ManifestRecord(1, (3.5, 4.0), 2, (str(d / "a.png"),)), ManifestRecord(0, (1, 1), 0, (str(d / "a.png"),))]
    write_manifest(d / "manifest.jsonl", recs)
    back = read_manifest(d / "manifest.jsonl")
    assert [r.instance_index for r in back] == [0, 1]
    assert back[1].prompt == (3.5, 4.0) and back[1].class_id == 2
    [cand] = load_candidates(back[0], 12, 10)
    np.testing.assert_array_equal(cand.mask.bits, m)
    with pytest.raises(FormatError, match="12x9"):
        load_candidates(ManifestRecord(0, (1, 1), 0, (str(d / "small.png"),)), 12, 10)
    with pytest.raises(FormatError, match="empty"):
        load_candidates(ManifestRecord(0, (1, 1), 0, (str(d / "empty.png"),)), 12, 10)


def test_manifest_bad_record(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"instance_index": 0, "x": 1}\n')
    with pytest.raises(FormatError, match=":1"):
        read_manifest(p)


# -- prediction grids ---------------------------------------------------------------------------


@pytest.mark.parametrize("binary", [False, True])
def test_prediction_grid_round_trip(tmp_path, binary):
    rng = np.random.default_rng(3)
    preds = []
    for lvl in DEFAULT_LEVELS:
        r, c = lvl.grid_shape(50, 30)
        preds.append(LevelPredictions(lvl.index, rng.normal(size=(r, c, 5)), rng.random((r, c))))
    path = tmp_path / "p.grid"
    write_prediction_grids(path, preds, [l.stride for l in DEFAULT_LEVELS], binary=binary)
    back, strides = read_prediction_grids(path)
    assert strides == [4, 8, 16, 32, 64]
    for a, b in zip(preds, back):
        assert a.level_index == b.level_index
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.scores, b.scores)


def test_prediction_grid_truncated(tmp_path):
    p = tmp_path / "p.grid"
    p.write_text("levels 1\nlevel 0 stride 4 rows 2 cols 2\n1 2 3 4 5 6\n")
    with pytest.raises(FormatError):
        read_prediction_grids(p)
    p.write_bytes(b"PRGRID01\x01\x00\x00\x00")
    with pytest.raises(FormatError):
        read_prediction_grids(p)


# -- config --------------------------------------------------------------------------------------


def test_config_defaults():
    cfg = RunConfig()
    assert cfg.n_thr == 4 and cfg.switch_epoch == 6 and cfg.epoch == 0
    assert cfg.prior_for(3).ar_range == (1, 5) and cfg.prior_for(3).weights == (1,) * 5


def test_config_from_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("""
n_thr = 3
switch_epoch = 8
epoch = 2
class_specific = true
seed = 7

[watershed]
sigma_fg = 20.0
tau_bg = 0.05

[metrics]
lambda_color = 25.0

[loss_weights]
edge = 0.5

[[levels]]
stride = 8
range = [0, 64]

[[levels]]
stride = 32
range = [64, inf]

[priors.default]
ar_range = [1, 4]

[priors.ship]
weights = [1, 1, 0, -1, 1]
ar_range = [2, 8]
""")
    cfg = load_config(p, CLASSES)
    assert (cfg.n_thr, cfg.switch_epoch, cfg.epoch, cfg.class_specific, cfg.seed) == (3, 8, 2, True, 7)
    assert cfg.watershed.sigma_fg == 20 and cfg.watershed.tau_bg == 0.05
    assert cfg.metric_params.lambda_color == 25 and cfg.loss_weights.edge == 0.5
    assert [l.stride for l in cfg.levels] == [8, 32] and math.isinf(cfg.levels[1].regress_range[1])
    assert cfg.prior_for(1).weights == (1, 1, 0, -1, 1) and cfg.prior_for(1).ar_range == (2, 8)
    assert cfg.prior_for(0).ar_range == (1, 4)
    json.dumps(cfg.to_dict(), allow_nan=False)


def test_config_env_fallback(tmp_path, monkeypatch):
    p = tmp_path / "c.toml"
    p.write_text("n_thr = 9\n")
    monkeypatch.setenv(CONFIG_ENV, str(p))
    assert load_config(None).n_thr == 9
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config(None).n_thr == 4


def test_config_errors():
    with pytest.raises(FormatError):
        config_from_dict({"nthr": 3})
    with pytest.raises(FormatError):
        config_from_dict({"priors": {"boat": {}}}, CLASSES)
    with pytest.raises(ValueError):
        config_from_dict({"levels": [{"stride": 8, "range": [0, 64]}]})
    with pytest.raises(ValueError):
        RunConfig(n_thr=-1)


# -- dataset index ------------------------------------------------------------------------------------


def test_index_json_and_missing_paths(tmp_path):
    (tmp_path / "a.png").write_bytes(b"")
    (tmp_path / "a.txt").write_text("")
    idx = {"class_table": CLASSES, "entries": [{"id": "a", "image": "a.png", "annotation": "a.txt"}]}
    (tmp_path / "index.json").write_text(json.dumps(idx))
    loaded = DatasetIndex.load(tmp_path / "index.json")
    assert loaded.entries[0].image_id == "a" and loaded.class_table == tuple(CLASSES)
    idx["entries"][0]["annotation"] = "missing.txt"
    (tmp_path / "index.json").write_text(json.dumps(idx))
    with pytest.raises(FileNotFoundError):
        DatasetIndex.load(tmp_path / "index.json")


def test_index_duplicate_ids():
    e = DatasetEntry("a", "x.png", "x.txt")
    with pytest.raises(FormatError):
        DatasetIndex((e, e), ("plane",))


def test_index_dump_load(tmp_path):
    (tmp_path / "a.png").write_bytes(b"")
    (tmp_path / "a.txt").write_text("")
    idx = DatasetIndex((DatasetEntry("a", str(tmp_path / "a.png"), str(tmp_path / "a.txt")),), ("plane",))
    idx.dump(tmp_path / "i.json")
    assert DatasetIndex.load(tmp_path / "i.json") == idx
