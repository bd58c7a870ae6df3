import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msacount.annotations import (DatasetError, HeadPoint, apply_sizes, load_dataset, read_sizes,
                                  save_sizes)


def test_single_record_passthrough(make_dataset):
    m = make_dataset([("a.png", (64, 48), [[10, 20]], None)])
    recs = load_dataset(m)
    assert len(recs) == 1
    r = recs[0]
    assert (r.width, r.height) == (64, 48)
    assert r.heads == (HeadPoint(10.0, 20.0),)
    assert r.detections == ()
    assert r.clamped == 0


def test_out_of_bounds_head_is_clamped(make_dataset):
    m = make_dataset([("a.png", (100, 100), [[-5, 20], [50, 50]], None)])
    r = load_dataset(m)[0]
    assert r.heads[0] == HeadPoint(0.0, 20.0)
    assert r.clamped == 1
    assert r.count == 2


def test_heads_past_far_edge_land_on_last_cell(make_dataset):
    m = make_dataset([("a.png", (100, 80), [[100, 80], [150.5, 3]], None)])
    r = load_dataset(m)[0]
    assert [(h.x, h.y) for h in r.heads] == [(99.0, 79.0), (99.0, 3.0)]
    assert r.clamped == 2


def test_total_heads_across_images(make_dataset):
    rng = np.random.default_rng(0)
    counts = [49, 578, 3139]
    entries = []
    for i, n in enumerate(counts):
        pts = rng.uniform(0, 200, size=(n, 2)).tolist()
        entries.append((f"img{i}.png", (200, 200), pts, None))
    m = make_dataset(entries)
    expected = sum(len(e["heads"]) for e in json.loads(m.read_text()))
    recs = load_dataset(m)
    assert sum(r.count for r in recs) == expected == 3766
    assert [r.image_id for r in recs] == ["img0.png", "img1.png", "img2.png"]


def test_detections_are_parsed(make_dataset):
    m = make_dataset([("a.png", (64, 64), [[5, 5]], [[1, 2, 11, 22, 0.9], [0, 0, 4, 4]])])
    r = load_dataset(m)[0]
    assert r.detections[0].size == 20
    assert r.detections[0].center == (6.0, 12.0)
    assert r.detections[1].score == 1.0


def test_missing_image_names_path(make_dataset, tmp_path):
    m = make_dataset([("a.png", (8, 8), [], None)])
    entries = json.loads(m.read_text())
    entries.append({"image": "nope.png", "heads": []})
    m.write_text(json.dumps(entries))
    with pytest.raises(DatasetError, match="nope.png"):
        load_dataset(m)


@pytest.mark.parametrize("bad, needle", [
    ({"heads": []}, "entry 1: field 'image'"),
    ({"image": "a.png"}, "entry 1: field 'heads'"),
    ({"image": "a.png", "heads": [[1]]}, r"entry 1: field 'heads\[0\]'"),
    ({"image": "a.png", "heads": [], "detections": [[5, 5, 1, 1, 1]]}, r"entry 1: field 'detections\[0\]'"),
])
def test_malformed_entry_names_index_and_field(make_dataset, bad, needle):
    m = make_dataset([("a.png", (8, 8), [], None)])
    entries = json.loads(m.read_text()) + [bad]
    m.write_text(json.dumps(entries))
    with pytest.raises(DatasetError, match=needle):
        load_dataset(m)


def test_missing_manifest():
    with pytest.raises(DatasetError, match="manifest not found"):
        load_dataset("/nonexistent/manifest.json")


def test_load_is_idempotent(make_dataset):
    m = make_dataset([("a.png", (30, 30), [[1, 2], [40, 3]], None), ("b.png", (10, 10), [], None)])
    assert load_dataset(m) == load_dataset(m)


def _sized(recs, etas):
    it = iter(etas)
    return [r.with_heads(HeadPoint(h.x, h.y, next(it), 0) for h in r.heads) for r in recs]


def test_sizes_roundtrip(make_dataset, tmp_path):
    m = make_dataset([("a.png", (64, 64), [[1, 1], [3, 3]], None)])
    recs = _sized(load_dataset(m), [10.0, 21.5])
    out = tmp_path / "sizes.json"
    save_sizes(recs, out)
    assert [h.eta for h in read_sizes(out)["a.png"]] == [10.0, 21.5]
    assert apply_sizes(load_dataset(m), out) == recs


def test_sizes_empty(tmp_path):
    out = tmp_path / "sizes.json"
    save_sizes([], out)
    assert json.loads(out.read_text()) == {}


def test_sizes_rows_grouped_by_image(make_dataset, tmp_path):
    m = make_dataset([("a.png", (64, 64), [[1, 1], [2, 2]], None),
                      ("b.png", (64, 64), [[1, 1], [2, 2], [3, 3]], None)])
    recs = _sized(load_dataset(m), [1.0, 2.0, 3.0, 4.0, 5.0])
    out = tmp_path / "s.json"
    save_sizes(recs, out)
    raw = json.loads(out.read_text())
    assert {k: len(v) for k, v in raw.items()} == {"a.png": 2, "b.png": 3}
    assert sum(len(v) for v in raw.values()) == 5


def test_save_requires_eta(make_dataset, tmp_path):
    m = make_dataset([("a.png", (64, 64), [[1, 1], [2, 2]], None)])
    r = load_dataset(m)[0]
    r = r.with_heads([HeadPoint(1, 1, 3.0, 0), HeadPoint(2, 2)])
    with pytest.raises(ValueError, match="a.png: head 1"):
        save_sizes([r], tmp_path / "s.json")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 150, allow_nan=False), st.floats(-50, 150, allow_nan=False),
                          st.floats(0.01, 500, allow_nan=False)), max_size=20))
def test_sizes_roundtrip_bit_exact(tmp_path_factory, rows):
    from conftest import write_dataset
    root = tmp_path_factory.mktemp("rt")
    m = write_dataset(root, [("a.png", (100, 100), [[x, y] for x, y, _ in rows], None)])
    recs = load_dataset(m)
    # clamping only moves coordinates, never the number of heads
    assert recs[0].count == len(rows)
    sized = [recs[0].with_heads(HeadPoint(h.x, h.y, e, i % 3) for i, (h, (_, _, e)) in
                                enumerate(zip(recs[0].heads, rows)))]
    save_sizes(sized, root / "s.json")
    assert apply_sizes(recs, root / "s.json") == sized
