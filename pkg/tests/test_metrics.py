import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptdet.detector import DetectionRecord
from adaptdet.ingest import InstanceAnnotation, SceneImage, tight_bbox
from adaptdet.metrics import average_precision, box_iou, cmc_evaluate, coco_evaluate, mask_iou, rank_queries
from adaptdet.metrics import rle as rlemod
from adaptdet.metrics.cmc import RankingResult
from oracles import brute_force_cmc, brute_force_ranking, coco_reference, to_coco
from test_detector import hand_cache

# ---------------------------------------------------------------------------
# RLE / IoU


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_rle_round_trip(h, w, seed):
    m = np.random.default_rng(seed).random((h, w)) < 0.4
    r = rlemod.encode(m)
    assert sum(r["counts"]) == h * w
    assert np.array_equal(rlemod.decode(r), m)
    assert rlemod.area(r) == m.sum()


def test_rle_layout_is_column_major():
    m = np.array([[0, 1], [0, 1]], dtype=bool)
    assert rlemod.encode(m)["counts"] == [2, 2]
    assert rlemod.encode(np.ones((1, 3), bool))["counts"] == [0, 3]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_iou_matches_dense(seed):
    r = np.random.default_rng(seed)
    a = r.random((9, 7)) < 0.5
    b = r.random((9, 7)) < 0.5
    union = (a | b).sum()
    if union == 0:
        return
    assert mask_iou(a, b) == pytest.approx((a & b).sum() / union)
    assert mask_iou(rlemod.encode(a), b) == mask_iou(a, b)


def test_box_iou_values():
    assert box_iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3)
    assert box_iou((0, 0, 2, 2), (5, 5, 1, 1)) == 0.0
    assert box_iou((3, 4, 5, 6), (3, 4, 5, 6)) == 1.0
    with pytest.raises(ValueError):
        box_iou((0, 0, 0, 0), (1, 1, 0, 0))
    with pytest.raises(ValueError):
        mask_iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool))


# ---------------------------------------------------------------------------
# CMC


def test_average_precision_hand_example():
    # correct at ranks 1 and 3 out of 4: (1/1 + 2/3) / 2
    assert average_precision(np.array([1, 0, 1, 0], bool)) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision(np.zeros(3, bool)) == 0.0


def test_cmc_excludes_absent_classes():
    rankings = [
        RankingResult("q0", "a", (("a", 0.9), ("b", 0.1))),
        RankingResult("q1", "b", (("a", 0.9), ("b", 0.1))),
        RankingResult("q2", "z", (("a", 0.9), ("b", 0.1))),
    ]
    rep = cmc_evaluate(rankings, ranks=(1, 2))
    assert rep.num_queries == 2 and rep.num_excluded == 1
    assert rep.rank_k == {1: 0.5, 2: 1.0}
    assert rep.mAP == pytest.approx((1.0 + 0.5) / 2)
    with pytest.raises(ValueError):
        cmc_evaluate(rankings[2:])


def random_reid_problem(seed, n_queries=100, n_classes=6, per_class=4, dim=8):
    r = np.random.default_rng(seed)
    protos = r.normal(size=(n_classes, dim))
    table = {f"c{k}": [protos[k] + 0.8 * r.normal(size=dim) for _ in range(per_class)] for k in range(n_classes)}
    classes = [f"c{int(r.integers(n_classes))}" for _ in range(n_queries)]
    queries = [protos[int(c[1:])] + 0.8 * r.normal(size=dim) for c in classes]
    return table, classes, queries


def cmc_against_oracle(seed, n_queries=100):
    """Package CMC vs brute-force ranking + counting. Returns max abs diff."""
    table, classes, queries = random_reid_problem(seed, n_queries)
    cache = hand_cache(table)
    report = cmc_evaluate(rank_queries(list(zip(classes, queries)), cache))
    gallery = [list(v) for v in cache.embeddings]
    ranked = [[cache.entry_ids[j] for j in brute_force_ranking(list(q), gallery)] for q in queries]
    ref_map, ref_rank = brute_force_cmc(classes, ranked)
    diffs = [abs(report.mAP - ref_map)] + [abs(report.rank_k[k] - ref_rank[k]) for k in ref_rank]
    return max(diffs)


@pytest.mark.parametrize("seed", range(5))
def test_cmc_matches_brute_force(seed):
    assert cmc_against_oracle(seed, n_queries=60) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cmc_properties(seed):
    table, classes, queries = random_reid_problem(seed, n_queries=20)
    cache = hand_cache(table)
    rep = cmc_evaluate(rank_queries(list(zip(classes, queries)), cache), ranks=(1, 2, 5, 10, 20))
    values = [rep.rank_k[k] for k in (1, 2, 5, 10, 20)]
    assert values == sorted(values)
    assert 0.0 <= rep.mAP <= 1.0
    # permuting the queries changes nothing
    perm = np.random.default_rng(seed).permutation(len(classes))
    rep2 = cmc_evaluate(rank_queries([(classes[i], queries[i]) for i in perm], cache), ranks=(1, 2, 5, 10, 20))
    assert rep2.mAP == pytest.approx(rep.mAP, abs=1e-12) and rep2.rank_k == rep.rank_k
    # padding the gallery with a foreign class can only push correct hits down
    padded = dict(table, zz=[np.ones(len(queries[0])), np.arange(1.0, len(queries[0]) + 1)])
    rep3 = cmc_evaluate(rank_queries(list(zip(classes, queries)), hand_cache(padded)), ranks=(1, 2, 5, 10, 20))
    assert rep3.mAP <= rep.mAP + 1e-12
    assert all(rep3.rank_k[k] <= rep.rank_k[k] for k in rep.rank_k)


# ---------------------------------------------------------------------------
# COCO


def _rect(shape, x, y, w, h):
    m = np.zeros(shape, bool)
    m[y : y + h, x : x + w] = True
    return m


def random_coco_problem(seed, n_images=3, size=24, classes="abc", max_dets=None):
    r = np.random.default_rng(seed)
    n_cls = len(classes)
    scenes, fixtures, dets = [], [], []
    score_pool = iter(r.permutation(1000) / 1000.0 + 0.0005)  # distinct scores
    for i in range(n_images):
        image_id = f"img{i}"
        anns = []
        for _ in range(int(r.integers(0, 5))):
            w, h = int(r.integers(3, 10)), int(r.integers(3, 10))
            x, y = int(r.integers(0, size - w)), int(r.integers(0, size - h))
            cls = classes[int(r.integers(n_cls))]
            m = _rect((size, size), x, y, w, h)
            anns.append(InstanceAnnotation(cls, (x, y, w, h), m))
        scenes.append(SceneImage(image_id, np.zeros((size, size, 3), np.uint8), tuple(anns)))
        fixtures.append({"image_id": image_id, "gts": [(a.object_id, a.bbox, a.mask) for a in anns]})
        for a in anns:
            if r.random() < 0.2:
                continue
            x, y, w, h = a.bbox
            dx, dy = (int(v) for v in r.integers(-2, 3, size=2))
            nx, ny = min(max(x + dx, 0), size - w), min(max(y + dy, 0), size - h)
            m = _rect((size, size), nx, ny, w, h)
            if r.random() < 0.3:
                m[ny, nx : nx + w] = False  # ragged mask, box stays loose
            cls = a.object_id if r.random() < 0.8 else classes[int(r.integers(n_cls))]
            dets.append((image_id, cls, next(score_pool), (nx, ny, w, h), m))
        for _ in range(int(r.integers(0, 3))):  # false positives
            w, h = int(r.integers(2, 8)), int(r.integers(2, 8))
            x, y = int(r.integers(0, size - w)), int(r.integers(0, size - h))
            dets.append((image_id, classes[int(r.integers(n_cls))], next(score_pool), (x, y, w, h), _rect((size, size), x, y, w, h)))
        if max_dets is not None:
            kept = [d for d in dets if d[0] != image_id]
            dets = kept + [d for d in dets if d[0] == image_id][:max_dets]
    return scenes, fixtures, dets


def _records(dets, scale=1.0):
    out = {}
    for image_id, cls, score, bbox, m in dets:
        out.setdefault(image_id, []).append(DetectionRecord(image_id, cls, score * scale, 0.0, bbox, rlemod.encode(m)))
    return out


def coco_against_oracle(seed, **problem):
    """Max abs difference between package and reference COCO numbers."""
    scenes, fixtures, dets = random_coco_problem(seed, **problem)
    if not any(f["gts"] for f in fixtures):
        return 0.0
    report = coco_evaluate(_records(dets), scenes)
    gt, dt = to_coco(fixtures, [{"image_id": i, "cls": c, "score": s, "bbox": b, "mask": m} for i, c, s, b, m in dets])
    worst = 0.0
    for task, ours in (("bbox", report.bbox), ("segm", report.segm)):
        ref = coco_reference(gt, dt, task)
        for key in ("mAP", "AP50", "AP75", "AR"):
            worst = max(worst, abs(getattr(ours, key) - ref[key]))
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_coco_matches_reference(seed):
    assert coco_against_oracle(seed) <= 1e-6


def test_coco_perfect_and_empty():
    m1 = _rect((20, 20), 2, 2, 6, 6)
    m2 = _rect((20, 20), 10, 10, 5, 8)
    scene = SceneImage("i", np.zeros((20, 20, 3), np.uint8), (InstanceAnnotation("a", tight_bbox(m1), m1), InstanceAnnotation("b", tight_bbox(m2), m2)))
    perfect = _records([("i", "a", 0.9, tight_bbox(m1), m1), ("i", "b", 0.8, tight_bbox(m2), m2)])
    rep = coco_evaluate(perfect, [scene])
    for t in (rep.bbox, rep.segm):
        assert (t.mAP, t.AP50, t.AP75, t.AR) == (1.0, 1.0, 1.0, 1.0)
    empty = coco_evaluate({}, [scene])
    assert empty.bbox.mAP == 0.0 and empty.segm.AR == 0.0
    with pytest.raises(ValueError):
        coco_evaluate({"other": []}, [scene])


def test_coco_single_iou_06():
    # one GT 10x10, one detection 10x6 inside it: IoU 0.6, a hit at 0.50, 0.55 and 0.60
    # (equality counts), so 3 of 10 thresholds
    g = _rect((20, 20), 0, 0, 10, 10)
    d = _rect((20, 20), 0, 0, 10, 6)
    scene = SceneImage("i", np.zeros((20, 20, 3), np.uint8), (InstanceAnnotation("a", (0, 0, 10, 10), g),))
    rep = coco_evaluate(_records([("i", "a", 0.5, (0, 0, 10, 6), d)]), [scene])
    for t in (rep.bbox, rep.segm):
        assert t.AP50 == 1.0 and t.AP75 == 0.0
        assert t.mAP == pytest.approx(0.3) and t.AR == pytest.approx(0.3)
    gt, dt = to_coco([{"image_id": "i", "gts": [("a", (0, 0, 10, 10), g)]}], [{"image_id": "i", "cls": "a", "score": 0.5, "bbox": (0, 0, 10, 6), "mask": d}])
    assert coco_reference(gt, dt, "segm")["mAP"] == pytest.approx(0.3)


@pytest.mark.parametrize("seed", range(5))
def test_coco_invariant_to_score_scaling(seed):
    scenes, _, dets = random_coco_problem(seed)
    if not any(s.annotations for s in scenes):
        return
    assert coco_evaluate(_records(dets), scenes) == coco_evaluate(_records(dets, scale=3.5), scenes)


def test_coco_classes_without_ground_truth_do_not_count():
    g = _rect((10, 10), 0, 0, 5, 5)
    scene = SceneImage("i", np.zeros((10, 10, 3), np.uint8), (InstanceAnnotation("a", (0, 0, 5, 5), g),))
    base = coco_evaluate(_records([("i", "a", 0.9, (0, 0, 5, 5), g)]), [scene])
    extra = coco_evaluate(_records([("i", "a", 0.9, (0, 0, 5, 5), g), ("i", "zz", 0.99, (0, 0, 5, 5), g)]), [scene])
    assert base == extra
    assert math.isclose(base.bbox.mAP, 1.0)
