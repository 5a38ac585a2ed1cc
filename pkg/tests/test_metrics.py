import numpy as np
import pytest

from core import ClassCatalog, LabelMap, PanopticMap, Segment, ValidationError
from metrics import (
    AP_RECALL_LEVELS, PanopticQuality, ScoredMask, average_precision, evaluate_all, instances_from_panoptic,
    mask_iou, mean_iou, panoptic_quality, parsing_covering, pq_dagger,
)
from synth import generate, standard_catalog, suite_scene

ROAD, SKY, CAR = 0, 1, 2
CATALOG = ClassCatalog.of(('road', 'stuff'), ('sky', 'stuff'), ('car', 'thing'))


def strip(spans: dict[int, tuple[int, int, int]], width: int = 40) -> PanopticMap:
    """ 1-row map from {segment_id: (class_id, start, stop)} """
    raster = np.zeros((1, width), dtype=np.int32)
    segments = []
    for segment_id, (class_id, start, stop) in spans.items():
        raster[0, start:stop] = segment_id
        segments.append(Segment(segment_id, class_id, CATALOG.is_thing(class_id)))
    return PanopticMap(raster, tuple(segments))

def fill_road(spans: dict, width: int = 40) -> PanopticMap:
    pan = strip(spans, width)
    raster = pan.data.copy()
    road_id = max(spans) + 1
    raster[raster == 0] = road_id
    return PanopticMap(raster, pan.segments + (Segment(road_id, ROAD, False),))


@pytest.mark.parametrize('a, b, expected', [
    ([0, 1, 2], [0, 1, 2], 1.0),
    ([0, 1], [2, 3], 0.0),
    ([0, 1], [1, 2, 3], 0.25),
    ([], [], 1.0),
])
def test_mask_iou(a, b, expected):
    assert mask_iou(np.array(a, dtype=int), np.array(b, dtype=int)) == pytest.approx(expected)

def test_mask_iou_mixes_masks_and_indices():
    mask = np.array([[True, False], [False, True]])
    assert mask_iou(mask, np.array([0, 1])) == pytest.approx(1 / 3)
    assert mask_iou(np.array([3, 0]), mask) == 1.0
    assert mask_iou(np.zeros(4, dtype=bool), np.array([], dtype=int)) == 1.0
    with pytest.raises(ValidationError):
        mask_iou(mask, np.array([4]))

def test_pq_identity():
    gt = fill_road({1: (CAR, 0, 10), 2: (CAR, 20, 25)})
    result = panoptic_quality(gt, gt, CATALOG)
    assert result.pq_all == 1.0 and result.pq_things == 1.0 and result.pq_stuff == 1.0
    assert pq_dagger(gt, gt, CATALOG) == 1.0
    assert parsing_covering(gt, gt, CATALOG).value == 1.0

def test_pq_one_tp_one_fp_one_fn():
    gt = fill_road({1: (CAR, 0, 10), 2: (CAR, 20, 25)})
    pred = fill_road({1: (CAR, 0, 8), 2: (CAR, 30, 35)})
    result = panoptic_quality(pred, gt, CATALOG)
    car = result.per_class[CAR]
    assert (car.tp, car.fp, car.fn) == (1, 1, 1)
    assert car.pq == pytest.approx(0.4, abs=1e-12)
    assert result.pq_things == pytest.approx(0.4, abs=1e-12)
    assert car.sq == pytest.approx(0.8) and car.rq == pytest.approx(0.5)

def test_pq_rejects_iou_of_exactly_one_half():
    gt = fill_road({1: (CAR, 0, 4)})
    pred = fill_road({1: (CAR, 0, 2)})
    car = panoptic_quality(pred, gt, CATALOG).per_class[CAR]
    assert (car.tp, car.fp, car.fn) == (0, 1, 1)
    assert car.pq == 0.0

def test_pq_dagger_relaxes_stuff_matching():
    gt = strip({1: (ROAD, 0, 10)}, width=10)
    pred = strip({1: (ROAD, 0, 3)}, width=10)
    assert panoptic_quality(pred, gt, CATALOG).pq_all == 0.0
    relaxed = PanopticQuality(CATALOG, stuff_match_iou=0.0)
    relaxed.compare_and_accumulate(pred, gt)
    assert relaxed.result().per_class[ROAD].pq == pytest.approx(0.3, abs=1e-12)
    assert pq_dagger(pred, gt, CATALOG) == pytest.approx(0.3, abs=1e-12)

def test_pq_dagger_equals_pq_without_stuff():
    things = ClassCatalog.of(('car', 'thing'), ('bus', 'thing'))
    gt = PanopticMap(np.array([[1, 1, 2, 2, 0]]), (Segment(1, 0, True), Segment(2, 1, True)))
    pred = PanopticMap(np.array([[1, 1, 1, 2, 2]]), (Segment(1, 0, True), Segment(2, 1, True)))
    assert pq_dagger(pred, gt, things) == panoptic_quality(pred, gt, things).pq_all

def test_prediction_on_void_is_not_a_false_positive():
    gt = strip({1: (CAR, 0, 10)}, width=20)
    pred = strip({1: (CAR, 0, 10), 2: (CAR, 12, 20)}, width=20)
    car = panoptic_quality(pred, gt, CATALOG).per_class[CAR]
    assert (car.tp, car.fp, car.fn) == (1, 0, 0)

def test_void_pixels_leave_the_union():
    gt = strip({1: (CAR, 0, 6)}, width=10)
    pred = strip({1: (CAR, 0, 10)}, width=10)
    car = panoptic_quality(pred, gt, CATALOG).per_class[CAR]
    assert car.tp == 1 and car.sq == pytest.approx(1.0)

def test_accumulator_over_images():
    gt = fill_road({1: (CAR, 0, 10), 2: (CAR, 20, 25)})
    pred = fill_road({1: (CAR, 0, 8), 2: (CAR, 30, 35)})
    acc = PanopticQuality(CATALOG)
    acc.compare_and_accumulate(pred, gt)
    acc.compare_and_accumulate(pred, gt)
    result = acc.result()
    assert result.counts() == (4, 2, 2)
    assert result.per_class[CAR].pq == pytest.approx(0.4)
    acc.reset()
    assert acc.result().num_classes == 0

def test_parsing_covering_weights_by_size():
    gt = strip({1: (CAR, 0, 30), 2: (CAR, 30, 40)})
    pred = strip({1: (CAR, 0, 30)})
    assert parsing_covering(pred, gt, CATALOG).value == pytest.approx(0.75, abs=1e-12)

def test_parsing_covering_undefined_without_ground_truth():
    empty = PanopticMap(np.zeros((2, 2)), ())
    result = parsing_covering(empty, empty, CATALOG)
    assert result.undefined and result.value == 0.0

def test_mean_iou():
    gt = LabelMap(np.array([[0, 0], [1, 1]]))
    pred = LabelMap(np.array([[0, 1], [1, 1]]))
    assert mean_iou(gt, gt, CATALOG) == 1.0
    assert mean_iou(pred, gt, CATALOG) == pytest.approx((0.5 + 2 / 3) / 2)
    with_void = LabelMap(np.array([[0, 255], [1, 1]]))
    assert mean_iou(LabelMap(np.array([[0, 2], [1, 1]])), with_void, CATALOG) == 1.0

def test_average_precision():
    a = ScoredMask(CAR, np.arange(0, 10), 0.9)
    b = ScoredMask(CAR, np.arange(20, 25), 0.8)
    assert average_precision([a, b], [a, b]) == pytest.approx(1.0)
    assert average_precision([a], [a, b], (0.5,)) == pytest.approx(51 / 101)
    assert average_precision([], [a, b]) == 0.0
    assert len(AP_RECALL_LEVELS) == 101

def test_average_precision_orders_by_score():
    gt = [ScoredMask(CAR, np.arange(0, 10))]
    wrong = ScoredMask(CAR, np.arange(30, 40), 0.9)
    right = ScoredMask(CAR, np.arange(0, 10), 0.1)
    # precision 0.5 at the only recall level reached
    assert average_precision([wrong, right], gt, (0.5,)) == pytest.approx(0.5)

def test_instances_from_panoptic_carry_scores():
    pan = PanopticMap(np.array([[1, 2, 3]]), (Segment(1, ROAD, False), Segment(2, CAR, True, 0.7),
                                               Segment(3, CAR, True, 0.6)))
    masks = instances_from_panoptic(pan)
    assert [(m.class_id, m.pixels.tolist(), m.score) for m in masks] == [(CAR, [1], 0.7), (CAR, [2], 0.6)]

def test_metric_properties_on_shifted_scene():
    catalog = standard_catalog()
    labels, instances = generate(suite_scene('small'), catalog)
    gt = PanopticMap.from_ground_truth(labels, instances, catalog)
    for shift in (1, 3, 6):
        pred = PanopticMap(np.roll(gt.data, shift, axis=1), gt.segments)
        values = evaluate_all(pred, gt, catalog)
        assert all(0.0 <= v <= 1.0 for v in values.values())
        assert values['pqd'] >= values['pq'] - 1e-12

def test_evaluate_all_order_and_errors():
    gt = fill_road({1: (CAR, 0, 10)})
    values = evaluate_all(gt, gt, CATALOG)
    assert list(values) == ['pq', 'pq_things', 'pq_stuff', 'sq', 'rq', 'pqd', 'pc', 'miou', 'ap']
    assert list(evaluate_all(gt, gt, CATALOG, ['miou'])) == ['miou']
    with pytest.raises(ValidationError):
        evaluate_all(gt, gt, CATALOG, ['f1'])
