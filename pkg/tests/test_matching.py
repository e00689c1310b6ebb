import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggdetr import tensor as T
from aggdetr.decoder import InstancePrediction
from aggdetr.errors import ContractError
from aggdetr.matching import (
    LossWeights,
    brute_force_assignment,
    cxcywh_to_xyxy,
    detection_loss,
    hungarian,
    match_cost,
    pairwise_giou,
    total_loss,
    xyxy_to_cxcywh,
)
from aggdetr.tensor import Tensor
from oracles import brute_force_min


@pytest.fixture(autouse=True)
def f64():
    with T.precision("float64"):
        yield


class TestHungarian:
    def test_two_by_two(self):
        a = hungarian([[1, 2], [2, 4]])
        assert a.as_dict() == {0: 1, 1: 0} and a.total_cost == 4

    def test_zero_diagonal(self):
        c = 1 - np.eye(5)
        a = hungarian(c)
        assert a.pred_indices.tolist() == list(range(5)) and a.total_cost == 0

    def test_random_6x6_against_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = rng.normal(size=(6, 6))
            assert hungarian(c).total_cost == pytest.approx(brute_force_min(c.T), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 7), st.integers(0, 3))
    def test_rectangular_optimality(self, seed, g, extra):
        rng = np.random.default_rng(seed)
        n = min(7, g + extra)
        c = rng.normal(size=(n, g))
        a = hungarian(c)
        assert len(set(a.pred_indices.tolist())) == g
        assert a.total_cost == pytest.approx(brute_force_min(c.T), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-100, 100))
    def test_constant_shift_keeps_assignment(self, seed, k):
        c = np.random.default_rng(seed).normal(size=(5, 4))
        assert hungarian(c).pairs() == hungarian(c + k).pairs()

    def test_ties_break_lexicographically(self):
        a = hungarian(np.zeros((3, 2)))
        assert a.pred_indices.tolist() == [0, 1]
        assert hungarian(np.ones((3, 3))).pred_indices.tolist() == [0, 1, 2]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_integer_ties_match_brute_force_choice(self, seed):
        c = np.random.default_rng(seed).integers(0, 3, size=(4, 3)).astype(float)
        # brute force enumerates permutations lexicographically and keeps the first strict minimum
        assert hungarian(c).pairs() == brute_force_assignment(c).pairs()

    def test_too_few_predictions(self):
        with pytest.raises(ContractError):
            hungarian(np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ContractError):
            hungarian([[np.inf]])


class TestCost:
    def test_perfect_match_is_minus_three(self):
        box = np.array([[0.5, 0.5, 0.2, 0.4]])
        probs = np.array([[0.0, 1.0, 0.0]])
        assert match_cost(probs, box, [1], box).values[0, 0] == pytest.approx(-3.0)

    def test_giou_identical(self):
        b = np.array([[0.1, 0.2, 0.6, 0.9]])
        assert pairwise_giou(b, b)[0, 0] == pytest.approx(1.0)

    def test_giou_disjoint_corners(self):
        assert pairwise_giou(np.array([[0, 0, 1, 1.0]]), np.array([[1, 1, 2, 2.0]]))[0, 0] == pytest.approx(-0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.05, 0.95), min_size=4, max_size=4))
    def test_box_format_round_trip(self, v):
        b = np.array([v])
        assert np.allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b)

    def test_empty_targets_rejected(self):
        with pytest.raises(ContractError):
            match_cost(np.ones((2, 3)) / 3, np.full((2, 4), 0.5), [], np.zeros((0, 4)))


def pred_from(logits, boxes):
    return InstancePrediction(Tensor(np.asarray(logits)[None], requires_grad=True), Tensor(np.asarray(boxes)[None], requires_grad=True))


class TestDetectionLoss:
    box = np.array([[0.4, 0.5, 0.3, 0.2]])

    def test_perfect_prediction(self):
        logits = np.array([[60.0, -60.0, -60.0], [-60.0, -60.0, 60.0]])
        boxes = np.vstack([self.box, [[0.5, 0.5, 0.5, 0.5]]])
        pred = pred_from(logits, boxes)
        targets = [([0], self.box)]
        loss, parts = detection_loss(pred, targets, [hungarian(np.array([[0.0], [1.0]]))])
        assert parts["l1"] == 0 and parts["giou"] == pytest.approx(0, abs=1e-12)
        assert loss.item() < 1e-20

    def test_unmatched_box_gets_no_box_gradient(self):
        pred = pred_from(np.zeros((2, 3)), np.vstack([[[0.3, 0.3, 0.2, 0.2]], [[0.6, 0.6, 0.3, 0.3]]]))
        loss, _ = detection_loss(pred, [([1], self.box)], [hungarian(np.array([[1.0], [0.0]]))])
        loss.backward()
        assert np.all(pred.boxes.grad[0, 0] == 0) and np.any(pred.boxes.grad[0, 1] != 0)

    def test_monotone_along_interpolation(self):
        start = np.array([[0.7, 0.2, 0.1, 0.5]])
        values = []
        for t in np.linspace(0, 1, 10):
            b = (1 - t) * start + t * self.box
            loss, _ = detection_loss(pred_from(np.zeros((1, 3)), b), [([0], self.box)], [hungarian([[0.0]])])
            values.append(loss.item())
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_no_object_down_weighted(self):
        logits = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        boxes = np.vstack([self.box, self.box])
        pred = pred_from(logits, boxes)
        loss, parts = detection_loss(pred, [([0], self.box)], [hungarian([[0.0], [1.0]])])
        assert parts["ce"] == pytest.approx(np.log(3))  # weighted mean of equal terms

    def test_image_without_targets_only_classification(self):
        pred = pred_from(np.zeros((2, 3)), np.full((2, 4), 0.5))
        loss, parts = detection_loss(pred, [([], np.zeros((0, 4)))], [hungarian(np.zeros((2, 0)))])
        assert set(parts) == {"ce"}

    def test_grad_check(self):
        rng = np.random.default_rng(3)
        pred = pred_from(rng.normal(size=(3, 3)), rng.uniform(0.2, 0.6, size=(3, 4)))
        targets = [([0, 1], np.array([[0.3, 0.4, 0.2, 0.3], [0.6, 0.5, 0.3, 0.2]]))]
        a = [hungarian(rng.normal(size=(3, 2)))]
        rep = T.grad_check(lambda: detection_loss(pred, targets, a)[0], [pred.class_logits, pred.boxes])
        assert rep.max_rel_error < 1e-4


class TestTotalLoss:
    def test_default_weights(self):
        w = LossWeights()
        assert (w.cq, w.fq, w.bc, w.dc) == (10.0, 10.0, 1.0, 0.5)

    def test_unit_components(self):
        rep = total_loss({k: 1.0 for k in ("det", "cq", "fq", "bc", "dc")})
        assert rep.total == pytest.approx(22.5)

    def test_zero_components(self):
        assert total_loss({k: 0.0 for k in ("det", "cq", "fq", "bc", "dc")}).total == 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.sampled_from(["det", "cq", "fq", "bc", "dc"]), st.floats(0, 5))
    def test_linear_in_each_component(self, vals, name, bump):
        comps = dict(zip(("det", "cq", "fq", "bc", "dc"), vals))
        base = total_loss(comps).total
        comps[name] += bump
        w = {"det": 1.0, "cq": 10.0, "fq": 10.0, "bc": 1.0, "dc": 0.5}[name]
        assert total_loss(comps).total == pytest.approx(base + w * bump, rel=1e-9, abs=1e-9)

    def test_target_box_supervision_rejected(self):
        with pytest.raises(ContractError):
            total_loss({"det": 1.0}, domain="target")
        with pytest.raises(ContractError):
            total_loss({"cq": 1.0}, domain="target", box_supervision=True)

    def test_target_sample_has_no_detection_gradient(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=3), requires_grad=True)
        cq = T.bce_with_logits(w, np.array([1.0, 0.0, 1.0]))
        rep = total_loss({"cq": cq, "det": None}, domain="target")
        assert rep.l_det == 0
        rep.tensor.backward()
        assert np.any(w.grad != 0)
