"""Slice radius, TP assignment, and precision/recall against brute force."""
from __future__ import annotations

import numpy as np
import pytest

from slicelens.backends import PixelStatImageEncoder
from slicelens.embedding import embed_dataset
from slicelens.errors import ContractError
from slicelens.manifest import load_manifest
from slicelens.slices import (
    Slice,
    assign_tps,
    build_slice,
    medoid_member,
    slice_precision_recall,
    slice_radius,
)


def brute_force_assignment(member_vecs, tp_ids, tp_vecs):
    """Direct restatement: mean NN distance, then strict all-pairs scan."""
    n = len(member_vecs)
    if n < 2:
        radius = 0.0
    else:
        nearest = []
        for i in range(n):
            nearest.append(min(
                float(np.linalg.norm(member_vecs[i] - member_vecs[j]))
                for j in range(n) if j != i
            ))
        radius = float(np.mean(nearest))
    out = []
    for tp_id, tv in zip(tp_ids, tp_vecs):
        dist = min(float(np.linalg.norm(tv - mv)) for mv in member_vecs)
        if dist < radius:
            out.append(tp_id)
    return radius, out


class TestSliceRadius:
    def test_two_members_distance_one(self):
        assert slice_radius(np.array([[0.0], [1.0]])) == 1.0

    def test_three_member_hand_case(self):
        # coords {0, 1, 3}: nearest distances (1, 1, 2), mean 4/3
        assert slice_radius(np.array([[0.0], [1.0], [3.0]])) == pytest.approx(4 / 3)

    def test_identical_members_zero(self):
        assert slice_radius(np.zeros((5, 3))) == 0.0

    def test_singleton_zero(self):
        assert slice_radius(np.array([[2.0, 3.0]])) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            slice_radius(np.zeros((0, 2)))


class TestAssignTps:
    def test_hand_case_inside_and_outside(self):
        members = np.array([[0.0], [1.0]])  # radius 1
        tps = ["near", "far"]
        tp_vecs = np.array([[1.5], [2.5]])  # dists to nearest member: 0.5, 1.5
        assert assign_tps(members, tps, tp_vecs) == ["near"]

    def test_zero_radius_assigns_nothing(self):
        members = np.zeros((3, 2))
        assert assign_tps(members, ["t"], np.zeros((1, 2))) == []

    def test_boundary_is_strict(self):
        members = np.array([[0.0], [1.0]])  # radius 1
        tp_vecs = np.array([[2.0]])  # distance to nearest member exactly 1
        assert assign_tps(members, ["edge"], tp_vecs) == []

    def test_multi_assignment_allowed(self):
        a = np.array([[0.0], [1.0]])
        b = np.array([[0.2], [1.2]])
        tp = np.array([[0.6]])
        assert assign_tps(a, ["t"], tp) == ["t"]
        assert assign_tps(b, ["t"], tp) == ["t"]

    def test_agrees_with_brute_force_on_random_instances(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n_m = int(rng.integers(2, 40))
            n_t = int(rng.integers(0, 60))
            dim = int(rng.integers(1, 6))
            members = rng.normal(size=(n_m, dim))
            tps = [f"tp{i}" for i in range(n_t)]
            tp_vecs = rng.normal(size=(n_t, dim))
            radius, want = brute_force_assignment(members, tps, tp_vecs)
            assert slice_radius(members) == pytest.approx(radius, abs=1e-12)
            assert assign_tps(members, tps, tp_vecs) == want

    def test_far_tp_never_changes_result(self):
        rng = np.random.default_rng(5)
        members = rng.normal(size=(10, 3))
        tps = ["a", "b"]
        tp_vecs = rng.normal(size=(2, 3))
        base = assign_tps(members, tps, tp_vecs)
        far = np.vstack([tp_vecs, members.mean(axis=0) + 1e6])
        assert assign_tps(members, tps + ["far"], far) == base


class TestSlicePrecisionRecall:
    def test_snow_slice_case(self):
        # 5 FPs, 8 FNs, 3 assigned TPs
        precision, recall = slice_precision_recall(5, 8, 3)
        assert precision == pytest.approx(0.375)
        assert recall == pytest.approx(0.2727, abs=5e-5)
        # consistent with the reported rounding 0.38 / 0.27
        assert round(precision, 2) == 0.38
        assert round(recall, 2) == 0.27

    def test_zero_tps(self):
        precision, recall = slice_precision_recall(4, 0, 0)
        assert precision == 0.0
        assert recall is None

    def test_fp_only_slice_without_tps_has_no_recall(self):
        precision, recall = slice_precision_recall(3, 0, 0)
        assert precision == 0.0
        assert recall is None

    def test_fp_only_slice_with_tps_has_trivial_recall(self):
        precision, recall = slice_precision_recall(3, 0, 2)
        assert precision == pytest.approx(0.4)
        assert recall == 1.0

    def test_ranges(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            fp, fn, tp = (int(x) for x in rng.integers(0, 10, 3))
            precision, recall = slice_precision_recall(fp, fn, tp)
            if precision is not None:
                assert 0.0 <= precision <= 1.0
            if recall is not None:
                assert 0.0 <= recall <= 1.0


class TestBuildSlice:
    @pytest.fixture
    def toy_table(self, toy_dataset):
        ds = load_manifest(toy_dataset)
        return ds, embed_dataset(ds, PixelStatImageEncoder(dim=6), seed=3)

    def test_members_must_be_failures(self, toy_table):
        ds, table = toy_table
        with pytest.raises(ContractError, match="tp0"):
            build_slice(["fp0", "tp0"], ds, table)

    def test_metrics_match_manual_computation(self, toy_table):
        ds, table = toy_table
        s = build_slice(["fp0", "fp1", "fn0", "fn1"], ds, table, provenance="brush")
        member_vecs = table.submatrix(list(s.member_ids))
        tp_ids = ["tp0", "tp1"]
        _, want_tps = brute_force_assignment(member_vecs, tp_ids, table.submatrix(tp_ids))
        assert sorted(s.assigned_tp_ids) == sorted(want_tps)
        precision, recall = slice_precision_recall(2, 2, len(want_tps))
        assert s.precision == precision and s.recall == recall
        assert s.status == "pending" and s.provenance == "brush"

    def test_tp_overlap_invariant(self):
        with pytest.raises(ValueError, match="overlap"):
            Slice(id="s", member_ids=("a",), assigned_tp_ids=("a",),
                  precision=None, recall=None)

    def test_medoid_member(self, toy_table):
        ds, table = toy_table
        s = build_slice(["fp0", "fp1", "fn0"], ds, table)
        vecs = table.submatrix(list(s.member_ids))
        centroid = vecs.mean(axis=0)
        want = s.member_ids[int(np.argmin(np.linalg.norm(vecs - centroid, axis=1)))]
        assert medoid_member(s, table) == want
