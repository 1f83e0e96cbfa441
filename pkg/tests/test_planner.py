from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridann.errors import BadParam, NoCandidates
from hybridann.index import VectorBatch
from hybridann.planner import (
    CostCoefficients,
    PartitionPlan,
    QueryWork,
    WorkloadProfile,
    assign_shards,
    coefficients_from_rates,
    enumerate_plans,
    imbalance,
    make_plan,
    node_load,
    plans_for_mode,
    query_cost,
    query_work,
    select_plan,
    total_cost,
    workload_cost,
)

PAPER_COEFFS = CostCoefficients(20.0, 30.0, 15.0, 1.0)


def random_profile(rng, nlist=12, q=20, nprobe=3, dim=24):
    sizes = rng.integers(1, 50, size=nlist)
    probes = np.stack([rng.choice(nlist, nprobe, replace=False) for _ in range(q)])
    return WorkloadProfile(probes, sizes, dim)


def test_worked_example_182ms():
    plan = make_plan(2, 3, 6, [1, 1])
    assert query_cost(plan, QueryWork.uniform(plan), PAPER_COEFFS) == 182.0


def test_zero_work_query_costs_nothing():
    plan = make_plan(2, 2, 8, [3, 4])
    zero = QueryWork(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    assert query_cost(plan, zero, PAPER_COEFFS) == 0.0


def test_query_cost_matches_straight_line_sum():
    rng = np.random.default_rng(1)
    prof = random_profile(rng)
    coeffs = CostCoefficients(*rng.uniform(0.1, 2, 4))
    for plan in enumerate_plans(6, prof.dim, prof.list_sizes.size, prof.list_sizes):
        for qi in range(prof.q_count):
            # hand-derived units: candidates, their floats, their handoffs, per-shard dispatch
            shard_n = [0.0] * plan.n_vec
            for c in prof.probes[qi]:
                shard_n[plan.shard_of_list[c]] += prof.list_sizes[c]
            total = sum(shard_n)
            expect = 0.0
            for w in plan.dim_spec.widths():
                expect += coeffs.comp_dim * total * w
                expect += coeffs.comm_dim * total * (plan.n_dim - 1) / plan.n_dim
            for n in shard_n:
                expect += coeffs.comp_vec * n
                expect += coeffs.comm_vec * (prof.dim if n > 0 else 0)
            got = query_cost(plan, query_work(plan, prof, qi), coeffs)
            assert math.isclose(got, expect, rel_tol=1e-12)


def test_node_load_cases():
    prof = WorkloadProfile(np.array([[0], [1], [2], [3]]), np.array([5, 5, 5, 5]), 8)
    plan = make_plan(4, 1, 8, prof.list_sizes)
    loads = node_load(plan, prof, PAPER_COEFFS)
    assert np.allclose(loads, loads[0])
    hot = WorkloadProfile(np.array([[2]] * 10), np.array([5, 5, 5, 5]), 8)
    loads = node_load(plan, hot, PAPER_COEFFS)
    assert loads[plan.node(plan.shard_of_list[2], 0)] == loads.sum() > 0


def test_node_load_bruteforce_zipf():
    rng = np.random.default_rng(2)
    sizes = rng.integers(10, 100, size=16)
    p = 1.0 / np.arange(1, 17) ** 1.2
    probes = rng.choice(16, size=(200, 1), p=p / p.sum())
    prof = WorkloadProfile(probes, sizes, 32)
    coeffs = CostCoefficients(0.5, 2.0, 1.5, 0.1)
    for plan in enumerate_plans(4, 32, 16, sizes):
        expect = np.zeros(plan.n_nodes)
        widths = plan.dim_spec.widths()
        for row in probes:
            for c in row:
                s = plan.shard_of_list[c]
                for b in range(plan.n_dim):
                    expect[plan.node(s, b)] += sizes[c] * (coeffs.comp_dim * widths[b] + coeffs.comp_vec / plan.n_dim)
        assert np.allclose(node_load(plan, prof, coeffs), expect)


def test_imbalance_examples():
    assert imbalance([3.0, 3.0, 3.0]) == 0.0
    assert imbalance({0: 0.0, 1: 10.0}) == 5.0
    with pytest.raises(BadParam):
        imbalance([])


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=30))
def test_imbalance_two_pass(xs):
    mean = sum(xs) / len(xs)
    expect = math.sqrt(sum((x - mean) ** 2 for x in xs) / len(xs))
    assert math.isclose(imbalance(xs), expect, rel_tol=1e-9, abs_tol=1e-6)


def test_total_cost_alpha():
    rng = np.random.default_rng(3)
    prof = random_profile(rng)
    plan = make_plan(3, 1, prof.dim, prof.list_sizes)
    base = workload_cost(plan, prof, PAPER_COEFFS)
    assert total_cost(plan, prof, PAPER_COEFFS, 0) == base
    assert imbalance(node_load(plan, prof, PAPER_COEFFS)) > 0
    assert total_cost(plan, prof, PAPER_COEFFS, 1) < total_cost(plan, prof, PAPER_COEFFS, 2)
    with pytest.raises(BadParam):
        total_cost(plan, prof, PAPER_COEFFS, -1)


def test_cost_additive_at_alpha_zero():
    rng = np.random.default_rng(4)
    prof = random_profile(rng, q=30)
    a, b = prof.subset(slice(0, 13)), prof.subset(slice(13, 30))
    for plan in enumerate_plans(6, prof.dim, 12, prof.list_sizes):
        whole = total_cost(plan, prof, PAPER_COEFFS, 0)
        assert math.isclose(whole, total_cost(plan, a, PAPER_COEFFS, 0) + total_cost(plan, b, PAPER_COEFFS, 0))


def test_enumerate_plans_contract():
    assert [p.shape for p in enumerate_plans(6, 64, 64)] == [(1, 6), (2, 3), (3, 2), (6, 1)]
    assert [p.shape for p in enumerate_plans(4, 2, 64)] == [(2, 2), (4, 1)]
    assert len(enumerate_plans(12, 64, 64)) == 6
    assert [p.shape for p in enumerate_plans(4, 64, 2)] == [(1, 4), (2, 2)]
    with pytest.raises(BadParam):
        enumerate_plans(0, 4, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 40), st.integers(1, 30), st.integers(0, 1000))
def test_plan_validity(n_nodes, d, nlist, seed):
    sizes = np.random.default_rng(seed).integers(0, 20, size=nlist)
    for plan in enumerate_plans(n_nodes, d, nlist, sizes):
        assert plan.n_vec * plan.n_dim == n_nodes
        cells = {plan.node(s, b) for s in range(plan.n_vec) for b in range(plan.n_dim)}
        assert cells == set(range(n_nodes))
        assert plan.dim_spec.boundaries[0] == 0 and plan.dim_spec.boundaries[-1] == d
        assert len(plan.shard_of_list) == nlist
        assert sorted(c for s in range(plan.n_vec) for c in plan.lists_of_shard(s)) == list(range(nlist))
        for node in range(n_nodes):
            s, b = plan.cell_of(node)
            assert plan.node(s, b) == node == s * plan.n_dim + b


def test_lpt_balances_sizes():
    assert assign_shards([10, 1, 1, 8], 2) == (0, 1, 1, 1)
    fills = np.bincount(assign_shards([5] * 8, 4), weights=[5] * 8)
    assert (fills == 10).all()


def test_plan_json_roundtrip():
    plan = make_plan(2, 3, 10, [4, 1, 3, 3])
    again = PartitionPlan.from_json(plan.to_json())
    assert again == plan
    doc = plan.to_dict()
    assert doc["n_vec"] == 2 and doc["boundaries"] == [0, 3, 6, 10]
    doc["node_of_block"][0]["node"] = 1
    with pytest.raises(BadParam):
        PartitionPlan.from_dict(doc)


def test_mode_constraints():
    assert all(p.n_dim == 1 for p in plans_for_mode("Harmony-vector", 4, 16, 16))
    assert all(p.n_vec == 1 for p in plans_for_mode("harmony-dimension", 4, 16, 16))
    assert len(plans_for_mode("HARMONY", 4, 16, 16)) == 3
    with pytest.raises(BadParam):
        plans_for_mode("faiss", 4, 16, 16)


def test_select_plan_rules():
    rng = np.random.default_rng(5)
    prof = random_profile(rng)
    only = make_plan(2, 3, prof.dim, prof.list_sizes)
    assert select_plan([only], prof, PAPER_COEFFS, 1.0) is only
    with pytest.raises(NoCandidates):
        select_plan([], prof, PAPER_COEFFS, 1.0)
    # all-zero coefficients: every plan ties, more shards then fewer blocks wins
    zero = CostCoefficients(0, 0, 0, 0)
    assert select_plan(enumerate_plans(6, 24, 12, prof.list_sizes), prof, zero, 1.0).shape == (6, 1)


def test_comm_dominated_uniform_prefers_vector():
    sizes = np.full(16, 20)
    prof = WorkloadProfile(np.arange(16).reshape(16, 1), sizes, 32)
    comm_heavy = CostCoefficients(0.001, 50.0, 0.001, 0.001)
    assert select_plan(enumerate_plans(4, 32, 16, sizes), prof, comm_heavy, 1.0).n_dim == 1


def test_comm_dominated_moves_from_three_blocks_to_two():
    rng = np.random.default_rng(6)
    prof = random_profile(rng, nlist=12, q=40, nprobe=4, dim=24)
    cands = [p for p in enumerate_plans(6, 24, 12, prof.list_sizes) if p.shape in {(2, 3), (3, 2)}]
    assert select_plan(cands, prof, CostCoefficients(1.0, 30.0, 1.0, 1.0), 0.0).shape == (3, 2)


def test_extreme_skew_large_alpha_prefers_dimension():
    sizes = np.full(16, 20)
    prof = WorkloadProfile(np.zeros((50, 1), dtype=int), sizes, 32)
    coeffs = CostCoefficients(1.0, 0.5, 1.0, 1.0)
    assert select_plan(enumerate_plans(4, 32, 16, sizes), prof, coeffs, 100.0).n_vec == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 5), st.floats(0, 5))
def test_winner_imbalance_nonincreasing_in_alpha(seed, a1, a2):
    lo, hi = sorted((a1, a2))
    rng = np.random.default_rng(seed)
    prof = random_profile(rng)
    coeffs = CostCoefficients(*rng.uniform(0, 1, 4))
    cands = enumerate_plans(6, prof.dim, 12, prof.list_sizes)
    w_lo = select_plan(cands, prof, coeffs, lo)
    w_hi = select_plan(cands, prof, coeffs, hi)
    i_lo = imbalance(node_load(w_lo, prof, coeffs))
    i_hi = imbalance(node_load(w_hi, prof, coeffs))
    assert i_hi <= i_lo + 1e-9 * max(1.0, i_lo)


def test_workload_hits_invariant():
    rng = np.random.default_rng(7)
    prof = random_profile(rng, q=25, nprobe=3)
    assert prof.hits.sum() == 25 * 3 and (prof.hits >= 0).all()


def test_coefficients_from_rates_units():
    c = coefficients_from_rates(0.002, 1000.0, 0.01)
    assert c.comp_dim == pytest.approx(2e-6)
    assert c.comm_dim == pytest.approx(12 / 1000 * 1e-3)
    assert c.comm_vec == pytest.approx(4 / 1000 * 1e-3)
    with pytest.raises(BadParam):
        CostCoefficients(-1, 0, 0, 0)
