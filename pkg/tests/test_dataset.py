from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmplab.dataset import (FeatureSchema, compute_stats, denormalize, normalize, read_dataset, sample_one,
                            sample_scenarios, split, split_sizes, synthetic_problem, write_dataset)
from lmplab.dcopf import DcOpfSolution, Status, solve_dcopf, verify_kkt
from lmplab.errors import (DimensionMismatch, InvalidConfig, InvalidFractions, ParseError, SchemaMismatch,
                           TooManyInfeasible)
from lmplab.grid import Edge, Grid, generate_synthetic_grid


@pytest.fixture(scope="module")
def grid12():
    return generate_synthetic_grid(12, 2.5, 1.0, seed=3)


@pytest.fixture(scope="module")
def ds12(grid12):
    return sample_scenarios(grid12, synthetic_problem(grid12, seed=3), count=40, seed=5)


def test_schema():
    assert FeatureSchema().d == 4
    assert FeatureSchema(("p_max", "p_min", "q_max", "cost_a", "cost_b")).d == 5
    with pytest.raises(InvalidConfig):
        FeatureSchema(("p_max", "p_max", "p_min", "cost_a", "cost_b"))
    with pytest.raises(InvalidConfig):
        FeatureSchema(("p_max", "bogus"))


def test_q_columns_zero_filled(congested3):
    schema = FeatureSchema(("p_max", "p_min", "q_max", "q_min", "cost_a", "cost_b"))
    X = schema.features(congested3)
    assert X.shape == (3, 6)
    np.testing.assert_array_equal(X[:, 2:4], 0.0)
    np.testing.assert_array_equal(X[:, 0], congested3.p_max)


def test_zero_jitter_reproduces_base(congested3):
    ds = sample_scenarios(congested3.grid, congested3, 0.0, 0.0, count=5, seed=1)
    for s in ds.scenarios:
        np.testing.assert_allclose(s.pi, [0.6, 4.8, 9.0], atol=1e-7)
    assert ds.congested_fraction == 1.0


def test_congested_fraction_small_jitter(congested3):
    ds = sample_scenarios(congested3.grid, congested3, 0.1, 0.1, count=200, seed=0)
    assert ds.congested_fraction > 0.5
    assert ds.congested_fraction == sum(bool(s.congested) for s in ds.scenarios) / 200


def test_deterministic(grid12, ds12):
    again = sample_scenarios(grid12, synthetic_problem(grid12, seed=3), count=40, seed=5)
    assert again == ds12
    assert again.digest() == ds12.digest()


def test_threads_do_not_change_result(grid12, ds12):
    threaded = sample_scenarios(grid12, synthetic_problem(grid12, seed=3), count=40, seed=5, threads=3)
    assert threaded.digest() == ds12.digest()


def test_order_independent(grid12, ds12):
    base = synthetic_problem(grid12, seed=3).replace(grid=grid12)
    late = sample_one(base, FeatureSchema(), 0.2, 0.2, seed=5, index=17)
    assert late == ds12.scenarios[17]


def test_labels_pass_kkt(grid12, ds12):
    problems = ds12.problems(grid12)
    for s, prob in zip(ds12.scenarios, problems):
        sol = DcOpfSolution(Status.OPTIMAL, s.p_star, s.f_star, s.lam, s.mu_upper, s.mu_lower, s.pi,
                            0.0, 0, "")
        assert verify_kkt(prob, sol, tolerance=1e-6).ok


def test_rebuilt_problem_resolves_to_label(grid12, ds12):
    prob = ds12.problems(grid12)[0]
    np.testing.assert_allclose(solve_dcopf(prob).pi, ds12.scenarios[0].pi, atol=1e-7)


def test_synthetic_problem_depends_on_node_count_only(grid12):
    other = generate_synthetic_grid(12, 2.9, 3.0, seed=99)
    a, b = synthetic_problem(grid12, seed=4), synthetic_problem(other, seed=4)
    for k in ("cost_a", "cost_b", "p_min", "p_max"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_bad_jitter(congested3):
    with pytest.raises(InvalidConfig):
        sample_scenarios(congested3.grid, congested3, 1.0, 0.0)
    with pytest.raises(InvalidConfig):
        sample_scenarios(congested3.grid, congested3, 0.1, 0.1, count=0)


def test_infeasible_budget(two_node):
    from lmplab.dcopf import DcOpfProblem
    # a fixed 5-unit load behind a 2-unit line can never be served
    prob = DcOpfProblem(two_node, [1.0, 0.0], [0.0, 0.0], [0.0, -5.0], [10.0, -5.0])
    with pytest.raises(TooManyInfeasible):
        sample_scenarios(two_node, prob, 0.1, 0.1, count=1)


@pytest.mark.parametrize("count, sizes", [(10, [8, 1, 1]), (5000, [4000, 500, 500]), (7, [5, 1, 1])])
def test_split_sizes(count, sizes):
    assert split_sizes(count, (0.8, 0.1, 0.1)) == sizes


@settings(max_examples=50, deadline=None)
@given(count=st.integers(3, 500), a=st.floats(0.05, 0.9), b=st.floats(0.05, 0.9))
def test_split_sizes_property(count, a, b):
    if a + b >= 0.95:
        return
    fr = (a, b, 1 - a - b)
    sizes = split_sizes(count, fr)
    assert sum(sizes) == count
    assert all(abs(s - count * f) < 1 + 1e-9 for s, f in zip(sizes, fr))


def test_split_bad_fractions(ds12):
    with pytest.raises(InvalidFractions):
        split(ds12, (0.5, 0.5, 0.5))
    with pytest.raises(InvalidFractions):
        split(ds12, (1.0, 0.0, 0.0))


def test_split_partition(ds12):
    parts = split(ds12, seed=2)
    assert [len(p) for p in parts] == [32, 4, 4]
    ids = sorted(id(s) for p in parts for s in p.scenarios)
    assert ids == sorted(id(s) for s in ds12.scenarios)
    again = split(ds12, seed=2)
    assert all(x == y for x, y in zip(parts, again))


def test_normalize_round_trip(ds12):
    norm, stats = normalize(ds12)
    back = denormalize(norm)
    for s, t in zip(ds12.scenarios, back.scenarios):
        np.testing.assert_allclose(t.features, s.features, atol=1e-12)
        np.testing.assert_allclose(t.pi, s.pi, atol=1e-12)
    assert abs(norm.labels.mean()) < 1e-12


def test_constant_column_normalizes_to_zero(congested3):
    ds = sample_scenarios(congested3.grid, congested3, 0.0, 0.0, count=3)
    norm, stats = normalize(ds)
    # cost_b is zero at every node of every scenario
    np.testing.assert_array_equal(norm.features[:, :, 3], 0.0)
    assert stats.feature_std[3] == 1e-8


def test_train_stats_on_shifted_set(ds12):
    tr, _, te = split(ds12)
    stats = compute_stats(tr)
    shifted = replace(te, scenarios=[replace(s, features=s.features + 10.0) for s in te.scenarios])
    norm, _ = normalize(shifted, stats)
    assert np.all(norm.features.reshape(-1, 4).mean(axis=0) > 0)


def test_normalize_dimension_mismatch(ds12, congested3):
    schema = FeatureSchema(("p_max", "p_min", "q_max", "cost_a", "cost_b"))
    other = sample_scenarios(congested3.grid, congested3, 0.1, 0.1, count=2, schema=schema)
    with pytest.raises(DimensionMismatch):
        normalize(other, compute_stats(ds12))


def test_file_round_trip(tmp_path, grid12, ds12):
    path = tmp_path / "d.jsonl"
    write_dataset(ds12, path)
    back = read_dataset(path, grid12)
    assert back == ds12
    assert back.digest() == ds12.digest()


def test_truncated_file(tmp_path, ds12):
    path = tmp_path / "d.jsonl"
    write_dataset(ds12, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(ParseError):
        read_dataset(path)
    path.write_text("\n".join(lines[:-1]) + "\n" + lines[-1][:40])
    with pytest.raises(ParseError):
        read_dataset(path)


def test_wrong_grid(tmp_path, ds12):
    path = tmp_path / "d.jsonl"
    write_dataset(ds12, path)
    with pytest.raises(SchemaMismatch):
        read_dataset(path, generate_synthetic_grid(12, 2.5, 1.0, seed=4))


def test_stored_lines_are_raw(tmp_path, ds12):
    norm, _ = normalize(ds12)
    with pytest.raises(InvalidConfig):
        write_dataset(norm, tmp_path / "x.jsonl")


def test_fixed_load_perturbation_stays_fixed(ring3):
    from lmplab.dcopf import DcOpfProblem
    from lmplab.dataset import perturb_problem
    prob = DcOpfProblem(ring3, [1.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, -1.0], [5.0, 5.0, -1.0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = perturb_problem(prob, rng, 0.3, 0.3)
        assert p.p_min[2] == p.p_max[2]
        assert 0.7 <= -p.p_min[2] <= 1.3
