import numpy as np
import pytest

from lmplab.dataset import DataConfig, make_splits
from lmplab.errors import IncompatibleTopology, InvalidConfig, NoValidPerturbation
from lmplab.grid import Edge, Grid, generate_synthetic_grid
from lmplab.nn import build_model, count_parameters
from lmplab.training import TrainConfig, evaluate, train
from lmplab.transfer import (adapt_model, perturb_topology, run_transfer_experiment, summarize,
                             write_per_sample_tsv)


def tree(n):
    return Grid(n, tuple(Edge(i, i + 1, 1.0, 1.0) for i in range(n - 1)))


def test_tree_has_no_perturbation():
    with pytest.raises(NoValidPerturbation):
        perturb_topology(tree(6), 2, seed=0)


def test_ring_single_removal(ring3):
    seen = set()
    for seed in range(30):
        g, removed = perturb_topology(ring3, 1, seed)
        assert len(removed) == 1 and g.is_connected() and g.n_edges == 2
        seen.add(removed[0])
    assert seen == {0, 1, 2}


def test_perturb_deterministic_and_bounded():
    g = generate_synthetic_grid(30, 2.5, 1.0, seed=7)
    counts = set()
    for seed in range(20):
        a, ra = perturb_topology(g, 2, seed)
        b, rb = perturb_topology(g, 2, seed)
        assert ra == rb and a == b
        assert 1 <= len(ra) <= 2 and a.is_connected()
        counts.add(len(ra))
    assert counts == {1, 2}


def test_perturb_bad_max_lines(ring3):
    with pytest.raises(InvalidConfig):
        perturb_topology(ring3, 3, seed=0)


@pytest.fixture(scope="module")
def g20():
    return generate_synthetic_grid(20, 2.6, 1.0, seed=1)


def test_adapt_zero_removal_is_identity(g20):
    m = build_model("gnn", g20, (4, 8, 1), K=2, seed=0)
    a = adapt_model(m, g20)
    assert np.array_equal(a.theta, m.theta)
    assert a.grid_hash == m.grid_hash


def test_adapt_drops_two_entries_and_matches_zeroed_filter(g20):
    m = build_model("gnn", g20, (4, 8, 1), K=2, seed=0)
    g, removed = perturb_topology(g20, 1, seed=4)
    a = adapt_model(m, g)
    assert a.n_params == m.n_params - 2
    assert a.n_params == count_parameters("gnn", (4, 8, 1), g, K=2)
    assert a.grid_hash == g.grid_hash()

    zeroed = m.copy()
    k = removed[0]
    zeroed.param("filter")[20 + 2 * k:20 + 2 * k + 2] = 0.0
    X = np.random.default_rng(0).normal(size=(5, 20, 4))
    np.testing.assert_array_equal(a.predict(X), zeroed.predict(X))


def test_adapt_preserves_surviving_values(g20):
    m = build_model("gnn", g20, (4, 8, 1), K=2, seed=0)
    m.param("filter")[:] = np.arange(m.param("filter").size, dtype=float)
    g, removed = perturb_topology(g20, 2, seed=0)
    assert len(removed) == 2
    a = adapt_model(m, g)
    f = a.param("filter")
    np.testing.assert_array_equal(f[:20], np.arange(20.0))
    survivors = [k for k in range(g20.n_edges) if k not in removed]
    for new_k, old_k in enumerate(survivors):
        assert f[20 + 2 * new_k] == 20 + 2 * old_k
        assert f[21 + 2 * new_k] == 21 + 2 * old_k
    np.testing.assert_array_equal(a.theta[f.size:], m.theta[m.param("filter").size:])


def test_adapt_rejects_new_lines_and_node_changes(g20):
    m = build_model("gnn", g20, (4, 1), K=1)
    extra = next((i, j) for i in range(20) for j in range(i + 1, 20) if not g20.has_edge(i, j))
    bigger = Grid(20, tuple(sorted(g20.edges + (Edge(*extra, 1.0, 1.0),), key=lambda e: (e.i, e.j))))
    with pytest.raises(IncompatibleTopology):
        adapt_model(m, bigger)
    with pytest.raises(IncompatibleTopology):
        adapt_model(m, generate_synthetic_grid(21, 2.5, 1.0, seed=0))
    with pytest.raises(InvalidConfig):
        adapt_model(build_model("fcnn", g20, (4, 1)), g20)


@pytest.fixture(scope="module")
def pretrained():
    g = generate_synthetic_grid(12, 2.8, 1.2, seed=2)
    data = DataConfig(count=300, seed=1, problem_seed=2)
    tr, va, te = make_splits(g, data)
    cfg = TrainConfig(lr=3e-3, max_epochs=40, seed=0)
    reg, _ = train(build_model("gnn", g, (4, 8, 1), K=2, seed=0), tr, va, cfg, g)
    return g, data, cfg, reg, te


def test_control_run_matches_base_metrics(pretrained):
    g, data, cfg, reg, te = pretrained
    exp = run_transfer_experiment(reg, g, 0, data, finetune_epochs=2, train_config=cfg, max_lines=0)
    assert exp.removed_edges == []
    base = evaluate(reg, te, g)
    for k in ("normalized_l2", "violation_rate", "feasibility_ratio", "sample_feasible_fraction"):
        assert getattr(exp.pretrained_metrics, k) == getattr(base, k)
    assert exp.test_digest == te.digest()


def test_experiment_record(pretrained, tmp_path):
    g, data, cfg, reg, te = pretrained
    exp = run_transfer_experiment(reg, g, 3, data, finetune_epochs=3, train_config=cfg)
    assert 1 <= len(exp.removed_edges) <= 2
    assert exp.finetuned_metrics.epochs_run == 3
    assert exp.pretrained_metrics.epochs_run == 0
    d = exp.to_dict()
    assert set(d) >= {"pretrained_metrics", "finetuned_metrics", "scratch_metrics", "finetune_epochs"}
    assert "wall_time" not in d["scratch_metrics"]
    again = run_transfer_experiment(reg, g, 3, data, finetune_epochs=3, train_config=cfg)
    assert again.to_dict() == d
    summary = summarize([exp, again])
    assert summary["finetuned"]["normalized_l2"] == exp.finetuned_metrics.normalized_l2
    write_per_sample_tsv([exp], tmp_path / "e.tsv")
    rows = (tmp_path / "e.tsv").read_text().splitlines()
    assert len(rows) == 1 + 3 * len(te)


def test_experiment_rejects_bad_epochs_and_grid(pretrained):
    g, data, cfg, reg, te = pretrained
    with pytest.raises(InvalidConfig):
        run_transfer_experiment(reg, g, 0, data, finetune_epochs=11)
    with pytest.raises(IncompatibleTopology):
        run_transfer_experiment(reg, generate_synthetic_grid(12, 2.8, 1.2, seed=3), 0, data)
