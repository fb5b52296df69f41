import numpy as np
import pytest
import torch

from isgib.graph import Graph, make_shift_benchmark
from isgib.relations import RelationMatrix, one_hot, relation_matrix
from isgib.report import (
    MissingCheckpointError, ablation_ladder, alignment_score, evaluation_nodes, export_heatmaps,
    heatmap_matrices, noise_sweep, write_results_csv, write_rows_csv,
)
from isgib.synthetic import citation_like_graph
from isgib.trainer import RunConfig, train


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    data = make_shift_benchmark(citation_like_graph(40, 2, 16, words_per_class=4, seed=1), seed=2)
    ck = tmp_path_factory.mktemp("rep") / "ck"
    res = train(RunConfig(layers=2, hidden=8, epochs=2, b=16), data, checkpoint_dir=ck)
    return data, res, ck


def test_ladder():
    assert ablation_ladder((0.5, 0.1, 0.5)) == [(0, 0, 0), (0.5, 0, 0), (0.5, 0.1, 0), (0.5, 0.1, 0.5)]


def test_alignment_zero_for_class_separated_embeddings():
    labels = [0, 0, 1, 2, 2]
    h = 3.0 * one_hot(labels, 3)
    r_y = relation_matrix(one_hot(labels, 3), "dot")
    assert alignment_score(relation_matrix(h, "cosine").numpy(), r_y.numpy()) == 0.0


def test_evaluation_nodes_sorted_by_class():
    g = citation_like_graph(60, 3, 24, seed=4)
    idx = evaluation_nodes(g, 20, seed=1)
    assert len(set(idx.tolist())) == 20
    assert np.all(np.diff(g.labels[idx]) >= 0)
    assert idx.tolist() == evaluation_nodes(g, 20, seed=1).tolist()


def test_heatmap_exports(trained, tmp_path):
    data, res, ck = trained
    g = data.test_graphs[0]
    info = export_heatmaps(ck, g, tmp_path, b=12)
    labels = RelationMatrix.from_csv(tmp_path / "heatmap_labels.csv")
    assert set(np.unique(labels.values).tolist()) == {0.0, 1.0}
    reps = RelationMatrix.from_csv(info["paths"]["reps"])
    assert reps.normalization == "min-max" and reps.metric == "cosine"
    direct = heatmap_matrices(res.model, res.config, g, b=12)
    assert np.array_equal(reps.values, direct["reps"].values)
    assert info["alignment"] == alignment_score(direct["reps"].values, direct["labels"].values)


def test_missing_checkpoint(trained, tmp_path):
    with pytest.raises(MissingCheckpointError):
        export_heatmaps(tmp_path / "absent", trained[0].test_graphs[0], tmp_path)


def test_empty_sweep():
    with pytest.raises(ValueError):
        noise_sweep(RunConfig(), citation_like_graph(30, 2, 8, words_per_class=2), [])


def test_sweep_rows():
    g = citation_like_graph(30, 2, 8, words_per_class=2)
    rows, results = noise_sweep(RunConfig(layers=1, hidden=4, epochs=1, b=8), g,
                                [(0.0, 1.0), (1.0, 2.0)], seeds=[0, 1], methods=("isgib", "erm"))
    assert [(r["mu"], r["sigma"], r["method"]) for r in rows] == \
        [(0.0, 1.0, "isgib"), (0.0, 1.0, "erm"), (1.0, 2.0, "isgib"), (1.0, 2.0, "erm")]
    assert len(results) == 8 and all(r["runs"] == 2 for r in rows)


def test_csv_writers(trained, tmp_path):
    _, res, _ = trained
    a = write_results_csv(tmp_path / "a.csv", [res]).read_bytes()
    b = write_results_csv(tmp_path / "b.csv", [res]).read_bytes()
    assert a == b and b"config_hash" in a
    with pytest.raises(ValueError):
        write_rows_csv(tmp_path / "c.csv", [])
