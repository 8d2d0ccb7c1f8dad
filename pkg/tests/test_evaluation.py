import math
from collections import Counter

import numpy as np
import pytest

from contextshot.encoders import EncoderConfig, ResidualSpec, build_encoder
from contextshot.errors import ValidationError
from contextshot.evaluation import (
    IclPredictor,
    KnnPredictor,
    SweepTable,
    context_sweep,
    evaluate,
    format_mean_se,
    knn_predict,
    mean_and_se,
    precompute_embeddings,
    write_report_json,
)
from contextshot.icl import IclModel, IclModelConfig
from contextshot.seeding import derive_seed


# Brute-force KNN oracle --------------------------------------------------------


def knn_oracle(emb, slots, query, k):
    """Sorted-list implementation with explicit tie rules."""
    ranked = sorted(range(len(slots)), key=lambda i: (float(((emb[i] - query) ** 2).sum()), i))
    nearest = ranked[:k]
    counts = Counter(int(slots[i]) for i in nearest)
    top = max(counts.values())
    tied = {s for s, c in counts.items() if c == top}
    for i in nearest:
        if int(slots[i]) in tied:
            return int(slots[i])
    raise AssertionError


# mean / SE ----------------------------------------------------------------------


def test_mean_se_all_ones():
    assert mean_and_se(np.ones(100)) == (1.0, 0.0)


def test_mean_se_half():
    mean, se = mean_and_se([1] * 2500 + [0] * 2500)
    assert mean == 0.5
    assert abs(se - math.sqrt(0.25 / 5000)) < 1e-15
    assert abs(se - 0.00707106781) < 1e-9


def test_mean_se_quarter():
    mean, se = mean_and_se([1, 0, 0, 0])
    assert mean == 0.25
    assert abs(se - math.sqrt(0.25 * 0.75 / 4)) < 1e-15
    assert abs(se - 0.2165063509) < 1e-9


def test_mean_se_validation():
    with pytest.raises(ValidationError):
        mean_and_se([])
    with pytest.raises(ValidationError):
        mean_and_se([0, 2])


def test_mean_se_closed_form_property():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 400))
        bits = rng.integers(0, 2, size=n)
        mean, se = mean_and_se(bits)
        assert mean == bits.sum() / n
        assert abs(se - math.sqrt(mean * (1 - mean) / n)) < 1e-15


# formatting -----------------------------------------------------------------------


def test_format_table_anchor():
    se = math.sqrt(0.208 * (1 - 0.208) / 5000)
    assert format_mean_se(0.208, se) == "20.8 ± 0.6"


def test_format_half_case():
    se = math.sqrt(0.25 / 5000)
    assert format_mean_se(0.5, se) == "50.0 ± 0.7"


def test_format_rounds_half_up():
    assert format_mean_se(0.2045, 0.005) == "20.5 ± 0.5"


# knn ---------------------------------------------------------------------------


def test_knn_single_neighbor():
    emb = np.array([[0.0], [10.0]])
    assert knn_predict(emb, [3, 4], np.array([1.0]), k_neighbors=1) == 3


def test_knn_majority_1d_example():
    emb = np.array([[0.1], [0.2], [0.3], [5.0], [6.0]])
    slots = [0, 0, 0, 1, 1]
    assert knn_predict(emb, slots, np.array([0.0]), k_neighbors=5) == 0


def test_knn_majority_tie_goes_to_closest():
    # 2-2 split among the 4 nearest plus one distant outlier
    emb = np.array([[1.0], [1.1], [1.2], [1.3], [9.0]])
    slots = [0, 1, 0, 1, 2]
    expected = knn_oracle(emb, slots, np.array([0.0]), 5)
    assert expected == 0  # slot of the single closest neighbor
    assert knn_predict(emb, slots, np.array([0.0]), k_neighbors=5) == expected


def test_knn_distance_tie_lower_index():
    emb = np.array([[1.0], [-1.0], [2.0]])
    slots = [7, 5, 7]
    # supports 0 and 1 are equidistant; index 0 wins the k=1 vote
    assert knn_predict(emb, slots, np.array([0.0]), k_neighbors=1) == 7


def test_knn_insufficient_supports():
    with pytest.raises(ValidationError):
        knn_predict(np.zeros((3, 2)), [0, 1, 2], np.zeros(2), k_neighbors=5)


def test_knn_matches_oracle_on_random_instances():
    rng = np.random.default_rng(1)
    for trial in range(200):
        m = int(rng.integers(5, 21))
        d = int(rng.integers(1, 9))
        # quantized coordinates force frequent distance and majority ties
        emb = rng.integers(0, 3, size=(m, d)).astype(np.float64)
        slots = rng.integers(0, 4, size=m)
        query = rng.integers(0, 3, size=d).astype(np.float64)
        k = int(rng.integers(1, min(m, 7) + 1))
        assert knn_predict(emb, slots, query, k) == knn_oracle(emb, slots, query, k), trial


# evaluate -----------------------------------------------------------------------


class OraclePredictor:
    name = "oracle"

    def __call__(self, episode):
        return episode.query_slot


class DeterministicRandomPredictor:
    """Uniform-ish over the active slots, deterministic per episode."""

    name = "random"

    def __call__(self, episode):
        active = sorted(episode.slot_of.values())
        return active[episode.query_index % len(active)]


def test_evaluate_oracle_predictor(tiny_shapes):
    report = evaluate(OraclePredictor(), tiny_shapes, n=5, k=2, tasks=50, seed=3)
    assert report.mean_acc == 1.0
    assert report.std_err == 0.0


def test_evaluate_random_predictor_near_chance(tiny_shapes):
    report = evaluate(DeterministicRandomPredictor(), tiny_shapes, n=5, k=2, tasks=5000, seed=4)
    se = math.sqrt(0.2 * 0.8 / 5000)
    assert abs(report.mean_acc - 0.2) <= 3 * se


def test_evaluate_deterministic(tiny_shapes):
    a = evaluate(DeterministicRandomPredictor(), tiny_shapes, n=4, k=2, tasks=100, seed=5, keep_outcomes=True)
    b = evaluate(DeterministicRandomPredictor(), tiny_shapes, n=4, k=2, tasks=100, seed=5, keep_outcomes=True)
    assert a.per_task_outcomes == b.per_task_outcomes
    assert (a.mean_acc, a.std_err) == (b.mean_acc, b.std_err)


def test_evaluate_thread_invariance(tiny_shapes):
    one = evaluate(DeterministicRandomPredictor(), tiny_shapes, n=4, k=2, tasks=60, seed=6, keep_outcomes=True)
    two = evaluate(DeterministicRandomPredictor(), tiny_shapes, n=4, k=2, tasks=60, seed=6,
                   threads=3, keep_outcomes=True)
    assert one.per_task_outcomes == two.per_task_outcomes


def test_evaluate_validation(tiny_shapes):
    with pytest.raises(ValidationError):
        evaluate(OraclePredictor(), tiny_shapes, n=4, k=2, tasks=0, seed=0)


# predictors over real models ------------------------------------------------------


@pytest.fixture(scope="module")
def small_encoder():
    return build_encoder(
        EncoderConfig(kind="residual_cnn", input_size=(16, 16), embed_dim=8,
                      residual=ResidualSpec(widths=(8,), blocks_per_stage=1)),
        init_seed=3,
    )


def test_icl_predictor_table_matches_direct(tiny_shapes, small_encoder):
    model = IclModel(IclModelConfig(n_max=10, embed_dim=8, heads=2, layers=1,
                                    feedforward_dim=16, dropout=0.0), init_seed=2)
    table = precompute_embeddings(small_encoder, tiny_shapes)
    with_table = evaluate(IclPredictor(model, small_encoder, embedding_table=table),
                          tiny_shapes, n=3, k=2, tasks=40, seed=8, keep_outcomes=True)
    direct = evaluate(IclPredictor(model, small_encoder),
                      tiny_shapes, n=3, k=2, tasks=40, seed=8, keep_outcomes=True)
    assert with_table.per_task_outcomes == direct.per_task_outcomes


def test_knn_predictor_runs(tiny_shapes, small_encoder):
    table = precompute_embeddings(small_encoder, tiny_shapes)
    report = evaluate(KnnPredictor(small_encoder, 5, embedding_table=table),
                      tiny_shapes, n=3, k=2, tasks=30, seed=9)
    assert report.predictor == "knn"
    assert 0.0 <= report.mean_acc <= 1.0


# sweep -------------------------------------------------------------------------


def test_sweep_ten_rows(tiny_shapes):
    table = context_sweep(DeterministicRandomPredictor(), tiny_shapes, n=3,
                          k_values=range(1, 11), tasks=20, seed=10)
    assert [row[0] for row in table.rows] == list(range(1, 11))


def test_sweep_single_k_equals_evaluate(tiny_shapes):
    table = context_sweep(OraclePredictor(), tiny_shapes, n=3, k_values=[2], tasks=25, seed=11)
    report = evaluate(OraclePredictor(), tiny_shapes, n=3, k=2, tasks=25,
                      seed=derive_seed(11, "sweep-k", 2))
    assert table.rows[0] == (2, report.mean_acc, report.std_err)


def test_sweep_deterministic(tiny_shapes):
    a = context_sweep(DeterministicRandomPredictor(), tiny_shapes, n=3, k_values=[1, 3], tasks=30, seed=12)
    b = context_sweep(DeterministicRandomPredictor(), tiny_shapes, n=3, k_values=[1, 3], tasks=30, seed=12)
    assert a.rows == b.rows


def test_sweep_validation(tiny_shapes):
    with pytest.raises(ValidationError):
        context_sweep(OraclePredictor(), tiny_shapes, n=3, k_values=[], tasks=5, seed=0)
    with pytest.raises(ValidationError):
        context_sweep(OraclePredictor(), tiny_shapes, n=3, k_values=[3, 1], tasks=5, seed=0)
    with pytest.raises(ValidationError):
        SweepTable(n=3, tasks=5, seed=0, rows=((2, 0.5, 0.1), (1, 0.5, 0.1)))


def test_sweep_csv_format(tmp_path):
    table = SweepTable(n=5, tasks=100, seed=0, rows=((1, 0.5, 0.05), (5, 0.75, 0.04330127018922193)))
    path = tmp_path / "sweep.csv"
    table.to_csv(path)
    text = path.read_bytes().decode("utf-8")
    lines = text.split("\n")
    assert lines[0] == "k,mean_acc,std_err"
    assert lines[1] == "1,0.5,0.05"
    assert "\r" not in text


def test_sweep_svg_written(tmp_path):
    table = SweepTable(n=5, tasks=100, seed=0, rows=((1, 0.4, 0.05), (2, 0.6, 0.04)))
    path = tmp_path / "sweep.svg"
    table.to_svg(path)
    content = path.read_text()
    assert content.startswith("<svg")
    assert "polyline" in content


# report json ---------------------------------------------------------------------


def test_report_json_stable_bytes(tiny_shapes, tmp_path):
    report = evaluate(OraclePredictor(), tiny_shapes, n=3, k=2, tasks=10, seed=13,
                      dataset_id="tiny", model_id="m1")
    write_report_json(report, tmp_path / "a.json")
    write_report_json(report, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    import json
    payload = json.loads((tmp_path / "a.json").read_text())
    assert list(payload) == ["dataset", "n", "k", "tasks", "mean_acc", "std_err", "seed", "model_id", "predictor"]
