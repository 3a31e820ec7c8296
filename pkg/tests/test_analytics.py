import polars as pl

from guided_dml.analytics.main import best_configurations, configure_duckdb, recall_by_k


def _results():
    rows = []
    for model, view, dim, k, accuracy in [
        ("student", "SUR", 16, 1, 0.70),
        ("student", "SUR", 16, 1000, 0.80),
        ("student", "SUR", 128, 1000, 0.80),
        ("student", "SUR", 128, 5, 0.80),
        ("triplet", "SUR", 16, 1, 0.60),
        ("student", "SEC", 16, 7, 0.55),
        ("student", "SEC", 128, 7, 0.65),
    ]:
        rows.append(
            {
                "model": model,
                "view": view,
                "embedding_dim": dim,
                "k": k,
                "n_seeds": 3,
                "accuracy": accuracy,
                "accuracy_ci95": 0.01,
                "precision": accuracy,
                "precision_ci95": 0.01,
                "recall": accuracy,
                "recall_ci95": 0.01,
                "f1": accuracy,
                "f1_ci95": 0.01,
            }
        )
    return pl.DataFrame(rows)


def test_configure_duckdb():
    con = configure_duckdb()
    assert con.execute("SELECT 42").fetchone() == (42,)


def test_best_configuration_per_model_and_view():
    best = best_configurations(_results())

    assert best.select(["model", "view", "embedding_dim", "k"]).rows() == [
        ("student", "SEC", 128, 7),
        ("student", "SUR", 128, 5),
        ("triplet", "SUR", 16, 1),
    ]


def test_recall_by_k_filters_view():
    recall = recall_by_k(_results(), "SUR")

    assert recall.columns == ["embedding_dim", "k", "recall", "recall_ci95"]
    assert recall.height == 5
    assert recall.select(["embedding_dim", "k"]).rows()[:2] == [(16, 1), (16, 1)]
