import duckdb
import polars as pl

BEST_CONFIGURATION_QUERY = """
SELECT model, view, embedding_dim, k, n_seeds,
       accuracy, accuracy_ci95, precision, precision_ci95,
       recall, recall_ci95, f1, f1_ci95
FROM (
    SELECT *,
           ROW_NUMBER() OVER (
               PARTITION BY model, view
               ORDER BY accuracy DESC, k ASC, embedding_dim ASC
           ) AS rank
    FROM results
)
WHERE rank = 1
ORDER BY view, model
"""

RECALL_BY_K_QUERY = """
SELECT embedding_dim, k, recall, recall_ci95
FROM results
WHERE view = ?
ORDER BY embedding_dim, k
"""


def configure_duckdb() -> duckdb.DuckDBPyConnection:
    return duckdb.connect(database=":memory:")


def best_configurations(results: pl.DataFrame) -> pl.DataFrame:
    """Best (embedding_dim, k) per model and view by accuracy; ties go to the smaller k, then dim."""
    con = configure_duckdb()
    con.register("results", results.to_arrow())
    return con.execute(BEST_CONFIGURATION_QUERY).pl()


def recall_by_k(results: pl.DataFrame, view: str) -> pl.DataFrame:
    con = configure_duckdb()
    con.register("results", results.to_arrow())
    return con.execute(RECALL_BY_K_QUERY, [view]).pl()
