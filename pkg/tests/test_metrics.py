import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftlab.grammar import decode_text
from driftlab.metrics import (
    EvalReport,
    EvalRow,
    average_ranks,
    grid_select,
    intdiv,
    mae_slope,
    scaffold_div,
    spearman,
    summarize,
    tanimoto_matrix,
    vun,
    vun_from_flags,
)
from driftlab.molecule import MoleculeGraph, canonical_hash, scaffold_hash
from helpers import oracle_intdiv, oracle_mae_slope, oracle_spearman

# -- examples ----------------------------------------------------------------------------


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(oracle_spearman([1, 2, 2, 3], [1, 3, 2, 4]), abs=1e-12)
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0


def test_average_ranks_ties():
    assert average_ranks([3, 1, 3, 2]).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_mae_slope_examples():
    assert mae_slope([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    assert mae_slope([0, 2, 4], [0, 1, 2])[1] == 0.5
    mae, slope = mae_slope([0, 1], [0.2, 0.4])
    # |0.2 - 0| and |0.4 - 1| average to 0.4
    assert mae == pytest.approx(0.4, abs=1e-15) and slope == pytest.approx(0.2, abs=1e-15)
    assert math.isnan(mae_slope([2, 2], [1, 3])[1])


def test_intdiv_examples():
    a = np.array([1, 1, 0, 0, 1], dtype=bool)
    assert intdiv(np.stack([a, a])) == 0.0
    assert intdiv(np.array([[1, 1, 0, 0], [0, 0, 1, 1]], dtype=bool)) == 1.0
    assert intdiv(np.array([[1, 1, 1, 0], [0, 1, 1, 1]], dtype=bool)) == 0.5
    assert math.isnan(intdiv(a[None, :]))


def test_tanimoto_of_empty_prints_is_one():
    assert tanimoto_matrix(np.zeros((2, 3), dtype=bool)).tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_scaffold_div_examples():
    chains = [decode_text("[C]" * k) for k in range(1, 5)]
    assert scaffold_div(chains) == 1 / 4
    rings = [decode_text("[C]" * k + "[Ring1]" + f"[{k - 2}]") for k in range(3, 7)]
    assert scaffold_div(rings) == 1.0
    assert math.isnan(scaffold_div([]))


def test_vun_examples():
    g = decode_text("[C][O]")
    train = {canonical_hash(g)}
    out = vun([g] * 4, set())
    assert (out.validity, out.uniqueness, out.novelty) == (100.0, 25.0, 100.0)
    assert vun([g] * 4, train).novelty == 0.0
    empty = vun([MoleculeGraph()] * 3, train)
    assert empty.validity == 0.0 and empty.degenerate


def test_vun_denominators_are_valid_molecules():
    flags = [True, True, False, False]
    out = vun_from_flags(flags, [1, 2, 3, 3], {2})
    assert (out.validity, out.uniqueness, out.novelty, out.n_valid) == (50.0, 100.0, 50.0, 2)


# -- oracle agreement on random inputs ---------------------------------------------------


@pytest.mark.parametrize("seed", range(200))
def test_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    # small integer pools create many ties
    t = rng.integers(0, 6, size=n).astype(float) if seed % 2 else rng.normal(size=n)
    a = rng.integers(0, 6, size=n).astype(float) if seed % 3 else rng.normal(size=n)
    assert abs(spearman(t, a) - oracle_spearman(t, a)) <= 1e-10
    mae, slope = mae_slope(t, a)
    o_mae, o_slope = oracle_mae_slope(t, a)
    assert abs(mae - o_mae) <= 1e-10
    assert (math.isnan(slope) and math.isnan(o_slope)) or abs(slope - o_slope) <= 1e-10
    fps = rng.random((int(rng.integers(2, 12)), 16)) < rng.uniform(0.05, 0.6)
    assert abs(intdiv(fps) - oracle_intdiv(fps)) <= 1e-10
    scaffolds = rng.integers(0, 5, size=n).tolist()
    assert abs(scaffold_div([], scaffolds) - len(set(scaffolds)) / n) <= 1e-10


def test_scaffold_div_mixed_batch_matches_set_count():
    rng = np.random.default_rng(0)
    from driftlab.grammar import ALPHABET, decode

    graphs = [decode([ALPHABET[i] for i in rng.integers(0, len(ALPHABET), 20)]) for _ in range(60)]
    assert scaffold_div(graphs) == len({scaffold_hash(g) for g in graphs}) / 60


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=40))
def test_spearman_is_bounded_and_symmetric(pairs):
    t, a = zip(*pairs)
    rho = spearman(t, a)
    assert -1.0 <= rho <= 1.0
    assert rho == pytest.approx(spearman(a, t), abs=1e-12)


# -- selection and reports ----------------------------------------------------------------


def row(alpha, rho, v=100.0, u=50.0, n=100.0):
    return EvalRow(alpha, v, u, n, rho, 0.1, 0.5, 0.7, 0.3, 100)


def test_grid_select_prefers_feasible():
    rows = [row(1.0, 0.2), row(1.5, 0.9, u=5.0), row(2.0, 0.4)]
    assert grid_select(rows) == (2, True)


def test_grid_select_ties_go_to_smaller_alpha():
    assert grid_select([row(1.0, 0.4), row(2.0, 0.4)]) == (0, True)


def test_grid_select_falls_back_when_nothing_is_feasible():
    rows = [row(1.0, 0.2, v=50.0), row(2.0, 0.6, n=10.0), row(3.0, math.nan, v=0.0)]
    assert grid_select(rows) == (1, False)
    with pytest.raises(ValueError):
        grid_select([])


def test_report_text_round_trip():
    report = EvalReport("coupled-default", 42, "scalar-binned", [row(1.0, 0.25), row(2.0, 1 / 3, u=5.0)])
    text = report.to_text()
    back = EvalReport.from_text(text)
    assert back.to_text() == text
    assert back.selected == 0 and back.feasible
    assert "selected_alpha = 1.0" in text


def test_summarize():
    assert summarize([1.0, 2.0, 3.0]) == (2.0, 1.0)
    assert summarize([4.0]) == (4.0, 0.0)
