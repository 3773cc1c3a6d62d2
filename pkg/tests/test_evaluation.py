import csv
import json
import math

import numpy as np
import pytest

from manas.evaluation import (EvalSet, batch_metrics, build_eval_set, evaluate, hit_at_k, leave_one_out_split,
                              metric_columns, ndcg_at_k, rank_of_positive, sample_negatives, write_csv,
                              write_json)


def test_hit_ratio_cases():
    assert hit_at_k(1, 10) == 1
    assert hit_at_k(10, 10) == 1
    assert hit_at_k(11, 10) == 0
    with pytest.raises(ValueError):
        hit_at_k(0, 10)


def test_ndcg_cases():
    assert ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(3, 10) == 0.5
    assert ndcg_at_k(11, 10) == 0.0
    assert ndcg_at_k(2, 10) == pytest.approx(1 / math.log2(3))


def test_batch_metrics_agree_with_scalar_versions():
    ranks = np.arange(1, 101)
    m = batch_metrics(ranks)
    for r in ranks:
        for k in (5, 10):
            assert m[f"HR@{k}"][r - 1] == hit_at_k(r, k)
            assert m[f"N@{k}"][r - 1] == pytest.approx(ndcg_at_k(r, k), abs=1e-15)
            assert m[f"N@{k}"][r - 1] <= m[f"HR@{k}"][r - 1]


def test_rank_ties_break_by_item_id():
    cands = np.array([[7, 3, 9, 12]])
    scores = np.array([[0.5, 0.5, 0.5, 0.9]])
    # item 12 scores higher, item 3 ties with a lower id; item 9 ties with a higher id
    assert rank_of_positive(scores, cands)[0] == 3


def test_rank_invariant_to_negative_order():
    rng = np.random.default_rng(0)
    cands = np.concatenate([[[500]], rng.choice(400, size=(1, 99), replace=False)], axis=1)
    scores = np.round(rng.normal(size=(1, 100)), 1)  # coarse rounding creates ties
    base = rank_of_positive(scores, cands)[0]
    for _ in range(20):
        perm = np.concatenate([[0], 1 + rng.permutation(99)])
        assert rank_of_positive(scores[:, perm], cands[:, perm])[0] == base


def test_leave_one_out_boundaries():
    split = leave_one_out_split({0: [1, 2, 3, 4, 5, 6], 1: [1, 2, 3, 4, 5]}, 4)
    assert split.test[0] == ([2, 3, 4, 5], 6)
    assert split.valid[0] == ([1, 2, 3, 4], 5)
    assert split.train[0] == [1, 2, 3, 4]
    assert split.excluded == [1]
    again = leave_one_out_split({0: [1, 2, 3, 4, 5, 6], 1: [1, 2, 3, 4, 5]}, 4)
    assert again == split


def test_negatives_exclude_interactions():
    rng = np.random.default_rng(1)
    seen = set(range(0, 150, 3))
    neg = sample_negatives(7, seen, 400, rng)
    assert len(neg) == 99 == len(set(neg.tolist()))
    assert not (set(neg.tolist()) & (seen | {7}))
    tight = sample_negatives(0, set(range(1, 50)), 150, rng)
    assert not (set(tight.tolist()) & set(range(50)))
    with pytest.raises(ValueError):
        sample_negatives(0, set(range(60)), 150, rng)


def small_eval_set(users=2000, seed=3):
    rng = np.random.default_rng(seed)
    hist = rng.integers(0, 300, size=(users, 4))
    pos = rng.integers(0, 300, size=users)
    inter = {u: set(hist[u].tolist()) | {int(pos[u])} for u in range(users)}
    return build_eval_set(np.arange(users), hist, pos, inter, 300, seed)


def test_build_eval_set_reproducible_and_round_trips():
    a, b = small_eval_set(50), small_eval_set(50)
    assert np.array_equal(a.candidates, b.candidates)
    assert a.candidates.shape == (50, 100)
    c = EvalSet.from_dict(json.loads(json.dumps(a.to_dict())))
    assert np.array_equal(c.candidates, a.candidates) and c.seed == a.seed


def test_oracle_scores_all_ones():
    es = small_eval_set(100)

    def oracle(h, c, rng):
        return (c == c[:, :1]).astype(float)

    rep = evaluate(oracle, es)
    assert all(rep.metrics[c] == 1.0 for c in metric_columns())


def test_random_scorer_hits_ten_percent():
    es = small_eval_set(2000)
    rep = evaluate(lambda h, c, rng: rng.random(c.shape), es, rng=np.random.default_rng(0))
    sigma = math.sqrt(0.1 * 0.9 / 2000)
    assert abs(rep.metrics["HR@10"] - 0.1) <= 3 * sigma
    assert rep.metrics["N@10"] <= rep.metrics["HR@10"]


def test_multi20_statistics():
    es = small_eval_set(300)
    rep = evaluate(lambda h, c, rng: rng.random(c.shape), es, mode="multi20", rng=np.random.default_rng(2))
    for col in metric_columns():
        runs = rep.per_run[col]
        assert len(runs) == 20
        st = rep.stats[col]
        assert st["min"] <= st["avg"] <= st["max"]
        mean = sum(runs) / 20
        assert st["std"] == pytest.approx(math.sqrt(sum((r - mean) ** 2 for r in runs) / 20), abs=1e-15)
        assert st["std"] > 0


def test_multi20_deterministic_scorer_has_zero_std():
    es = small_eval_set(300)
    rep = evaluate(lambda h, c, rng: -c.astype(float), es, mode="multi20")
    assert all(rep.stats[c]["std"] == 0.0 for c in metric_columns())


def test_evaluate_errors():
    es = small_eval_set(10)
    with pytest.raises(ValueError):
        evaluate(lambda h, c, r: c, es.subset(np.arange(0)))
    with pytest.raises(ValueError):
        evaluate(lambda h, c, r: c, es, mode="multi7")


def test_report_outputs(tmp_path):
    es = small_eval_set(30)
    rep = evaluate(lambda h, c, rng: rng.random(c.shape), es, mode="multi20")
    row = rep.row({"model": "x"})
    write_csv(tmp_path / "r.csv", [row])
    write_json(tmp_path / "r.json", {"stats": rep.stats, "arr": np.arange(3)})
    header = next(csv.reader(open(tmp_path / "r.csv")))
    assert header[:5] == ["model", "N@5", "N@10", "HR@5", "HR@10"]
    assert "HR@10_std" in header
    assert json.loads((tmp_path / "r.json").read_text())["arr"] == [0, 1, 2]
