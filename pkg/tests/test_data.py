import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manas.data import (Dataset, SyntheticRule, Vocab, build_sequences, default_rule, file_digest,
                        generate_synthetic, load_interactions, make_dataset, synthetic_dataset, write_interactions)
from manas.evaluation import evaluate


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_tab_file_counts_and_sorting(tmp_path):
    p = write(tmp_path, "a.tsv", "u2\ti9\t5\t30\nu1\ti3\t4\t20\nu1\ti9\t3\t10\nu2\ti3\t1\t5\n")
    t = load_interactions(p)
    assert t.stats() == {"users": 2, "items": 2, "interactions": 4, "density": 1.0, "skipped_rows": 0}
    seqs = t.user_sequences()
    v = t.vocab
    assert [v.decode_item(i) for i in seqs[v.encode_user("u1")]] == ["i9", "i3"]
    assert [v.decode_item(i) for i in seqs[v.encode_user("u2")]] == ["i3", "i9"]


def test_load_comma_header_malformed_and_duplicates(tmp_path):
    p = write(tmp_path, "b.csv", "user,item,rating,timestamp\n1,10,5,1\n1,10,5,1\n1,11,x,2\nbroken\n2,10,,3\n")
    t = load_interactions(p)
    assert len(t) == 2
    assert t.skipped == 2
    assert t.stats()["density"] == pytest.approx(2 / (2 * 1))


def test_load_empty_file_errors(tmp_path):
    with pytest.raises(ValueError):
        load_interactions(write(tmp_path, "e.tsv", "\n \n"))


def test_loading_twice_gives_identical_ids(tmp_path):
    rng = np.random.default_rng(0)
    lines = "".join(f"u{rng.integers(50)}\t{rng.integers(300)}\t1\t{t}\n" for t in range(400))
    p = write(tmp_path, "c.tsv", lines)
    a, b = load_interactions(p), load_interactions(p)
    assert a.vocab.items == b.vocab.items and np.array_equal(a.items, b.items)
    assert a.vocab.items[:3] == sorted(a.vocab.items, key=int)[:3]


def test_density_formula_on_published_counts():
    # 198,502 interactions over 22,363 users and 12,101 items
    assert 198502 / (22363 * 12101) * 100 == pytest.approx(0.073, abs=5e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=6).filter(lambda s: s.strip() == s and "\t" not in s),
                min_size=1, max_size=20, unique=True))
def test_vocab_round_trip(raw):
    v = Vocab.from_raw(raw, raw)
    for x in raw:
        assert v.decode_item(v.encode_item(x)) == x
        assert v.decode_user(v.encode_user(x)) == x


def test_write_and_reload_table(tmp_path):
    t = generate_synthetic(default_rule(), 30, 200, 8, seed=1)
    write_interactions(t, tmp_path / "t.tsv")
    again = load_interactions(tmp_path / "t.tsv")
    raw = lambda tab: [(tab.vocab.decode_user(i.user), tab.vocab.decode_item(i.item), i.timestamp) for i in tab]  # noqa: E731
    assert raw(again) == raw(t)


def toy_table(tmp_path, seqs):
    lines = "".join(f"{u}\t{it}\t1\t{ts}\n" for u, s in seqs.items() for ts, it in enumerate(s))
    return load_interactions(write(tmp_path, "toy.tsv", lines))


def test_window_arithmetic(tmp_path):
    t = toy_table(tmp_path, {"1": ["a", "b", "c", "d", "e", "f"]})
    sp = build_sequences(t, 4)
    dec = t.vocab.decode_item
    assert len(sp.train) == 0  # with six items the last two are held out and no earlier target has 4 history
    assert [dec(i) for i in sp.valid.histories[0]] == ["a", "b", "c", "d"] and dec(sp.valid.targets[0]) == "e"
    assert [dec(i) for i in sp.test.histories[0]] == ["b", "c", "d", "e"] and dec(sp.test.targets[0]) == "f"
    sp2 = build_sequences(t, 2)
    assert [dec(i) for i in sp2.train.targets] == ["c", "d"]


def test_too_long_history_gives_empty_output(tmp_path, caplog):
    t = toy_table(tmp_path, {"1": list("abcdef")})
    sp = build_sequences(t, 9)
    assert len(sp.train) == len(sp.valid) == len(sp.test) == 0
    assert "nothing to build" in caplog.text


def test_no_time_leakage():
    d = synthetic_dataset(users=200, seed=2)
    table = generate_synthetic(default_rule(), 200, 200, 20, seed=2)
    sp = build_sequences(table, 4)
    for part in (sp.train, sp.valid, sp.test):
        assert (part.history_last_ts < part.target_ts).all()
    assert len(d.train) == len(sp.train)


def test_sweep_lengths_share_users():
    table = generate_synthetic(default_rule(), 300, 200, 20, seed=3)
    users = [frozenset(build_sequences(table, n, min_history=10).valid.users.tolist()) for n in (2, 4, 6, 8, 10)]
    assert len(set(users)) == 1 and len(users[0]) == 300


def test_synthetic_reproducible():
    a = generate_synthetic(default_rule(), 50, 200, 15, seed=9)
    b = generate_synthetic(default_rule(), 50, 200, 15, seed=9)
    c = generate_synthetic(default_rule(), 50, 200, 15, seed=10)
    assert np.array_equal(a.items, b.items) and not np.array_equal(a.items, c.items)


def test_rule_is_exact_at_zero_noise():
    rule = default_rule(noise=0.0)
    table = generate_synthetic(rule, 200, 200, 20, seed=4)
    cls = rule.class_of(200)
    for seq in table.user_sequences().values():
        for t in range(rule.window, len(seq)):
            assert cls[seq[t]] == rule.target_class(cls[seq[t - rule.window:t]])


def test_rule_validation():
    rule = default_rule()
    with pytest.raises(ValueError):
        SyntheticRule(rule.classes, rule.atoms, rule.premise, 1, 3, noise=1.5)
    with pytest.raises(ValueError):
        SyntheticRule([[0, 1], [1, 2]], (0, 1), rule.premise, 0, 1)
    with pytest.raises(ValueError):
        SyntheticRule([[0], []], (0, 1), rule.premise, 0, 1)
    with pytest.raises(ValueError):
        generate_synthetic(default_rule(300), 10, 200, 10)
    assert SyntheticRule.from_dict(rule.to_dict()) == rule


def hypergeom_cdf(k, pool, good, draws):
    total = math.comb(pool, draws)
    return sum(math.comb(good, j) * math.comb(pool - good, draws - j) for j in range(k + 1)) / total


def test_oracle_meets_exact_hit_bound_at_zero_noise():
    d = synthetic_dataset(users=400, noise=0.0, seed=5)
    rule = d.rule
    cls = rule.class_of(d.num_items)

    def oracle(h, c, rng):
        target = np.array([rule.target_class(cls[x]) for x in h])
        return (cls[c] == target[:, None]).astype(float)

    rep = evaluate(oracle, d.test)
    # the positive is in the top 10 whenever at most 9 same-class items were drawn as negatives
    bounds = []
    for u, pos in zip(d.test.users, d.test.positives):
        seen = d.user_items[int(u)] | {int(pos)}
        pool = d.num_items - len(seen)
        good = sum(1 for i in rule.classes[cls[pos]] if i not in seen)
        bounds.append(hypergeom_cdf(9, pool, good, 99))
    bound = float(np.mean(bounds))
    assert rep.metrics["HR@10"] >= bound - 3 * math.sqrt(bound * (1 - bound) / len(bounds))
    assert bound > 0.5


def test_full_noise_removes_signal():
    d = synthetic_dataset(users=2000, noise=1.0, seed=6)
    rule = d.rule
    cls = rule.class_of(d.num_items)

    def oracle(h, c, rng):
        target = np.array([rule.target_class(cls[x]) for x in h])
        return (cls[c] == target[:, None]).astype(float) + 1e-9 * rng.random(c.shape)

    rep = evaluate(oracle, d.test, rng=np.random.default_rng(0))
    assert abs(rep.metrics["HR@10"] - 0.1) <= 3 * math.sqrt(0.09 / len(d.test))


def test_bundle_round_trip(tmp_path):
    d = synthetic_dataset(users=60, seed=7)
    p = d.save(tmp_path / "b.json")
    e = Dataset.load(p)
    assert np.array_equal(e.valid.candidates, d.valid.candidates)
    assert np.array_equal(e.train.histories, d.train.histories)
    assert e.rule == d.rule and e.user_items == d.user_items
    p2 = e.save(tmp_path / "c.json")
    assert file_digest(p) == file_digest(p2)


def test_make_dataset_candidates_avoid_history(tmp_path):
    d = synthetic_dataset(users=100, seed=8)
    for es in (d.valid, d.test):
        for u, row in zip(es.users, es.candidates):
            assert len(set(row.tolist())) == 100
            assert not set(row[1:].tolist()) & d.user_items[int(u)]
    table = generate_synthetic(default_rule(), 100, 200, 20, seed=8)
    again = make_dataset(table, 4, seed=8)
    assert np.array_equal(again.test.candidates, d.test.candidates)


def test_gated_rule_switches_reference_position():
    rule = default_rule(noise=0.0, gated=True)
    holds, fails = [2, 9, 9, 9], [5, 6, 7, 8]  # class 2 present; no class 0 or 2
    assert rule.holds(holds) and not rule.holds(fails)
    assert rule.target_class(holds) == (9 + 1) % 10
    assert rule.target_class(fails) == (5 + 3) % 10
    assert default_rule(noise=0.0).target_class(fails) == (8 + 3) % 10
    assert "first+3" in rule.describe()
    assert SyntheticRule.from_dict(rule.to_dict()) == rule
    with pytest.raises(ValueError):
        SyntheticRule(rule.classes, rule.atoms, rule.premise, 1, 3, gated=True)
    table = generate_synthetic(rule, 100, 200, 20, seed=4)
    cls = rule.class_of(200)
    for seq in table.user_sequences().values():
        for t in range(rule.window, len(seq)):
            assert cls[seq[t]] == rule.target_class(cls[seq[t - rule.window:t]])
