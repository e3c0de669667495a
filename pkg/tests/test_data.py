from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import adjusted_rand_score

from htcl.config import SPURIOUS_DEFAULT
from htcl.data import (Dataset, DividingPattern, SyntheticSpec, generate_spurious, generate_toy,
                       load_dataset, load_labels, load_matrix, load_pattern, save_dataset,
                       save_labels, save_matrix, save_pattern, stratified_batches)
from htcl.errors import ContractError, DataError


def small(**kw):
    base = dict(n_per_class_per_env=20)
    base.update(kw)
    return SyntheticSpec(**base)


def test_dataset_rejects_missing_domain():
    with pytest.raises(ContractError):
        Dataset(np.zeros((3, 2)), [0, 1, 0], [0, 0, 0], 2, 2)


def test_dataset_rejects_missing_class_unless_allowed():
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 2)), [0, 0], [0, 1], 2, 2)
    Dataset(np.zeros((2, 2)), [0, 0], [0, 1], 2, 2, allow_missing_classes=True)


def test_dataset_rejects_nonfinite_features():
    with pytest.raises(ContractError):
        Dataset(np.array([[np.nan], [0.0]]), [0, 1], [0, 0], 2, 1)


def test_pattern_rejects_out_of_range():
    with pytest.raises(ContractError):
        DividingPattern(np.array([0, 2]), 2)


def test_spec_validation():
    with pytest.raises(ContractError):
        generate_toy(small(noise_std=0.0))
    with pytest.raises(ContractError):
        generate_toy(small(label_noise=1.5))
    with pytest.raises(ContractError):
        generate_spurious(small(num_latent_envs=1, correlation=(0.9,)))


def test_toy_shape_and_determinism():
    a, b = generate_toy(small(seed=3)), generate_toy(small(seed=3))
    assert a.n == 2 * 2 * 20 and a.dim == 10
    assert a.equals(b)
    assert not a.equals(generate_toy(small(seed=4)))


def test_aligned_mode_has_ari_one():
    d = generate_toy(small(initial_pattern_mode="aligned"))
    assert adjusted_rand_score(d.domain_labels, d.latent_groups) == 1.0


def test_mixed_mode_balances_latent_envs():
    d = generate_toy(small(n_per_class_per_env=51))
    for dom in range(2):
        members = d.latent_groups[d.domain_labels == dom]
        counts = np.bincount(members, minlength=2)
        assert abs(counts[0] - counts[1]) <= 2


def test_mixed_mode_chi_square_on_1000_samples():
    d = generate_toy(SyntheticSpec(n_per_class_per_env=250, seed=11))
    table = np.zeros((2, 2))
    np.add.at(table, (d.domain_labels, d.latent_groups), 1)
    expected = np.full((2, 2), d.n / 4)
    stat = ((table - expected) ** 2 / expected).sum()
    assert stat < chi2.ppf(0.999, df=1)


def test_random_mode_covers_every_domain():
    d = generate_toy(small(initial_pattern_mode="random", num_latent_envs=3))
    assert set(np.unique(d.domain_labels)) == {0, 1, 2}


def test_zero_noise_variant_distances():
    d = generate_toy(small(noise_std=1e-9, env_center_scale=10.0))
    var = d.features[:, 5:]
    g = d.latent_groups
    within = np.linalg.norm(var[g == 0][:, None] - var[g == 0][None], axis=2).max()
    across = np.linalg.norm(var[g == 0][0] - var[g == 1][0])
    centers = np.array([var[g == e].mean(axis=0) for e in (0, 1)])
    assert within < 1e-6
    assert across == pytest.approx(np.linalg.norm(centers[0] - centers[1]), rel=1e-6)


def test_spurious_perfect_correlation_is_separable():
    data = generate_spurious(replace(SPURIOUS_DEFAULT, correlation=(1.0, 1.0), label_noise=0.0))
    var = data.train.features[:, 5:]
    probe = LogisticRegression().fit(var, data.train.class_labels)
    assert probe.score(var, data.train.class_labels) == 1.0


def test_spurious_variant_probe_reverses_on_test():
    data = generate_spurious(SyntheticSpec(n_per_class_per_env=500, label_noise=0.25,
                                           env_center_scale=0.0, color_scale=3.0))
    probe = LogisticRegression().fit(data.train.features[:, 5:], data.train.class_labels)
    test_acc = probe.score(data.test.features[:, 5:], data.test.class_labels)
    # color is keyed to the observed label, so the label-noise correction is zero
    assert test_acc == pytest.approx(0.10, abs=0.04)


def test_spurious_invariant_ceiling_is_label_noise():
    data = generate_spurious(SyntheticSpec(n_per_class_per_env=1000, label_noise=0.25))
    inv = data.train.features[:, :5]
    probe = LogisticRegression().fit(inv, data.train.class_labels)
    acc = probe.score(data.test.features[:, :5], data.test.class_labels)
    assert acc == pytest.approx(0.75, abs=0.03)


def test_spurious_combined_puts_test_last():
    data = generate_spurious(small())
    both = data.combined()
    assert both.num_domains == 3
    assert np.all(both.domain_labels[-data.test.n:] == 2)


def test_dataset_round_trip(tmp_path):
    d = generate_toy(small())
    save_dataset(d, tmp_path / "d.csv")
    assert load_dataset(tmp_path / "d.csv").equals(d)
    raw = (tmp_path / "d.csv").read_bytes()
    assert b"\r\n" not in raw


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=4, max_size=4))
def test_dataset_round_trip_arbitrary_floats(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    d = Dataset(np.array(values).reshape(2, 2), [0, 1], [0, 0], 2, 1)
    save_dataset(d, path)
    assert load_dataset(path).equals(d)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("f0,class,domain\n", 2),
    ("f0,class,domain\n1.0,0,0\n2.0,1\n", 3),
    ("f0,class,domain\n1.0,0,0\nabc,1,0\n", 3),
    ("f0,class,domain\n1.0,0,-1\n", 2),
    ("x,class,domain\n1.0,0,0\n", 1),
])
def test_load_dataset_errors_name_the_line(tmp_path, text, line):
    with pytest.raises(DataError, match=f"line {line}"):
        load_dataset(_write(tmp_path / "bad.csv", text))


def test_load_dataset_rejects_noncontiguous_labels(tmp_path):
    with pytest.raises(DataError, match="contiguous"):
        load_dataset(_write(tmp_path / "bad.csv", "f0,class,domain\n1,0,0\n2,2,0\n"))


def test_load_dataset_rejects_domain_above_declared(tmp_path):
    with pytest.raises(DataError, match="line 3"):
        load_dataset(_write(tmp_path / "bad.csv", "f0,class,domain\n1,0,0\n2,1,2\n"), num_domains=2)


def test_load_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.csv")


def test_pattern_round_trip_and_errors(tmp_path):
    p = DividingPattern(np.array([1, 0, 2, 1]), 3)
    save_pattern(p, tmp_path / "p.csv")
    assert load_pattern(tmp_path / "p.csv", 4) == p
    with pytest.raises(DataError):
        load_pattern(tmp_path / "p.csv", 5)
    with pytest.raises(DataError, match="out of range"):
        load_pattern(tmp_path / "p.csv", 3)
    _write(tmp_path / "dup.csv", "index,domain\n0,0\n0,1\n")
    with pytest.raises(DataError, match="duplicate"):
        load_pattern(tmp_path / "dup.csv", 2)


def test_matrix_and_label_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 3)) * 1e-7
    save_matrix(m, tmp_path / "m.csv")
    np.testing.assert_array_equal(load_matrix(tmp_path / "m.csv"), m)
    save_labels([1, 0, 1], tmp_path / "y.csv")
    np.testing.assert_array_equal(load_labels(tmp_path / "y.csv", 3), [1, 0, 1])


def test_batches_cover_every_cell_and_every_sample_once():
    d = generate_toy(SyntheticSpec(n_per_class_per_env=64, initial_pattern_mode="aligned"))
    p = DividingPattern.of(d)
    batches = stratified_batches(d, p, 32, seed=0)
    joined = np.concatenate(batches)
    assert np.array_equal(np.sort(joined), np.arange(d.n))
    for b in batches:
        cells = set(zip(d.class_labels[b].tolist(), p.assignment[b].tolist()))
        assert len(cells) == 4


def test_batches_deterministic_per_seed():
    d = generate_toy(small())
    p = DividingPattern.of(d)
    a = stratified_batches(d, p, 16, seed=5)
    b = stratified_batches(d, p, 16, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_batches_reject_small_batch():
    d = generate_toy(small())
    with pytest.raises(ContractError):
        stratified_batches(d, DividingPattern.of(d), 3, 0)


def test_singleton_domain_sample_appears_once():
    d = generate_toy(small())
    assignment = np.zeros(d.n, dtype=np.int64)
    assignment[7] = 1
    batches = stratified_batches(d, DividingPattern(assignment, 2), 8, 0)
    assert sum(int(np.sum(b == 7)) for b in batches) == 1
