import hashlib
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import cross_val_score

from vdpg.data import (
    HEADER_SIZE,
    ConfigError,
    DomainPool,
    DomainTransform,
    EmbeddingDataset,
    EmbeddingRecord,
    FormatError,
    GenerativeParams,
    SyntheticConfig,
    bayes_oracle,
    build_contrastive_batch,
    concat_datasets,
    domain_probabilities,
    import_manifest,
    oracle_accuracy,
    read_dataset,
    sample_episode,
    synth_generate,
    write_dataset,
)
from conftest import random_dataset


def assert_same(a: EmbeddingDataset, b: EmbeddingDataset):
    assert a.task == b.task and a.num_classes == b.num_classes
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.domain_ids, b.domain_ids)
    np.testing.assert_array_equal(a.labels, b.labels)


class TestBinaryFormat:
    def test_header_is_32_bytes(self):
        assert HEADER_SIZE == 32

    def test_empty_dataset_is_header_only(self, tmp_path):
        ds = EmbeddingDataset.empty(l=2, d=3, num_classes=4)
        write_dataset(ds, tmp_path / "e.vdpg")
        assert (tmp_path / "e.vdpg").stat().st_size == HEADER_SIZE
        header, back = read_dataset(tmp_path / "e.vdpg")
        assert header.num_records == 0 and len(back) == 0 and back.l == 2 and back.d == 3

    def test_single_record_byte_count(self, tmp_path):
        ds = EmbeddingDataset(np.arange(6.0).reshape(1, 2, 3), [5], [2], num_classes=4)
        write_dataset(ds, tmp_path / "one.vdpg")
        assert (tmp_path / "one.vdpg").stat().st_size == HEADER_SIZE + 4 + 8 + 2 * 3 * 8

    def test_record_layout_is_little_endian(self, tmp_path):
        ds = EmbeddingDataset(np.arange(6.0).reshape(1, 2, 3), [5], [2], num_classes=4)
        write_dataset(ds, tmp_path / "one.vdpg")
        raw = (tmp_path / "one.vdpg").read_bytes()[HEADER_SIZE:]
        assert raw[:4] == (5).to_bytes(4, "little")
        assert raw[4:12] == (2).to_bytes(8, "little", signed=True)
        np.testing.assert_array_equal(np.frombuffer(raw[12:], "<f8"), np.arange(6.0))

    def test_thousand_records_round_trip(self, tmp_path, rng):
        ds = random_dataset(rng, n=1000, l=3, d=5, domains=(0, 1, 7))
        write_dataset(ds, tmp_path / "a.vdpg")
        _, back = read_dataset(tmp_path / "a.vdpg")
        assert_same(ds, back)
        write_dataset(back, tmp_path / "b.vdpg")
        assert (tmp_path / "a.vdpg").read_bytes() == (tmp_path / "b.vdpg").read_bytes()

    def test_regression_round_trip(self, tmp_path, rng):
        ds = random_dataset(rng, n=50, task="regression")
        write_dataset(ds, tmp_path / "r.vdpg")
        header, back = read_dataset(tmp_path / "r.vdpg")
        assert header.task == "regression" and header.num_classes == 0
        assert_same(ds, back)

    def test_f32_storage(self, tmp_path, rng):
        ds = random_dataset(rng, n=10)
        write_dataset(ds, tmp_path / "f.vdpg", storage="f32")
        header, back = read_dataset(tmp_path / "f.vdpg")
        assert header.storage == "f32"
        np.testing.assert_array_equal(back.tokens, ds.tokens.astype(np.float32).astype(np.float64))

    @pytest.mark.parametrize("pos", range(HEADER_SIZE))
    def test_every_header_byte_corruption_is_detected(self, tmp_path, pos):
        rng = np.random.default_rng(0)
        path = tmp_path / "c.vdpg"
        write_dataset(random_dataset(rng, n=4), path)
        buf = bytearray(path.read_bytes())
        buf[pos] ^= 0x01
        path.write_bytes(bytes(buf))
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_truncation_reports_offset(self, tmp_path, rng):
        path = tmp_path / "t.vdpg"
        write_dataset(random_dataset(rng, n=4), path)
        buf = path.read_bytes()
        path.write_bytes(buf[:-5])
        with pytest.raises(FormatError) as err:
            read_dataset(path)
        assert err.value.offset == len(buf) - 5

    def test_trailing_bytes_rejected(self, tmp_path, rng):
        path = tmp_path / "t.vdpg"
        write_dataset(random_dataset(rng, n=4), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            read_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.vdpg"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(FormatError) as err:
            read_dataset(path)
        assert err.value.offset == 0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 30), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
    def test_round_trip_property(self, tmp_path_factory, n, l, d, seed):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, n=n, l=l, d=d) if n else EmbeddingDataset.empty(l, d, num_classes=4)
        path = tmp_path_factory.mktemp("rt") / "x.vdpg"
        write_dataset(ds, path)
        assert_same(ds, read_dataset(path)[1])


class TestDatasetInvariants:
    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            EmbeddingDataset(np.zeros((1, 1, 1)), [0], [3], num_classes=3)

    def test_unlabeled_sentinel_allowed(self):
        ds = EmbeddingDataset(np.zeros((1, 1, 1)), [0], [-1], num_classes=3)
        assert not ds[0].is_labeled

    def test_unlabeled_view_has_no_labels(self, rng):
        view = random_dataset(rng).unlabeled_view()
        assert not hasattr(view, "labels")

    def test_concat_and_domain(self, rng):
        a, b = random_dataset(rng, n=5, domains=(0,)), random_dataset(rng, n=7, domains=(3,))
        both = concat_datasets([a, b])
        assert both.domains == [0, 3]
        assert_same(both.domain(3), b)

    def test_from_records(self):
        recs = [EmbeddingRecord(1, 0, np.ones((2, 2))), EmbeddingRecord(2, 1, np.zeros((2, 2)))]
        ds = EmbeddingDataset.from_records(recs, num_classes=2)
        assert ds.domains == [1, 2] and ds[1].label == 1


def test_manifest_import(tmp_path):
    rng = np.random.default_rng(0)
    toks = rng.normal(size=(3, 2, 4)).astype("<f4")
    for i, t in enumerate(toks):
        t.tofile(tmp_path / f"r{i}.bin")
    (tmp_path / "m.txt").write_text(
        "# exported embeddings\nd 4\nl 2\ntask classification\nnum_classes 3\ndtype f32\n"
        "r0.bin 0 1\nr1.bin 0 -1\nr2.bin 4 2   # trailing comment\n"
    )
    ds = import_manifest(tmp_path / "m.txt")
    np.testing.assert_array_equal(ds.tokens, toks.astype(np.float64))
    assert ds.domain_ids.tolist() == [0, 0, 4] and ds.labels.tolist() == [1, -1, 2]


def test_manifest_wrong_size(tmp_path):
    np.zeros(3, "<f4").tofile(tmp_path / "r.bin")
    (tmp_path / "m.txt").write_text("d 4\nl 2\nr.bin 0 0\n")
    with pytest.raises(FormatError):
        import_manifest(tmp_path / "m.txt")


# ---------------------------------------------------------------- synthetic


DEFAULT = SyntheticConfig(seed=0)


@pytest.fixture(scope="module")
def default_bench():
    return synth_generate(DEFAULT)


def test_default_counts(default_bench):
    assert len(default_bench.source) == 6 and len(default_bench.target) == 3
    assert all(len(ds) == 300 for ds in default_bench.source + default_bench.target)
    ids = [ds.domains[0] for ds in default_bench.source + default_bench.target]
    assert ids == list(range(9))


def test_oracle_accuracy_on_every_default_domain(default_bench):
    for ds in default_bench.source + default_bench.target:
        assert oracle_accuracy(default_bench.params, ds) >= 0.95


def test_class_means_separated(default_bench):
    mu = default_bench.params.class_means
    dist = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
    assert dist[np.triu_indices(len(mu), 1)].min() >= DEFAULT.class_separation - 1e-9


def test_domain_transforms_distinct_and_bounded(default_bench):
    tfs = default_bench.params.transforms
    for tf in tfs.values():
        np.testing.assert_allclose(tf.rotation @ tf.rotation.T, np.eye(DEFAULT.d), atol=1e-10)
        angles = np.abs(np.angle(np.linalg.eigvals(tf.rotation)))
        assert angles.max() <= DEFAULT.domain_rotation_angle_max + 1e-9
        lo, hi = DEFAULT.domain_scale_range
        assert lo <= tf.scale <= hi
    shifts = np.stack([tfs[i].shift for i in sorted(tfs)])
    assert len({s.tobytes() for s in shifts}) == len(tfs)


def test_seed_reproducible():
    a, b = synth_generate(SyntheticConfig(seed=3)), synth_generate(SyntheticConfig(seed=3))
    for x, y in zip(a.source + a.target, b.source + b.target):
        assert x.fingerprint() == y.fingerprint()


def test_files_hash_equal_on_seed_repeat(tmp_path):
    digests = []
    for run in range(2):
        ds = synth_generate(SyntheticConfig(seed=5, samples_per_domain=20)).source[0]
        write_dataset(ds, tmp_path / f"{run}.vdpg")
        digests.append(hashlib.sha256((tmp_path / f"{run}.vdpg").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_noiseless_records_identical_within_class():
    bench = synth_generate(SyntheticConfig(token_noise_sigma=0.0, samples_per_domain=20, seed=1))
    ds = bench.source[0]
    for c in range(ds.num_classes):
        toks = ds.tokens[ds.labels == c]
        assert np.all(toks == toks[0][None, 0])
    preds = [bayes_oracle(bench.params, r) for r in ds]
    assert preds == ds.labels.tolist()


def test_no_shift_makes_domains_indistinguishable():
    cfg = SyntheticConfig(domain_rotation_angle_max=0.0, domain_shift_sigma=0.0, domain_scale_range=(1.0, 1.0),
                          samples_per_domain=200, seed=2)
    assert cfg.no_shift
    bench = synth_generate(cfg)
    ds = concat_datasets(bench.source)
    feats = ds.tokens.mean(axis=1)
    means = np.stack([feats[ds.domain_ids == k].mean(axis=0) for k in ds.domains])
    # per-domain means agree to sampling error of a mean over 200 records
    assert np.abs(means - means.mean(axis=0)).max() < 5 * cfg.class_separation / np.sqrt(200)
    acc = cross_val_score(LogisticRegression(max_iter=2000), feats, ds.domain_ids, cv=3).mean()
    chance = 1 / len(bench.source)
    assert abs(acc - chance) < 3 * np.sqrt(chance * (1 - chance) / len(ds)) + 0.03


def test_oracle_tie_breaks_to_lower_index():
    means = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    params = GenerativeParams(means, 1.0)
    params.transforms[0] = DomainTransform(np.eye(2), np.zeros(2), 1.0)
    midpoint = EmbeddingRecord(0, 0, np.zeros((3, 2)))
    assert bayes_oracle(params, midpoint) == 0


def test_oracle_unknown_domain(default_bench):
    with pytest.raises(KeyError):
        bayes_oracle(default_bench.params, EmbeddingRecord(99, 0, np.zeros((8, 16))))


@pytest.mark.parametrize("n_fit,slack", [(2000, 0.01), (10, 0.0)])
def test_oracle_beats_empirical_nearest_centroid(n_fit, slack):
    # the oracle is optimal in expectation; on 2000 test records allow 1 point of sampling slack
    cfg = SyntheticConfig(token_noise_sigma=4.0, samples_per_domain=2000, num_source_domains=2,
                          num_target_domains=0, seed=11)
    bench = synth_generate(cfg)
    train_ds, test_ds = bench.source
    p = bench.params
    lat_train = p.transforms[0].invert(train_ds.tokens[:n_fit]).mean(axis=1)
    fit_labels = train_ds.labels[:n_fit]
    present = np.unique(fit_labels)
    cents = np.stack([lat_train[fit_labels == c].mean(axis=0) for c in present])
    lat_test = p.transforms[1].invert(test_ds.tokens).mean(axis=1)
    nc = present[((lat_test[:, None] - cents[None]) ** 2).sum(-1).argmin(1)]
    assert oracle_accuracy(p, test_ds) >= np.mean(nc == test_ds.labels) - slack


def test_regression_oracle_recovers_targets():
    bench = synth_generate(SyntheticConfig(task="regression", token_noise_sigma=0.0, samples_per_domain=10, seed=0))
    ds = bench.source[0]
    preds = np.array([bayes_oracle(bench.params, r) for r in ds])
    np.testing.assert_allclose(preds, ds.labels, atol=1e-9)


def test_generative_params_round_trip(tmp_path, default_bench):
    default_bench.params.save(tmp_path / "g.npz")
    back = GenerativeParams.load(tmp_path / "g.npz")
    ds = default_bench.target[0]
    assert oracle_accuracy(back, ds) == oracle_accuracy(default_bench.params, ds)


@pytest.mark.parametrize("kw", [dict(num_classes=0), dict(samples_per_domain=0), dict(num_source_domains=1)])
def test_degenerate_configs_rejected(kw):
    with pytest.raises(ConfigError):
        synth_generate(SyntheticConfig(**kw))


# ---------------------------------------------------------------- sampling


def pool_of(sizes, l=1, d=1):
    parts = [EmbeddingDataset(np.zeros((n, l, d)), np.full(n, k), np.zeros(n, dtype=int), num_classes=1)
             for k, n in enumerate(sizes)]
    return DomainPool.from_datasets(parts)


def test_exact_64_record_domain_is_exhausted():
    pool = pool_of([64])
    ep = sample_episode(pool, np.random.default_rng(0))
    assert len(ep.support) == 16 and len(ep.query) == 48
    assert sorted(np.concatenate([ep.support, ep.query]).tolist()) == list(range(64))


def test_episode_determinism():
    pool = pool_of([100, 100, 100])
    a = sample_episode(pool, np.random.default_rng(9))
    b = sample_episode(pool, np.random.default_rng(9))
    assert a.domain_id == b.domain_id
    np.testing.assert_array_equal(a.support, b.support)
    np.testing.assert_array_equal(a.query, b.query)


def test_uniform_domain_frequencies_within_binomial_bound():
    pool = pool_of([70, 200, 90, 64, 300, 120])
    rng = np.random.default_rng(0)
    n = 10_000
    counts = np.zeros(6)
    for _ in range(n):
        counts[sample_episode(pool, rng).domain_id] += 1
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - n / 6) <= 3 * sigma)


def test_size_proportional_probabilities():
    np.testing.assert_allclose(domain_probabilities(pool_of([64, 192]), "size"), [0.25, 0.75])


@pytest.mark.parametrize("available,expected", [(40, (16, 24)), (20, (12, 8)), (12, (4, 8))])
def test_small_domain_shrinks_query_then_support(available, expected, caplog):
    with caplog.at_level(logging.WARNING):
        ep = sample_episode(pool_of([available]), np.random.default_rng(0))
    assert (len(ep.support), len(ep.query)) == expected
    assert not set(ep.support) & set(ep.query)
    assert "shrunk" in caplog.text


def test_too_small_domain_raises():
    with pytest.raises(ConfigError):
        sample_episode(pool_of([11]), np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(12, 120), min_size=2, max_size=6), st.integers(0, 2**31))
def test_episode_invariants(sizes, seed):
    pool = pool_of(sizes)
    rng = np.random.default_rng(seed)
    ep = build_contrastive_batch(pool, sample_episode(pool, rng), rng)
    assert not set(ep.support.tolist()) & set(ep.query.tolist())
    assert set(pool.domain_ids[np.concatenate([ep.support, ep.query])].tolist()) == {ep.domain_id}
    assert len(set(ep.contrastive_domains.tolist())) >= 2
    np.testing.assert_array_equal(pool.domain_ids[ep.contrastive], ep.contrastive_domains)


def test_contrastive_batch_sizes():
    pool = pool_of([100] * 4)
    rng = np.random.default_rng(0)
    ep = sample_episode(pool, rng)
    assert len(build_contrastive_batch(pool, ep, rng).contrastive) == 80
    assert len(build_contrastive_batch(pool, ep, rng, include_query=False).contrastive) == 32


def test_contrastive_c_zero_is_single_domain(caplog):
    pool = pool_of([100, 100])
    rng = np.random.default_rng(0)
    with caplog.at_level(logging.WARNING):
        ep = build_contrastive_batch(pool, sample_episode(pool, rng), rng, C=0)
    assert set(ep.contrastive_domains.tolist()) == {ep.domain_id}
    assert "single domain" in caplog.text


def test_contrastive_c_clamped(caplog):
    pool = pool_of([100, 100])
    rng = np.random.default_rng(0)
    with caplog.at_level(logging.WARNING):
        ep = build_contrastive_batch(pool, sample_episode(pool, rng), rng, C=3)
    assert len(set(ep.contrastive_domains.tolist())) == 2
    assert "clamped" in caplog.text


def test_pool_from_unlabeled_view_has_no_labels(rng):
    pool = DomainPool.from_datasets([random_dataset(rng).unlabeled_view()])
    assert pool.labels is None
