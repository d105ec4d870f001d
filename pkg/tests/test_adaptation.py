import time

import numpy as np
import pytest

from vdpg import adaptation as A
from vdpg import model as M
from vdpg.data import FormatError
from vdpg.tensor import ContractError


@pytest.fixture(scope="module")
def target(small_bench):
    return small_bench.target[0]


def test_adapt_leaves_parameters_untouched(toy_params, target):
    before = toy_params.checksum()
    prompt = A.adapt(toy_params, target, k=16)
    assert toy_params.checksum() == before
    assert prompt.shape == (3, 8) and prompt.provenance == "generated" and prompt.meta["n_condition"] == 16


def test_adapt_uses_first_k_records(toy_params, target):
    a = A.adapt(toy_params, target, k=5).P
    b = A.adapt(toy_params, target.tokens[:5], k=16).P
    np.testing.assert_array_equal(a, b)


def test_adapt_accepts_a_single_record(toy_params, target):
    assert A.adapt(toy_params, target.tokens[0]).shape == (3, 8)


def test_adapt_rejects_empty(toy_params):
    with pytest.raises(ContractError):
        A.adapt(toy_params, np.zeros((0, 4, 8)))


def test_adapt_is_fast_on_default_model():
    params = M.init_params(M.ModelConfig(), seed=0)
    records = np.random.default_rng(0).normal(size=(16, 16, 16))
    A.adapt(params, records)
    t0 = time.perf_counter()
    A.adapt(params, records)
    assert time.perf_counter() - t0 < 1.0


def test_infer_matches_argmax(toy_params, target):
    prompt = A.adapt(toy_params, target)
    pred, seconds = A.timed_infer(toy_params, prompt, target)
    raw = M.guide_and_predict(toy_params.tensors, toy_params.config, prompt.P, target.tokens).data
    np.testing.assert_array_equal(pred, raw.argmax(-1))
    assert seconds >= 0


def test_infer_detects_mutation(toy_params, target, monkeypatch):
    params = toy_params.copy()
    real = A.decide

    def mutate(raw, task):
        params.bank[0, 0] += 1.0
        return real(raw, task)

    monkeypatch.setattr(A, "decide", mutate)
    with pytest.raises(A.GradientFreedomError):
        A.infer(params, np.zeros((3, 8)), target)


class TestPromptCache:
    def test_adapts_once(self, toy_params, target):
        cache = A.PromptCache()
        a = cache.get_or_adapt("site-a", toy_params, target)
        b = cache.get_or_adapt("site-a", toy_params, target.tokens[::-1])
        assert a is b and len(cache) == 1 and "site-a" in cache
        assert a.meta["key"] == "site-a"

    def test_put_refuses_overwrite(self, toy_params):
        cache = A.PromptCache()
        cache.put(1, A.replacement_prompt(toy_params, "zeros"))
        with pytest.raises(KeyError):
            cache.put(1, A.replacement_prompt(toy_params, "zeros"))


class TestPromptFiles:
    def test_round_trip_is_exact(self, toy_params, target, tmp_path):
        prompt = A.adapt(toy_params, target)
        A.export_prompt(prompt, tmp_path / "p.vdpp")
        back = A.import_prompt(tmp_path / "p.vdpp")
        assert back.P.tobytes() == prompt.P.tobytes() and back.provenance == "generated"

    def test_every_byte_flip_is_detected(self, toy_params, tmp_path):
        path = tmp_path / "p.vdpp"
        A.export_prompt(A.replacement_prompt(toy_params, "random"), path)
        good = path.read_bytes()
        for i in range(len(good)):
            buf = bytearray(good)
            buf[i] ^= 0x01
            path.write_bytes(bytes(buf))
            with pytest.raises(FormatError):
                A.import_prompt(path)

    def test_truncation(self, toy_params, tmp_path):
        path = tmp_path / "p.vdpp"
        A.export_prompt(A.replacement_prompt(toy_params, "zeros"), path)
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(FormatError, match="truncated"):
            A.import_prompt(path)


class TestReplacements:
    def test_kinds(self, toy_params):
        assert not A.replacement_prompt(toy_params, "zeros").P.any()
        r1, r2 = (A.replacement_prompt(toy_params, "random", s).P for s in (0, 1))
        assert r1.shape == (3, 8) and not np.array_equal(r1, r2)
        bank = A.replacement_prompt(toy_params, "bank")
        np.testing.assert_array_equal(bank.P, toy_params.bank)
        assert bank.provenance == "bank_copy"

    def test_unknown_kind(self, toy_params):
        with pytest.raises(ValueError):
            A.replacement_prompt(toy_params, "mean")

    def test_swap_eval_scores_same_records(self, toy_params, small_bench):
        res = A.swap_prompt_eval(toy_params, small_bench.target, k=8)
        assert set(res) == set(A.REPLACEMENTS)
        assert len({m.n for m in res.values()}) == 1


class TestDiagnostics:
    @pytest.mark.parametrize("level", ["domain", "instance"])
    def test_distance_matrix_is_a_dissimilarity(self, toy_params, small_bench, level):
        rep = A.prompt_distance_matrix(toy_params, small_bench.source, level, k=8, per_domain=20)
        assert rep.matrix.shape == (3, 3)
        if level == "domain":
            assert A.prompt_matrix_checks(rep.matrix)
        else:
            off = rep.matrix - np.diag(np.diag(rep.matrix))
            assert A.prompt_matrix_checks(off, tol=1e-12)
        assert rep.inter >= 0 and rep.intra >= 0

    def test_instance_level_class_breakdown(self, toy_params, small_bench):
        rep = A.prompt_distance_matrix(toy_params, small_bench.source, "instance", per_domain=20)
        assert np.isfinite(rep.same_class_cross_domain) and np.isfinite(rep.cross_class_same_domain)
        assert set(rep.to_dict()) >= {"matrix", "intra", "inter"}

    def test_unknown_level(self, toy_params, small_bench):
        with pytest.raises(ValueError):
            A.prompt_distance_matrix(toy_params, small_bench.source, "pixel")

    def test_swap_covers_all_ordered_pairs(self, toy_params, small_bench):
        res = A.cross_domain_prompt_swap(toy_params, small_bench.source, k=8)
        assert sorted((a, b) for a, b, _, _ in res.pairs) == [(a, b) for a in range(3) for b in range(3) if a != b]
        assert all(d >= 0 for _, _, d, _ in res.pairs)

    def test_swap_single_is_both_directions(self, toy_params, small_bench):
        pairs = A.swap_single(toy_params, small_bench.source[0], small_bench.source[1], k=8)
        assert {(a, b) for a, b, _, _ in pairs} == {(0, 1), (1, 0)}

    def test_prompt_distance(self):
        assert A.prompt_distance(np.zeros((1, 2)), np.array([[3.0, 4.0]])) == 12.5

    def test_bank_correlation(self):
        C = A.bank_correlation(np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]))
        assert C[0, 1] == pytest.approx(1 / np.sqrt(2)) and C[2, 2] == 1.0 and C[0, 2] == 0.0
        assert A.max_off_diagonal(C) == pytest.approx(1 / np.sqrt(2))
        assert A.max_off_diagonal(np.ones((1, 1))) == 0.0
