"""Tests for the planted-trigger corpus and the noise injector"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from core.errors import ConfigError, DataError
from core.synthetic import (
    SynthConfig,
    generate_corpus,
    inject_noise,
    label_code,
    noise_count,
    recover_labels,
    trigger_tokens,
)
from core.text_pipeline import deidentify

TOKENS = [f"tok{i}" for i in range(10)]


class TestSynthConfig:
    def test_uniform_pairs_labels(self):
        cfg = SynthConfig.uniform(n_docs=5, n_labels=3, cooccur_boost=2.0)
        assert cfg.boosts == ((0.0, 2.0, 0.0), (2.0, 0.0, 0.0), (0.0, 0.0, 0.0))
        assert cfg.triggers[1] == ("sx1a", "sx1b", "sx1c")

    def test_label_codes_extend_past_the_builtin_list(self):
        assert label_code(99) == "Z99.0"

    def test_marginal_bounds(self):
        with pytest.raises(ConfigError):
            SynthConfig.uniform(n_docs=5, n_labels=2, marginal=1.0)

    def test_asymmetric_boosts(self):
        with pytest.raises(ConfigError, match="symmetric"):
            SynthConfig(5, (0.2, 0.2), ((0.0, 1.0), (0.0, 0.0)), (trigger_tokens(0), trigger_tokens(1)))

    def test_shared_trigger(self):
        triggers = (("qa", "qb", "qc"), ("qc", "qd", "qe"))
        with pytest.raises(ConfigError, match="shared"):
            SynthConfig(5, (0.2, 0.2), ((0.0, 0.0), (0.0, 0.0)), triggers)

    def test_short_documents(self):
        with pytest.raises(ConfigError):
            SynthConfig.uniform(n_docs=5, n_labels=2, doc_len=(2, 10))


class TestGenerateCorpus:
    def test_planted_rule_round_trip(self):
        cfg = SynthConfig.uniform(n_docs=300, n_labels=6, seed=1)
        for record in generate_corpus(cfg):
            assert recover_labels(record.text, cfg) == record.labels

    def test_round_trip_survives_deidentification(self):
        cfg = SynthConfig.uniform(n_docs=100, n_labels=4, phi_rate=1.0, seed=2)
        for record in generate_corpus(cfg):
            assert "MRN" in record.text
            assert recover_labels(deidentify(record.text), cfg) == record.labels

    def test_seed_determinism(self):
        cfg = SynthConfig.uniform(n_docs=50, n_labels=4, seed=7)
        assert generate_corpus(cfg) == generate_corpus(cfg)

    def test_seeds_differ(self):
        a = generate_corpus(SynthConfig.uniform(n_docs=20, n_labels=4, seed=1))
        b = generate_corpus(SynthConfig.uniform(n_docs=20, n_labels=4, seed=2))
        assert a != b

    def test_marginals_without_boosts(self):
        cfg = SynthConfig.uniform(n_docs=5000, n_labels=3, marginal=0.3, cooccur_boost=0.0,
                                  doc_len=(3, 5), seed=3)
        records = generate_corpus(cfg)
        for code in cfg.label_codes:
            rate = sum(code in r.labels for r in records) / len(records)
            assert abs(rate - 0.3) <= 0.03

    def test_boost_couples_paired_labels(self):
        cfg = SynthConfig.uniform(n_docs=3000, n_labels=2, marginal=0.3, cooccur_boost=3.0,
                                  doc_len=(3, 5), seed=4)
        labels = np.array([[code in r.labels for code in cfg.label_codes] for r in generate_corpus(cfg)])
        given_first = labels[labels[:, 0], 1].mean()
        without_first = labels[~labels[:, 0], 1].mean()
        assert given_first > without_first + 0.2

    def test_document_shape(self):
        cfg = SynthConfig.uniform(n_docs=30, n_labels=3, doc_len=(5, 8), phi_rate=0.0, seed=5)
        for index, record in enumerate(generate_corpus(cfg)):
            assert record.id == f"doc{index:05d}"
            assert 16 <= record.age <= 95
            n_tokens = len(record.text.replace(".", " ").split())
            assert 5 <= n_tokens <= 8 + 2 * len(record.labels)


class TestNoise:
    def test_level_zero_is_identity(self):
        assert inject_noise(TOKENS, 0.0, "substitute", seed=0, vocabulary=["x"]) == TOKENS

    @pytest.mark.parametrize("level,n,expected", [(0.5, 10, 5), (0.25, 10, 3), (0.05, 10, 1), (0.04, 10, 0)])
    def test_round_half_up(self, level, n, expected):
        assert noise_count(level, n) == expected

    def test_substitute_touches_exact_count(self):
        out = inject_noise(TOKENS, 0.5, "substitute", seed=3, vocabulary=["zz"])
        assert sum(a != b for a, b in zip(TOKENS, out)) == 5

    def test_delete(self):
        assert len(inject_noise(TOKENS, 0.3, "delete", seed=1)) == 7

    def test_delete_keeps_one_token(self):
        assert len(inject_noise(TOKENS, 1.0, "delete", seed=1)) == 1

    def test_typo_swaps_characters(self):
        out = inject_noise(["abc", "de", "f"], 1.0, "typo", seed=5)
        assert sorted(out[0]) == sorted("abc") and out[0] != "abc"
        assert out[1] == "ed"
        assert len(out[2]) == 1 and out[2] != "f"

    def test_same_seed_same_output(self):
        a = inject_noise(TOKENS, 0.4, "substitute", seed=9, vocabulary=["p", "q", "r"])
        b = inject_noise(TOKENS, 0.4, "substitute", seed=9, vocabulary=["p", "q", "r"])
        assert a == b

    def test_level_out_of_range(self):
        with pytest.raises(DataError):
            inject_noise(TOKENS, 1.5, "delete", seed=0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            inject_noise(TOKENS, 0.1, "shuffle", seed=0)

    def test_substitute_needs_vocabulary(self):
        with pytest.raises(DataError):
            inject_noise(TOKENS, 0.1, "substitute", seed=0)

    @given(st.lists(st.text(alphabet="abcdef", min_size=2, max_size=6), min_size=1, max_size=30),
           st.floats(0, 1), st.integers(0, 1000))
    def test_typo_preserves_length_and_letters(self, tokens, level, seed):
        out = inject_noise(tokens, level, "typo", seed=seed)
        assert len(out) == len(tokens)
        assert all(sorted(a) == sorted(b) for a, b in zip(tokens, out))
