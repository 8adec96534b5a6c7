import numpy as np
import pytest

from protomix import (
    EMBED_METHODS,
    MixtureParams,
    PrototypeBank,
    SetEmbedding,
    ValidationError,
    compose_all,
    compose_bottom,
    compose_top,
    compose_wa,
    embed_cohort,
    expected_length,
    export_embeddings_csv,
    load_embeddings,
    read_params_block,
    save_embeddings,
)
from protomix.embedding import column_names, standard_layout

from conftest import random_cohort


def random_params(rng, c, d):
    return MixtureParams(
        pi=rng.dirichlet(np.ones(c)),
        mu=rng.standard_normal((c, d)),
        sigma=rng.uniform(0.1, 2.0, (c, d)),
    )


class TestComposeAll:
    def test_c16_d1024_length(self, rng):
        params = random_params(rng, 16, 1024)
        emb = compose_all(params)
        assert len(emb) == 16 * 2049 == 32784

    def test_minimal_case(self):
        params = MixtureParams(pi=np.array([1.0]), mu=np.array([[2.0]]), sigma=np.array([[0.5]]))
        emb = compose_all(params)
        assert emb.values.tolist() == [1.0, 2.0, 0.5]

    def test_block_round_trip(self, rng):
        params = random_params(rng, 4, 6)
        emb = compose_all(params)
        for c in range(4):
            pi, mu, sigma = read_params_block(emb, c)
            assert pi == params.pi[c]
            assert np.array_equal(mu, params.mu[c])
            assert np.array_equal(sigma, params.sigma[c])


class TestComposeWa:
    def test_uniform_pi_is_plain_mean(self, rng):
        c, d = 5, 3
        params = MixtureParams(
            pi=np.full(c, 1 / c),
            mu=rng.standard_normal((c, d)),
            sigma=rng.uniform(0.1, 1.0, (c, d)),
        )
        emb = compose_wa(params)
        assert np.allclose(emb.values[:d], params.mu.mean(axis=0), atol=1e-12)
        assert np.allclose(emb.values[d:], params.sigma.mean(axis=0), atol=1e-12)

    def test_one_hot_pi_selects_component(self, rng):
        pi = np.array([0.0, 1.0, 0.0])
        params = MixtureParams(pi=pi, mu=rng.standard_normal((3, 2)),
                               sigma=rng.uniform(0.1, 1.0, (3, 2)))
        emb = compose_wa(params)
        assert np.allclose(emb.values, np.concatenate([params.mu[1], params.sigma[1]]), atol=1e-12)

    def test_matches_weighted_sum_oracle(self, rng):
        params = random_params(rng, 6, 4)
        emb = compose_wa(params)
        mu = sum(params.pi[c] * params.mu[c] for c in range(6))
        sigma = sum(params.pi[c] * params.sigma[c] for c in range(6))
        assert np.allclose(emb.values, np.concatenate([mu, sigma]), atol=1e-9)


class TestComposeTopBottom:
    def test_selection(self, rng):
        params = MixtureParams(pi=np.array([0.1, 0.7, 0.2]),
                               mu=rng.standard_normal((3, 2)),
                               sigma=rng.uniform(0.1, 1.0, (3, 2)))
        top, bottom = compose_top(params), compose_bottom(params)
        assert top.meta["component"] == 1
        assert bottom.meta["component"] == 0
        assert top.values[0] == pytest.approx(0.7)
        assert bottom.values[0] == pytest.approx(0.1)

    def test_tie_rule(self, rng):
        params = MixtureParams(pi=np.full(4, 0.25), mu=rng.standard_normal((4, 2)),
                               sigma=np.ones((4, 2)))
        assert compose_top(params).meta["component"] == 0
        assert compose_bottom(params).meta["component"] == 0

    def test_blocks_appear_in_compose_all(self, rng):
        params = random_params(rng, 5, 3)
        full = compose_all(params)
        m = 1 + 2 * 3
        top = compose_top(params)
        bottom = compose_bottom(params)
        ct, cb = top.meta["component"], bottom.meta["component"]
        assert np.array_equal(top.values, full.values[ct * m : (ct + 1) * m])
        assert np.array_equal(bottom.values, full.values[cb * m : (cb + 1) * m])


class TestShapeTable:
    def test_all_variants(self, rng):
        for _ in range(10):
            c = int(rng.integers(1, 20))
            d = int(rng.integers(1, 40))
            table = {
                "all": c * (1 + 2 * d),
                "wa": 2 * d,
                "top": 1 + 2 * d,
                "bottom": 1 + 2 * d,
                "deepsets": d,
                "protocounts": c,
                "h2t": c * d,
                "ot": c * d,
            }
            for variant, want in table.items():
                assert expected_length(variant, c, d) == want
                layout = standard_layout(variant, c, d)
                assert sum(stop - start for _, start, stop in layout) == want

    def test_layout_validation(self):
        with pytest.raises(ValidationError, match="cover"):
            SetEmbedding(values=np.zeros(4), variant="wa", C=1, d=2,
                         block_layout=(("a", 0, 2), ("b", 3, 4)))

    def test_length_validation(self):
        with pytest.raises(ValidationError, match="length"):
            SetEmbedding(values=np.zeros(5), variant="wa", C=1, d=2)


class TestEmbedCohort:
    def bank_for(self, rng, cohort, c=3):
        protos = rng.standard_normal((c, cohort.d))
        return PrototypeBank(prototypes=protos, C=c, fit_meta={})

    def test_deepsets_shapes(self, rng):
        cohort = random_cohort(rng, num_sets=3, d=5)
        embs = embed_cohort(cohort, None, "deepsets")
        assert len(embs) == 3
        assert all(len(e) == 5 for e in embs)
        assert [e.set_id for e in embs] == [s.id for s in cohort.sets]

    def test_deterministic(self, rng):
        cohort = random_cohort(rng, num_sets=4, d=3)
        bank = self.bank_for(rng, cohort)
        a = embed_cohort(cohort, bank, "panther_all")
        b = embed_cohort(cohort, bank, "panther_all")
        for x, y in zip(a, b):
            assert np.array_equal(x.values, y.values)

    def test_threads_do_not_change_results(self, rng):
        cohort = random_cohort(rng, num_sets=6, d=4)
        bank = self.bank_for(rng, cohort)
        serial = embed_cohort(cohort, bank, "ot")
        threaded = embed_cohort(cohort, bank, "ot", threads=4)
        for x, y in zip(serial, threaded):
            assert np.array_equal(x.values, y.values)

    def test_lengths_follow_variant_table(self, rng):
        cohort = random_cohort(rng, num_sets=2, d=4)
        bank = self.bank_for(rng, cohort, c=3)
        want = {
            "panther_all": 3 * 9, "panther_wa": 8, "panther_top": 9,
            "panther_bottom": 9, "deepsets": 4, "protocounts": 3,
            "h2t": 12, "ot": 12,
        }
        for method in EMBED_METHODS:
            embs = embed_cohort(cohort, bank, method)
            assert all(len(e) == want[method] for e in embs), method

    def test_unknown_method(self, rng):
        cohort = random_cohort(rng, num_sets=1, d=2)
        with pytest.raises(ValidationError, match="panther_all"):
            embed_cohort(cohort, None, "nope")

    def test_bank_required(self, rng):
        cohort = random_cohort(rng, num_sets=1, d=2)
        with pytest.raises(ValidationError, match="bank"):
            embed_cohort(cohort, None, "h2t")

    def test_failure_names_set(self, rng):
        cohort = random_cohort(rng, num_sets=2, d=3)
        bad_bank = PrototypeBank(prototypes=rng.standard_normal((2, 5)), C=2, fit_meta={})
        with pytest.raises(ValidationError):
            embed_cohort(cohort, bad_bank, "panther_all")

    def test_skip_errors_drops_failed_sets(self, rng):
        from protomix import EmbeddingSet, Cohort, EmConfig, NumericalError

        good = EmbeddingSet(id="good", features=rng.standard_normal((5, 2)).astype(np.float32))
        far = EmbeddingSet(id="far", features=np.full((5, 2), 1e6, dtype=np.float32)
                           + rng.standard_normal((5, 2)).astype(np.float32))
        cohort = Cohort(sets=[good, far], d=2)
        bank = self.bank_for(rng, cohort, c=2)
        cfg = EmConfig(num_steps=1, log_space=False)  # underflows on the far set
        with pytest.raises(NumericalError, match="far"):
            embed_cohort(cohort, bank, "panther_all", em_cfg=cfg)
        kept = embed_cohort(cohort, bank, "panther_all", em_cfg=cfg, skip_errors=True)
        assert [e.set_id for e in kept] == ["good"]


class TestEmbeddingFiles:
    def test_round_trip(self, rng, tmp_path):
        params = [random_params(rng, 3, 4) for _ in range(5)]
        embs = [compose_all(p, set_id=f"e{i}") for i, p in enumerate(params)]
        path = tmp_path / "e.pemb"
        save_embeddings(embs, path)
        loaded = load_embeddings(path)
        assert [e.set_id for e in loaded] == [e.set_id for e in embs]
        for a, b in zip(loaded, embs):
            assert np.array_equal(a.values, b.values.astype(np.float32).astype(np.float64))
        # a second save of the loaded list is byte-identical
        save_embeddings(loaded, tmp_path / "e2.pemb")
        assert (tmp_path / "e.pemb").read_bytes() == (tmp_path / "e2.pemb").read_bytes()

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.pemb").write_bytes(b"JUNK" + b"\x00" * 20)
        with pytest.raises(Exception, match="magic"):
            load_embeddings(tmp_path / "x.pemb")

    def test_mixed_variants_rejected(self, rng):
        params = random_params(rng, 2, 3)
        with pytest.raises(ValidationError):
            save_embeddings([compose_all(params), compose_wa(params)], "/tmp/never.pemb")

    def test_csv_export_column_names(self, rng, tmp_path):
        params = random_params(rng, 4, 20)
        emb = compose_all(params, set_id="a")
        path = tmp_path / "e.csv"
        export_embeddings_csv([emb], path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[0] == "id"
        assert "p3.pi" in header
        assert "p3.mu.17" in header
        assert len(header) == 1 + len(emb)

    def test_csv_names_cover_all_variants(self):
        for variant in ("all", "wa", "top", "bottom", "deepsets", "protocounts", "h2t", "ot"):
            c = 3 if variant != "deepsets" else 0
            names = column_names(variant, c, 2)
            assert len(names) == expected_length(variant, c, 2)
            assert len(set(names)) == len(names)
