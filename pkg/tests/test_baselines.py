import math

import numpy as np
import pytest

from protomix import (
    PrototypeBank,
    deepsets_embed,
    h2t_embed,
    protocounts_embed,
)


def make_bank(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return PrototypeBank(prototypes=rows, C=rows.shape[0], fit_meta={})


class TestDeepSets:
    def test_two_rows(self):
        emb = deepsets_embed(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert emb.values.tolist() == [2.0, 3.0]
        assert emb.variant == "deepsets"

    def test_single_row(self):
        emb = deepsets_embed(np.array([[7.0, -1.0, 2.0]]))
        assert emb.values.tolist() == [7.0, -1.0, 2.0]

    def test_matches_compensated_sum_oracle(self, rng):
        z = rng.standard_normal((50, 4)) * 10
        emb = deepsets_embed(z)
        for j in range(4):
            assert emb.values[j] == pytest.approx(math.fsum(z[:, j]) / 50, abs=1e-7)

    def test_exact_permutation_invariance(self, rng):
        z = rng.standard_normal((40, 3))
        perm = rng.permutation(40)
        assert np.array_equal(deepsets_embed(z).values, deepsets_embed(z[perm]).values)


class TestProtoCounts:
    def test_all_elements_on_one_prototype(self, rng):
        bank = make_bank([[0.0, 0.0], [50.0, 50.0]])
        z = rng.standard_normal((12, 2))
        emb = protocounts_embed(z, bank, normalize=False)
        assert emb.values.tolist() == [12.0, 0.0]

    def test_sums(self, rng):
        bank = make_bank(rng.standard_normal((4, 3)))
        z = rng.standard_normal((23, 3))
        raw = protocounts_embed(z, bank, normalize=False)
        norm = protocounts_embed(z, bank, normalize=True)
        assert raw.values.sum() == 23
        assert np.all(raw.values == raw.values.astype(int))
        assert norm.values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_normalized_counts_match_planted_profile(self, rng):
        means = np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]])
        profile = np.array([0.5, 0.3, 0.2])
        n = 600
        comps = rng.choice(3, size=n, p=profile)
        z = means[comps] + 0.1 * rng.standard_normal((n, 2))
        emb = protocounts_embed(z, make_bank(means), normalize=True)
        assert np.all(np.abs(emb.values - profile) <= 3.0 / np.sqrt(n))

    def test_exact_permutation_invariance(self, rng):
        bank = make_bank(rng.standard_normal((3, 2)))
        z = rng.standard_normal((30, 2))
        perm = rng.permutation(30)
        a = protocounts_embed(z, bank).values
        b = protocounts_embed(z[perm], bank).values
        assert np.array_equal(a, b)


class TestH2T:
    def test_elements_exactly_on_prototypes(self):
        bank = make_bank([[0.0, 0.0], [5.0, 5.0], [9.0, -9.0]])
        z = np.array([[0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
        emb = h2t_embed(z, bank)
        assert emb.block(0).tolist() == [0.0, 0.0]
        assert emb.block(1).tolist() == [5.0, 5.0]
        assert emb.block(2).tolist() == [0.0, 0.0]
        assert emb.meta["empty_blocks"] == (2,)

    def test_c1_equals_deepsets_exactly(self, rng):
        bank = make_bank(rng.standard_normal((1, 3)))
        z = rng.standard_normal((25, 3))
        assert np.array_equal(h2t_embed(z, bank).values, deepsets_embed(z).values)

    def test_matches_group_by_mean_oracle(self, rng):
        bank = make_bank(rng.standard_normal((4, 2)) * 3)
        z = rng.standard_normal((40, 2)) * 3
        emb = h2t_embed(z, bank)
        # independent oracle: nearest prototype by explicit scan, then mean
        for c in range(4):
            members = []
            for row in z:
                dists = [((row - bank.prototypes[k]) ** 2).sum() for k in range(4)]
                if int(np.argmin(dists)) == c:
                    members.append(row)
            expected = np.mean(members, axis=0) if members else np.zeros(2)
            assert np.allclose(emb.block(c), expected, atol=1e-12)

    def test_exact_permutation_invariance(self, rng):
        bank = make_bank(rng.standard_normal((3, 2)))
        z = rng.standard_normal((30, 2))
        perm = rng.permutation(30)
        assert np.array_equal(h2t_embed(z, bank).values, h2t_embed(z[perm], bank).values)

    def test_length(self, rng):
        bank = make_bank(rng.standard_normal((5, 7)))
        emb = h2t_embed(rng.standard_normal((10, 7)), bank)
        assert len(emb) == 35
