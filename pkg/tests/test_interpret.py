import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from protomix import (
    EmConfig,
    MixtureParams,
    PosteriorMatrix,
    PrototypeBank,
    SyntheticSpec,
    ValidationError,
    assignment_map,
    assignment_raster,
    cohort_pi_table,
    e_step,
    fit_set,
    generate_synthetic_cohort,
    heatmap_raster,
    prototype_heatmap,
)
from protomix.interpret import load_f32_matrix, write_assignment_csv, write_f32_matrix, write_pgm


def make_bank(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return PrototypeBank(prototypes=rows, C=rows.shape[0], fit_meta={})


def uniform_params(c, d):
    return MixtureParams(pi=np.full(c, 1 / c), mu=np.zeros((c, d)), sigma=np.ones((c, d)))


class TestAssignmentMap:
    def test_one_hot_row(self):
        q = np.zeros((1, 8))
        q[0, 5] = 1.0
        amap = assignment_map(np.zeros((1, 2)), PosteriorMatrix(q=q), uniform_params(8, 2))
        assert amap.assigned[0] == 5

    def test_uniform_row_tie_rule(self):
        q = np.full((1, 4), 0.25)
        amap = assignment_map(np.zeros((1, 2)), PosteriorMatrix(q=q), uniform_params(4, 2))
        assert amap.assigned[0] == 0

    def test_planted_zero_noise_matches_generator(self):
        means = ((0.0, 0.0), (7.0, 0.0), (0.0, 7.0))
        spec = SyntheticSpec(
            num_sets=4,
            d=2,
            component_means=means,
            component_variances=tuple((1.0, 1.0) for _ in means),
            proportion_profiles=((0.5, 0.3, 0.2),),
            n_range=(60, 80),
            noise_sigma=0.0,
            seed=21,
        )
        cohort = generate_synthetic_cohort(spec)
        bank = make_bank(means)
        planted = np.asarray(means)
        for s in cohort.sets:
            params, posterior = fit_set(s.features, bank, EmConfig(num_steps=1))
            amap = assignment_map(s.features, posterior, params, coords=s.coords)
            # recover each element's planted component from its exact position
            feats = s.features.astype(np.float64)
            truth = ((feats[:, None, :] - planted[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
            agreement = np.zeros((3, 3))
            for t, a in zip(truth, amap.assigned):
                agreement[t, a] += 1
            rows, cols = linear_sum_assignment(-agreement)
            matched = agreement[rows, cols].sum() / s.n
            assert matched == 1.0

    def test_relabeling_equivariance(self, rng):
        protos = rng.standard_normal((4, 3))
        z = rng.standard_normal((25, 3))
        perm = np.array([3, 1, 0, 2])
        pa, qa = fit_set(z, make_bank(protos), EmConfig(num_steps=2))
        pb, qb = fit_set(z, make_bank(protos[perm]), EmConfig(num_steps=2))
        ma = assignment_map(z, qa, pa)
        mb = assignment_map(z, qb, pb)
        inverse = np.argsort(perm)
        assert np.array_equal(inverse[ma.assigned], mb.assigned)
        assert np.array_equal(ma.pi_hat[perm], mb.pi_hat)

    def test_shape_mismatch(self, rng):
        q = PosteriorMatrix(q=np.full((3, 2), 0.5))
        with pytest.raises(ValidationError):
            assignment_map(rng.standard_normal((4, 2)), q, uniform_params(2, 2))


class TestHeatmap:
    def test_single_component_all_ones(self):
        q = PosteriorMatrix(q=np.ones((6, 1)))
        assert prototype_heatmap(q, 0).tolist() == [1.0] * 6

    def test_columns_partition_unity(self, rng):
        raw = rng.uniform(0.1, 1.0, (10, 4))
        q = PosteriorMatrix(q=raw / raw.sum(axis=1, keepdims=True))
        total = sum(prototype_heatmap(q, c) for c in range(4))
        assert np.allclose(total, 1.0, atol=1e-12)

    def test_matches_e_step_column(self, rng):
        params = MixtureParams(pi=rng.dirichlet(np.ones(3)),
                               mu=rng.standard_normal((3, 2)),
                               sigma=rng.uniform(0.2, 2.0, (3, 2)))
        z = rng.standard_normal((12, 2))
        q = e_step(z, params)
        assert np.array_equal(prototype_heatmap(q, 1), q.q[:, 1])

    def test_index_out_of_range(self):
        q = PosteriorMatrix(q=np.ones((2, 1)))
        with pytest.raises(ValidationError):
            prototype_heatmap(q, 1)


class TestPiTable:
    def amap_with_pi(self, rng, pi, set_id):
        pi = np.asarray(pi, dtype=np.float64)
        c = pi.shape[0]
        q = np.tile(pi, (5, 1))
        amap = assignment_map(
            rng.standard_normal((5, 2)), PosteriorMatrix(q=q),
            MixtureParams(pi=pi, mu=np.zeros((c, 2)), sigma=np.ones((c, 2))),
        )
        amap.set_id = set_id
        return amap

    def test_single_map(self, rng):
        amap = self.amap_with_pi(rng, [0.25, 0.75], "only")
        table = cohort_pi_table([amap])
        assert table.row_ids == ["only"]
        assert np.allclose(table.rows[0], [0.25, 0.75])

    def test_label_means_separate(self, rng):
        maps = [
            self.amap_with_pi(rng, [0.8, 0.2], "a0"),
            self.amap_with_pi(rng, [0.78, 0.22], "a1"),
            self.amap_with_pi(rng, [0.2, 0.8], "b0"),
            self.amap_with_pi(rng, [0.22, 0.78], "b1"),
        ]
        table = cohort_pi_table(maps, labels=[0, 0, 1, 1])
        assert table.row_ids[-2:] == ["label:0:mean", "label:1:mean"]
        gap = abs(table.rows[-2][0] - table.rows[-1][0])
        assert gap > 0.5

    def test_rows_sum_to_one(self, rng):
        maps = [self.amap_with_pi(rng, [0.3, 0.3, 0.4], f"s{i}") for i in range(4)]
        table = cohort_pi_table(maps, labels=[0, 1, 0, 1])
        assert np.allclose(table.rows.sum(axis=1), 1.0, atol=1e-9)

    def test_csv_export(self, rng, tmp_path):
        table = cohort_pi_table([self.amap_with_pi(rng, [0.5, 0.5], "x")])
        table.to_csv(tmp_path / "pi.csv")
        lines = (tmp_path / "pi.csv").read_text().splitlines()
        assert lines[0] == "row,pi0,pi1"
        assert lines[1].startswith("x,0.5,0.5")

    def test_c_mismatch(self, rng):
        a = self.amap_with_pi(rng, [0.5, 0.5], "a")
        b = self.amap_with_pi(rng, [0.4, 0.3, 0.3], "b")
        with pytest.raises(ValidationError):
            cohort_pi_table([a, b])


class TestRasters:
    def amap_on_grid(self):
        coords = np.array([[2, 3], [3, 3], [2, 5]])
        q = np.array([[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]])
        return assignment_map(np.zeros((3, 2)), PosteriorMatrix(q=q),
                              uniform_params(2, 2), coords=coords)

    def test_raster_dims_equal_bounding_box(self):
        grid = assignment_raster(self.amap_on_grid())
        assert grid.shape == (3, 2)  # y spans 3..5, x spans 2..3

    def test_holes_are_minus_one(self):
        grid = assignment_raster(self.amap_on_grid())
        assert grid[0, 0] == 0 and grid[0, 1] == 1 and grid[2, 0] == 1
        assert (grid == -1).sum() == 3

    def test_heatmap_raster_values(self):
        heat = heatmap_raster(self.amap_on_grid(), 1)
        assert heat.dtype == np.float32
        assert heat[0, 0] == pytest.approx(0.0)
        assert heat[2, 0] == pytest.approx(0.7, abs=1e-6)

    def test_missing_coords_rejected(self, rng):
        q = PosteriorMatrix(q=np.ones((2, 1)))
        amap = assignment_map(rng.standard_normal((2, 2)), q, uniform_params(1, 2))
        with pytest.raises(ValidationError, match="coords"):
            assignment_raster(amap)

    def test_pgm_header_and_size(self, tmp_path):
        grid = assignment_raster(self.amap_on_grid())
        write_pgm(grid, tmp_path / "g.pgm")
        raw = (tmp_path / "g.pgm").read_bytes()
        assert raw.startswith(b"P5\n2 3\n255\n")
        assert len(raw) == len(b"P5\n2 3\n255\n") + 6

    def test_f32_matrix_round_trip(self, tmp_path, rng):
        m = rng.standard_normal((4, 5)).astype(np.float32)
        write_f32_matrix(m, tmp_path / "m.pmat")
        assert np.array_equal(load_f32_matrix(tmp_path / "m.pmat"), m)

    def test_assignment_csv(self, tmp_path):
        amap = self.amap_on_grid()
        write_assignment_csv(amap, tmp_path / "a.csv")
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "x,y,assigned,q0,q1"
        cells = lines[1].split(",")
        assert cells[:3] == ["2", "3", "0"]
        assert float(cells[3]) + float(cells[4]) == pytest.approx(1.0)
