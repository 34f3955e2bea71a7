import numpy as np
import pytest

from branchtune import cka as C
from branchtune import nn
from branchtune import tensor as T


def rand(shape, seed, scale=1.0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(shape) * scale


def random_orthogonal(d, seed):
    q, r = np.linalg.qr(rand((d, d), seed))
    return q * np.sign(np.diag(r))


class TestCenter:
    def test_columns_have_zero_mean(self):
        x = rand((10, 4), 0) + 5.0
        c = C.center(x)
        assert np.allclose(c.mean(axis=0), 0, atol=1e-12)

    def test_centering_idempotent(self):
        x = rand((8, 3), 1)
        assert np.allclose(C.center(C.center(x)), C.center(x))

    def test_nan_rejected(self):
        x = rand((5, 3), 2)
        x[2, 1] = np.nan
        with pytest.raises(ValueError):
            C.center(x)

    def test_non_matrix_rejected(self):
        with pytest.raises(ValueError):
            C.center(np.zeros((2, 3, 4)))


class TestGram:
    def test_shape_and_symmetry(self):
        g = C.gram(C.center(rand((6, 4), 0)))
        assert g.shape == (6, 6)
        assert np.allclose(g, g.T)

    def test_positive_semidefinite(self):
        g = C.gram(C.center(rand((7, 3), 1)))
        eigvals = np.linalg.eigvalsh(g)
        assert eigvals.min() > -1e-9

    def test_constant_features_give_zero_gram(self):
        x = np.full((5, 3), 2.5)
        assert np.allclose(C.gram(C.center(x)), 0)


class TestCka:
    def test_self_similarity_is_one(self):
        x = rand((12, 6), 0)
        assert C.cka(x, x) == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_orthogonal_invariance(self, seed):
        x = rand((16, 8), seed)
        q = random_orthogonal(8, seed + 50)
        assert abs(C.cka(x, x @ q) - 1.0) < 1e-5

    @pytest.mark.parametrize("scale", [0.01, 3.0, 1e4])
    def test_isotropic_scale_invariance(self, scale):
        x = rand((10, 5), 3)
        y = rand((10, 7), 4)
        base = C.cka(x, y)
        assert abs(C.cka(x * scale, y) - base) < 1e-5
        assert abs(C.cka(x, y * scale) - base) < 1e-5

    def test_symmetry(self):
        x = rand((9, 4), 5)
        y = rand((9, 6), 6)
        assert abs(C.cka(x, y) - C.cka(y, x)) < 1e-7

    def test_scores_inside_unit_interval(self):
        for seed in range(10):
            x = rand((8, 5), seed)
            y = rand((8, 5), seed + 100)
            s = C.cka(x, y)
            assert 0.0 <= s <= 1.0

    def test_two_samples_always_one(self):
        # every centered 2-sample Gram is proportional to [[a,-a],[-a,a]]
        for seed in range(5):
            x = rand((2, 6), seed)
            y = rand((2, 9), seed + 10)
            assert abs(C.cka(x, y) - 1.0) < 1e-6

    def test_independent_features_score_between_zero_and_one(self):
        x = rand((64, 16), 0)
        y = rand((64, 16), 1)
        s = C.cka(x, y)
        assert 0.0 < s < 1.0

    def test_consistent_permutation_preserves_score(self):
        x = rand((20, 5), 7)
        y = rand((20, 8), 8)
        base = C.cka(x, y)
        perm = np.random.Generator(np.random.PCG64(9)).permutation(20)
        assert abs(C.cka(x[perm], y[perm]) - base) < 1e-9

    def test_both_constant_scores_one(self):
        x = np.full((6, 3), 1.0)
        y = np.full((6, 5), -2.0)
        assert C.cka(x, y) == 1.0

    def test_one_sided_constant_is_undefined(self):
        x = np.full((6, 3), 1.0)
        y = rand((6, 3), 0)
        with pytest.raises(C.UndefinedScoreError):
            C.cka(x, y)
        with pytest.raises(C.UndefinedScoreError):
            C.cka(y, x)

    def test_sample_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            C.cka(rand((5, 3), 0), rand((6, 3), 1))

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError):
            C.cka(rand((1, 3), 0), rand((1, 3), 1))


class TestReduceActivation:
    def test_spatial_mean(self):
        act = rand((4, 3, 5, 5), 0)
        red = C.reduce_activation(act, "spatial_mean")
        assert red.shape == (4, 3)
        assert np.allclose(red, act.mean(axis=(2, 3)))

    def test_flatten(self):
        act = rand((4, 3, 5, 5), 0)
        assert C.reduce_activation(act, "flatten").shape == (4, 75)

    def test_flat_passthrough(self):
        act = rand((4, 16), 0)
        assert np.array_equal(C.reduce_activation(act), act)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            C.reduce_activation(rand((4, 3, 5, 5), 0), "max")


class TestModelProfiles:
    def _model(self, seed):
        return nn.build_backbone(nn.BackboneSpec(), seed=seed)

    def _images(self, seed, n=16):
        return T.randn([n, 3, 32, 32], seed=seed).data * 0.2 + 0.5

    def test_identical_models_score_one_everywhere(self):
        m = self._model(0)
        scores = C.pairwise_layer_cka(m, m.clone(), self._images(1))
        assert [n for n, _ in scores] == m.tap_names()
        assert all(s == 1.0 for _, s in scores)

    def test_different_models_score_below_one_somewhere(self):
        scores = C.pairwise_layer_cka(self._model(0), self._model(1),
                                      self._images(2))
        assert any(s < 0.999999 for _, s in scores)

    def test_tap_mismatch_rejected(self):
        a = self._model(0)
        b = nn.build_backbone(nn.BackboneSpec(stage_widths=(8,),
                                              blocks_per_stage=(1,),
                                              embed_dim=8), seed=0)
        with pytest.raises(ValueError):
            C.pairwise_layer_cka(a, b, self._images(1))

    def test_stability_plasticity_degenerate_cases(self):
        m = self._model(3)
        profile = C.stability_plasticity(m, m.clone(), m.clone(),
                                         self._images(4), self._images(5),
                                         stage=2)
        assert profile.stage == 2
        assert all(e.stability == 1.0 for e in profile.entries)
        assert all(e.plasticity == 1.0 for e in profile.entries)
        assert profile.mean_stability() == 1.0

    def test_missing_joint_reference_yields_nan(self):
        m = self._model(6)
        profile = C.stability_plasticity(m, m.clone(), None,
                                         self._images(7), self._images(8),
                                         stage=3)
        assert all(np.isnan(e.plasticity) for e in profile.entries)
        assert np.isnan(profile.mean_plasticity())

    def test_csv_round_trip(self, tmp_path):
        m = self._model(9)
        profile = C.stability_plasticity(m, self._model(10), self._model(11),
                                         self._images(12), self._images(13),
                                         stage=4)
        path = tmp_path / "profile.csv"
        profile.write_csv(path)
        back = C.CkaProfile.read_csv(path, stage=4)
        assert back == profile
        header = path.read_text().splitlines()[0]
        assert header == "layer_index,layer_name,stability,plasticity"
