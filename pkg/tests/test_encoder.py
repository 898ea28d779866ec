import numpy as np
import pytest

from flowchain.encoder import Encoder, Scene, SceneError, denormalize, encode, neighbor_features, relative_normalize


def _scene(rng, n_neighbors=3):
    obs = np.cumsum(rng.standard_normal((8, 2)), axis=0)
    neighbors = [obs[-2:] + rng.standard_normal((2, 2)) * 3 for _ in range(n_neighbors)]
    return Scene(obs=obs, future=obs[-1] + rng.standard_normal((12, 2)), neighbors=neighbors)


def _encoder(social=True, seed=0):
    return Encoder({}, obs_len=8, hidden=16, social_pooling=social, rng=np.random.default_rng(seed))


class TestNormalize:
    def test_zero_scene_anchor(self):
        s = Scene(obs=np.zeros((8, 2)))
        _, anchor = relative_normalize(s)
        assert np.array_equal(anchor, [0.0, 0.0])

    def test_roundtrip(self, rng):
        s = _scene(rng)
        norm, anchor = relative_normalize(s)
        back = denormalize(norm, anchor)
        assert np.allclose(back.obs, s.obs, atol=1e-12)
        assert np.allclose(back.future, s.future, atol=1e-12)
        for a, b in zip(back.neighbors, s.neighbors):
            assert np.allclose(a, b, atol=1e-12)

    def test_last_position_is_origin(self, rng):
        norm, _ = relative_normalize(_scene(rng))
        assert np.array_equal(norm.obs[-1], [0.0, 0.0])


class TestEncode:
    def test_stationary_target_is_deterministic(self):
        enc = _encoder(social=False)
        s = Scene(obs=np.ones((8, 2)) * 4.0)
        a, b = encode(s, enc), encode(s, enc)
        assert a.shape == (16,) and np.all(np.isfinite(a)) and np.array_equal(a, b)

    def test_neighbor_permutation_invariance(self, rng):
        enc = _encoder()
        s = _scene(rng, 5)
        perm = Scene(obs=s.obs, neighbors=[s.neighbors[i] for i in rng.permutation(5)])
        assert np.max(np.abs(encode(s, enc) - encode(perm, enc))) < 1e-12

    def test_translation_invariance(self, rng):
        enc = _encoder()
        s = _scene(rng)
        shift = np.array([10.0, 10.0])
        moved = Scene(obs=s.obs + shift, neighbors=[nb + shift for nb in s.neighbors])
        assert np.max(np.abs(encode(s, enc) - encode(moved, enc))) < 1e-12

    def test_social_pooling_changes_vector(self, rng):
        enc = _encoder()
        s = _scene(rng)
        alone = Scene(obs=s.obs)
        assert not np.allclose(encode(s, enc), encode(alone, enc))

    def test_pooling_disabled_ignores_neighbors(self, rng):
        enc = _encoder(social=False)
        s = _scene(rng)
        assert np.array_equal(encode(s, enc), encode(Scene(obs=s.obs), enc))

    def test_short_history_raises(self):
        with pytest.raises(SceneError):
            encode(Scene(obs=np.zeros((7, 2))), _encoder())

    def test_longer_history_uses_last_positions(self, rng):
        enc = _encoder(social=False)
        obs = np.cumsum(rng.standard_normal((11, 2)), axis=0)
        assert np.array_equal(encode(Scene(obs=obs), enc), encode(Scene(obs=obs[-8:]), enc))

    def test_batch_matches_single(self, rng):
        enc = _encoder()
        scenes = [_scene(rng, k) for k in (0, 2, 4)]
        disp, neigh, mask = enc.inputs(scenes)
        batch = enc.encode_batch(disp, neigh, mask).value
        for i, s in enumerate(scenes):
            assert np.allclose(batch[i], encode(s, enc), atol=1e-12)

    def test_neighbor_features(self):
        obs = np.array([[0.0, 0.0]] * 7 + [[1.0, 0.0]])
        s = Scene(obs=obs, neighbors=[np.array([[3.0, 3.0], [4.0, 3.0]])])
        assert np.array_equal(neighbor_features(s), [[3.0, 3.0, 0.0, 0.0]])
