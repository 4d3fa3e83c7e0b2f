import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relforge import scene
from relforge.scene import (ConfigError, SceneConfig, embed_features, generate_dataset,
                            interaction_features, pairwise_interactions)

ATAN_4_3 = math.atan2(4, 3)          # 0.9273
ATAN2_4_M3 = math.atan2(4, -3)       # 2.2143


def test_interaction_first_quadrant():
    f = interaction_features((0, 0), (3, 4))
    np.testing.assert_allclose(f, [3, 4, 7, 5, ATAN_4_3, ATAN_4_3], atol=1e-12)
    assert abs(f[4] - 0.9273) < 1e-4


def test_interaction_angle_channels_disagree_across_quadrants():
    f = interaction_features((0, 0), (-3, 4))
    np.testing.assert_allclose(f, [3, 4, 1, 5, -ATAN_4_3, ATAN2_4_M3], atol=1e-12)
    assert abs(f[5] - 2.2143) < 1e-4


def test_interaction_identical_points():
    np.testing.assert_array_equal(interaction_features((1.5, -2), (1.5, -2)), np.zeros(6))


def test_interaction_vertical_displacement():
    f = interaction_features((0, 0), (0, -2))
    assert f[4] == pytest.approx(-math.pi / 2)
    assert f[5] == pytest.approx(-math.pi / 2)


coords = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(coords, coords, coords, coords)
def test_interaction_channel_symmetry(a, b, c, d):
    fij = interaction_features((a, b), (c, d))
    fji = interaction_features((c, d), (a, b))
    np.testing.assert_allclose(fij[:4], fji[:4], atol=1e-12)
    # atan(dy/dx) is even under negating both components, except on the
    # dx = 0 convention atan(dy/0) = sign(dy) pi/2, which flips sign
    if a != c:
        assert fij[4] == pytest.approx(fji[4], abs=1e-12)
    else:
        assert fij[4] == pytest.approx(-fji[4], abs=1e-12)
    if (a, b) != (c, d):
        diff = (fij[5] - fji[5]) % (2 * math.pi)
        assert min(abs(diff - math.pi), abs(diff + math.pi), abs(diff - 3 * math.pi)) < 1e-9


def test_pairwise_matches_scalar_version():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(5, 2))
    pos[3] = pos[1]
    pos[4, 0] = pos[0, 0]
    tensor = pairwise_interactions(pos)
    for i in range(5):
        for j in range(5):
            np.testing.assert_allclose(tensor[i, j], interaction_features(pos[i], pos[j]),
                                       atol=1e-12)


def test_dataset_deterministic():
    cfg = SceneConfig(n_clips=20, noise_frames=3, distractor_persons=2)
    a, b = generate_dataset(cfg, 7), generate_dataset(cfg, 7)
    for x, y in zip(a, b):
        assert x.to_record() == y.to_record()
    c = generate_dataset(cfg, 8)
    assert any(not np.array_equal(x.person_features, y.person_features) for x, y in zip(a, c))


def test_no_noise_frames_means_all_informative():
    for clip in generate_dataset(SceneConfig(n_clips=10), 0):
        assert clip.informative_frames == list(range(10))


def test_planted_structure():
    cfg = SceneConfig(n_clips=12, noise_frames=5, distractor_persons=3)
    for clip in generate_dataset(cfg, 1):
        assert len(clip.key_persons) == 3
        assert len(clip.informative_frames) == 5
        assert clip.key_relations == [(a, b) for i, a in enumerate(clip.key_persons)
                                      for b in clip.key_persons[i + 1:]]
        assert clip.positions.shape == (6, 10, 2)
        assert clip.person_features.shape == (6, 10, 12)


@pytest.mark.parametrize("n_clips,k", [(500, 4), (37, 4), (10, 3)])
def test_class_balance(n_clips, k):
    labels = [c.activity_label for c in generate_dataset(SceneConfig(n_clips=n_clips,
                                                                     n_classes=k), 0)]
    counts = np.bincount(labels, minlength=k)
    assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize("kw", [dict(distractor_persons=5), dict(n_persons=2),
                                dict(t_distill=11), dict(noise_frames=6),
                                dict(n_classes=1)])
def test_infeasible_config(kw):
    with pytest.raises(ConfigError):
        generate_dataset(SceneConfig(n_clips=4, **kw), 0)


def test_dataset_round_trip(tmp_path):
    clips = generate_dataset(SceneConfig(n_clips=6, noise_frames=2), 3)
    path = tmp_path / "d.jsonl"
    scene.save_dataset(path, clips)
    back = scene.load_dataset(path)
    assert [c.to_record() for c in back] == [c.to_record() for c in clips]


def test_learnability_oracle():
    """Multinomial logistic regression on the planted oracle features."""
    from sklearn.linear_model import LogisticRegression

    clips = generate_dataset(SceneConfig(n_classes=4, n_persons=6, n_clips=500), 0)
    X = np.array([scene.oracle_features(c) for c in clips])
    y = np.array([c.activity_label for c in clips])
    model = LogisticRegression(max_iter=2000).fit(X[:400], y[:400])
    assert model.score(X[400:], y[400:]) >= 0.95


# ---- embeddings ----

def _emb_params(rng, d_feature=4, dv=3, de=2):
    return {"emb_v.W": rng.normal(size=(dv, d_feature)), "emb_v.b": rng.normal(size=dv),
            "emb_e.W": rng.normal(size=(de, 6)), "emb_e.b": rng.normal(size=de)}


def test_embedding_zero_weights_gives_bias():
    rng = np.random.default_rng(0)
    p = _emb_params(rng)
    p["emb_v.W"][:] = 0
    p["emb_e.W"][:] = 0
    hv, he, _ = embed_features(rng.normal(size=(5, 4)), rng.normal(size=(5, 5, 6)), p)
    np.testing.assert_array_equal(hv, np.broadcast_to(p["emb_v.b"], hv.shape))
    np.testing.assert_array_equal(he, np.broadcast_to(p["emb_e.b"], he.shape))


def test_embedding_permutation_equivariance():
    rng = np.random.default_rng(1)
    p = _emb_params(rng)
    pos = rng.normal(size=(5, 2))
    xp = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    hv, he, _ = embed_features(xp, pairwise_interactions(pos), p)
    hv2, he2, _ = embed_features(xp[perm], pairwise_interactions(pos[perm]), p)
    np.testing.assert_allclose(hv2, hv[perm], atol=1e-12)
    np.testing.assert_allclose(he2, he[np.ix_(perm, perm)], atol=1e-12)
