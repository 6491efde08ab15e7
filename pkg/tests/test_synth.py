import numpy as np
import pytest

from crowdmesa import synth
from crowdmesa.density import rasterize_ground_truth


def test_empty_scene_is_background():
    s = synth.generate_scene(0, 40, 30, seed=1)
    assert len(s.annotations) == 0
    assert np.all(s.confidence == synth.BACKGROUND_CONF)


def test_scene_count_peaks_and_separation():
    s = synth.generate_scene(50, 120, 90, seed=2)
    assert len(s.annotations) == 50
    assert np.all((s.peaks >= -0.6) & (s.peaks <= -0.1))
    d = np.hypot(*(s.positions[:, None] - s.positions[None]).transpose(2, 0, 1))
    assert d[~np.eye(50, dtype=bool)].min() >= synth.DEFAULT_MIN_SEPARATION
    # peaks reach the clamp range used by confidence quantization
    assert s.confidence.max() > -0.6
    assert np.all((s.image >= 0) & (s.image <= 1))


def test_full_sized_crowded_scene():
    s = synth.generate_scene(263, 1440, 1080, seed=3)
    assert len(s.annotations) == 263


def test_scene_determinism():
    a = synth.generate_scene(30, 96, 72, seed=9)
    b = synth.generate_scene(30, 96, 72, seed=9)
    assert a.confidence.tobytes() == b.confidence.tobytes()
    assert a.image.tobytes() == b.image.tobytes()
    assert a.positions.tobytes() == b.positions.tobytes()
    c = synth.generate_scene(30, 96, 72, seed=10)
    assert c.positions.tobytes() != a.positions.tobytes()


def test_overcrowded_rejected():
    with pytest.raises(ValueError):
        synth.generate_scene(500, 40, 30, seed=0)
    with pytest.raises(ValueError):
        synth.generate_scene(-1, 40, 30, seed=0)


def test_gt_density_of_scene_sums_to_count():
    s = synth.generate_scene(77, 160, 120, seed=4)
    gt = rasterize_ground_truth(s.annotations, 8.0, 160, 120)
    assert abs(gt.sum() - 77) <= 77e-9


def test_scene_set_counts_follow_distribution():
    scenes = synth.generate_scene_set(6, 40, 2, 80, 60, seed=5, prefix="x")
    counts = [len(s.annotations) for s in scenes]
    assert all(30 <= c <= 50 for c in counts)
    assert [s.annotations.frame for s in scenes] == [f"x{i:04d}" for i in range(6)]


def test_uniform_zero_sequence_is_static():
    s = synth.generate_scene(10, 60, 40, seed=6)
    seq = synth.generate_sequence(s, synth.VelocitySpec.uniform(0, 0), 4)
    assert all(np.array_equal(f, seq.frames[0]) for f in seq.frames)
    assert np.array_equal(seq.frames[0], s.image)


def test_uniform_gt_displacement_multiplication():
    d = synth.gt_displacement(synth.VelocitySpec.uniform(0.37, -0.22), 10, 30, 20)
    assert np.allclose(d[:, :, 0], 3.7, atol=1e-12) and np.allclose(d[:, :, 1], -2.2, atol=1e-12)


def test_sequence_advects_persons():
    s = synth.generate_scene(10, 80, 60, seed=7, margin=10)
    seq = synth.generate_sequence(s, synth.VelocitySpec.uniform(0.5, 0.25), 5)
    assert np.allclose(seq.annotations[4].points - seq.annotations[0].points, [2.0, 1.0])


def test_opposing_streams_two_populations():
    s = synth.generate_scene(20, 100, 60, seed=8, margin=12)
    spec = synth.VelocitySpec.opposing(1.0)
    seq = synth.generate_sequence(s, spec, 3)
    upper = s.positions[:, 1] < 30
    move = seq.annotations[2].points - seq.annotations[0].points
    assert np.allclose(move[upper], [2.0, 0.0]) and np.allclose(move[~upper], [-2.0, 0.0])
    d = synth.gt_displacement(spec, 3, 100, 60)
    assert np.allclose(d[:30, :, 0], 3.0) and np.allclose(d[30:, :, 0], -3.0)


def test_rotation_spec_preserves_center_distance():
    spec = synth.VelocitySpec.rotation(0.01)
    x, y = spec.displace(np.array([70.0]), np.array([40.0]), 5, 100, 80)
    assert np.hypot(x - 50, y - 40) == pytest.approx(20.0)


def test_persons_leaving_frame_rejected():
    s = synth.generate_scene(10, 50, 40, seed=9)
    with pytest.raises(ValueError):
        synth.generate_sequence(s, synth.VelocitySpec.uniform(5, 0), 20)


def test_sequence_noise_is_seeded():
    s = synth.generate_scene(5, 40, 30, seed=10)
    a = synth.generate_sequence(s, synth.VelocitySpec.uniform(0, 0), 2, seed=3, noise_std=0.05)
    b = synth.generate_sequence(s, synth.VelocitySpec.uniform(0, 0), 2, seed=3, noise_std=0.05)
    assert a.frames[1].tobytes() == b.frames[1].tobytes()
    assert not np.array_equal(a.frames[0], s.image)


def test_planted_examples():
    zero = synth.generate_planted_training(2, 3, np.zeros(3), seed=1, width=8, height=8)
    assert all(np.all(t.gt == 0) for t in zero)
    w = np.array([0.1, 0.0, 0.4])
    train = synth.generate_planted_training(3, 3, w, seed=2, width=10, height=10)
    for t in train:
        idx = t.features.indices[:, :, 0]
        n0, n2 = (idx == 0).sum(), (idx == 2).sum()
        assert t.gt.sum() == pytest.approx(0.1 * n0 + 0.4 * n2, rel=1e-12)


def test_planted_coverage_rejected():
    with pytest.raises(ValueError, match="never appear"):
        synth.generate_planted_training(2, 4, np.ones(4), seed=0, width=5, height=5,
                                        index_probs=[0.5, 0.25, 0.25, 0.0])
    with pytest.raises(ValueError):
        synth.generate_planted_training(2, 3, [0.1, -0.1, 0.0], seed=0)
