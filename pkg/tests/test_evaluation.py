import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refvid import curation as cu
from refvid import evaluation as ev
from refvid.errors import ConfigError, ContractError, ManifestError


def sprite_ref(seed=0, shape="disc", pattern="stripes", color="red", size=8):
    spec = cu.SpriteSpec("x", shape, color, size, (0, 0), (0, 0), pattern=pattern)
    pix, mask, _ = cu.sprite_pixels(spec)
    ref = np.zeros((size, size, 4))
    ref[..., :3] = pix / 255.0
    ref[..., 3] = mask
    return ref


def place(frame, ref, r, c):
    m = ref[..., 3] > 0.5
    h, w = m.shape
    region = frame[r:r + h, c:c + w]
    region[m] = ref[..., :3][m]
    return frame


def positive_control(ref, frames=4, size=32, bg=(0.1, 0.2, 0.5)):
    video = np.zeros((frames, size, size, 3)) + np.array(bg)
    for f in range(frames):
        place(video[f], ref, 6, 9)
    return video


def test_positive_control_scores_high():
    for pattern in ("stripes", "checker", "ring"):
        ref = sprite_ref(pattern=pattern)
        assert ev.subject_consistency(positive_control(ref), ref) >= 0.99


def noise_scores(n=100):
    ref = sprite_ref(pattern="checker")
    return [ev.subject_consistency(np.random.default_rng(s).random((4, 32, 32, 3)), ref) for s in range(n)]


def test_noise_scores_below_control_threshold():
    scores = noise_scores()
    assert max(scores) < 0.5


def test_translation_invariance():
    ref = sprite_ref(pattern="ring")
    a = ev.subject_consistency(positive_control(ref), ref)
    video = np.zeros((4, 32, 32, 3)) + np.array([0.1, 0.2, 0.5])
    for f in range(4):
        place(video[f], ref, 20, 2 + 3 * f)
    assert ev.subject_consistency(video, ref) == pytest.approx(a, abs=1e-12)


def test_uniform_reference_is_degenerate():
    ref = np.zeros((6, 6, 4))
    ref[..., 0] = 1.0
    ref[..., 3] = 1.0
    with pytest.raises(ev.DegenerateReferenceError):
        ev.subject_consistency(np.random.default_rng(0).random((2, 16, 16, 3)), ref)
    with pytest.raises(ContractError):
        ev.subject_consistency(np.zeros((2, 16, 16, 3)), np.zeros((4, 4, 4)))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_consistency_bounded(seed):
    rng = np.random.default_rng(seed)
    ref = sprite_ref(pattern=str(rng.choice(["stripes", "checker", "ring"])), color=str(rng.choice(sorted(cu.COLORS))))
    score = ev.subject_consistency(rng.random((2, 16, 16, 3)), ref)
    assert 0.0 <= score <= 1.0


def test_match_reference_finds_position():
    ref = sprite_ref(pattern="checker")
    frame = np.zeros((32, 32, 3)) + 0.3
    place(frame, ref, 11, 17)
    ncc, pos, _ = ev.match_reference(frame, ref)
    assert pos == (11, 17) and ncc == pytest.approx(1.0, abs=1e-12)


def test_prompt_follow_on_ground_truth_paths():
    rng = np.random.default_rng(0)
    specs = [cu.SpriteSpec("red square", "square", "red", 6, (4, 4), (1, 2), pattern="checker"),
             cu.SpriteSpec("blue disc", "disc", "blue", 8, (20, 20), (0, -1), pattern="stripes")]
    clip = cu.synth_clip(specs, rng=rng, background="sand")
    refs = [sprite_ref(shape=s.shape, pattern=s.pattern, color=s.color, size=s.size) for s in specs]
    sprites = [{"velocity": list(s.velocity)} for s in specs]
    assert ev.prompt_follow(clip.frames, refs, sprites) == 1.0
    reversed_sprites = [{"velocity": [-v for v in s["velocity"]]} for s in sprites]
    assert ev.prompt_follow(clip.frames, refs, reversed_sprites) < 0.5


def test_sign_test():
    assert ev.sign_test([1.0] * 10)["p_value"] == pytest.approx(0.5 ** 10)
    r = ev.sign_test([0.0, 0.0])
    assert r["p_value"] == 1.0 and r["n_zero"] == 2
    assert ev.sign_test([-1.0] * 5 + [1.0])["p_value"] > 0.9


def sample_report(seed=0, n=4):
    rng = np.random.default_rng(seed)
    clips = [ev.ClipResult(f"clip{i:04d}", 100 + i, {"red disc": float(rng.random())}, float(rng.random()),
                           float(rng.random())) for i in range(n)]
    return ev.EvalReport("ab" * 32, "cd" * 32, 100, 3.0, clips, "run").finalize()


def test_report_round_trip(tmp_path):
    rep = sample_report()
    ev.write_report(tmp_path / "r.json", rep)
    assert ev.read_report(tmp_path / "r.json") == rep


def test_report_errors(tmp_path):
    with pytest.raises(ConfigError):
        ev.EvalReport("a", "b", 0, 3.0, []).finalize()
    (tmp_path / "bad.json").write_text('{"version": 1}')
    with pytest.raises(ManifestError):
        ev.read_report(tmp_path / "bad.json")
    (tmp_path / "old.json").write_text('{"version": 99}')
    with pytest.raises(ManifestError, match="version"):
        ev.read_report(tmp_path / "old.json")


def test_self_comparison_is_zero():
    rep = sample_report(3)
    cmp = ev.compare(rep, rep)
    assert all(d == 0.0 for d in cmp["deltas"].values())
    assert cmp["mean_delta"] == 0.0 and cmp["sign_test"]["p_value"] == 1.0


def test_compare_needs_shared_clips():
    a = sample_report(0)
    b = ev.EvalReport("x", "y", 0, 3.0, [ev.ClipResult("other", 0, {}, 0.1, 0.0)]).finalize()
    with pytest.raises(ConfigError):
        ev.compare(a, b)
