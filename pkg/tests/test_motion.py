import numpy as np
import pytest

from wbteleop.model import LinkPose, bundled_model_path, load_model
from wbteleop.motion import (MOTION_KINDS, frame_stride, generate_motion,
                             generate_motion_file, pack_frame, read_pose_file,
                             synthesize_frame, unpack_frame, write_pose_file)
from wbteleop.retarget import HumanPoseFrame, retarget_body, retarget_neck


@pytest.fixture(scope="module")
def demo():
    return load_model(bundled_model_path())


def frames_equal(a, b):
    if set(a.links) != set(b.links) or a.timestamp != b.timestamp:
        return False
    return all(a.links[n].rotation.tobytes() == b.links[n].rotation.tobytes()
               and a.links[n].position.tobytes() == b.links[n].position.tobytes()
               for n in a.links)


def test_generation_is_deterministic(demo, tmp_path):
    f1 = generate_motion(demo, "walk", duration=1.0, seed=7)
    f2 = generate_motion(demo, "walk", duration=1.0, seed=7)
    assert len(f1) == 100
    assert all(frames_equal(a, b) for a, b in zip(f1, f2))
    p1, p2 = tmp_path / "a.tw2m", tmp_path / "b.tw2m"
    generate_motion_file(demo, p1, "walk", duration=1.0, seed=7)
    generate_motion_file(demo, p2, "walk", duration=1.0, seed=7)
    assert p1.read_bytes() == p2.read_bytes()


def test_different_seeds_differ(demo):
    f1 = generate_motion(demo, "walk", duration=0.5, seed=1)
    f2 = generate_motion(demo, "walk", duration=0.5, seed=2)
    assert not frames_equal(f1[10], f2[10])


def test_timestamps_follow_the_rate(demo):
    frames = generate_motion(demo, "reach", duration=0.2, rate_hz=100.0,
                             t0_ns=5_000)
    stamps = [f.timestamp for f in frames]
    assert stamps[0] == 5_000
    assert all(b - a == 10_000_000 for a, b in zip(stamps, stamps[1:]))


def test_walk_advances_and_stays_reachable(demo):
    frames = generate_motion(demo, "walk", duration=3.0, seed=3)
    x0 = frames[0].links["pelvis"].position[0]
    x1 = frames[-1].links["pelvis"].position[0]
    assert x1 - x0 > 0.5
    for f in frames[:: len(frames) // 4]:
        assert retarget_body(demo, f).residual < 1e-8


def test_crouch_drops_the_pelvis(demo):
    frames = generate_motion(demo, "crouch", duration=4.0, seed=5)
    zs = np.array([f.links["pelvis"].position[2] for f in frames])
    assert zs[0] - zs.min() >= 0.2
    assert np.argmin(zs) not in (0, len(zs) - 1)


def test_head_scan_sweeps_the_neck(demo):
    frames = generate_motion(demo, "head-scan", duration=10.0, seed=4)
    yaws = np.array([retarget_neck(f).yaw for f in frames])
    assert yaws.max() > 0.55 and yaws.max() <= 0.6 + 1e-9
    assert yaws.min() < -0.55
    body = [f.links["pelvis"].position for f in frames]
    assert np.ptp(np.stack(body), axis=0).max() == 0.0


def test_reach_lifts_a_hand(demo):
    frames = generate_motion(demo, "reach", duration=4.0, seed=6)
    hands = np.stack([
        np.stack([f.links["left_hand"].position, f.links["right_hand"].position])
        for f in frames])
    gain = hands[-1, :, 2] - hands[0, :, 2]
    assert gain.max() > 0.25


def test_unknown_kind_rejected(demo):
    with pytest.raises(ValueError, match="walk"):
        generate_motion(demo, "moonwalk")
    with pytest.raises(ValueError, match="positive"):
        generate_motion(demo, "walk", duration=0.0)
    assert set(MOTION_KINDS) == {"walk", "crouch", "reach", "head-scan"}


def test_synthesized_head_matches_spine_at_zero_neck(demo):
    frame = synthesize_frame(demo, demo.neutral_config(), LinkPose.identity())
    assert np.array_equal(frame.links["head"].rotation,
                          frame.links["spine"].rotation)
    assert set(demo.human_links) == set(frame.links)


def test_frame_codec_round_trip(demo):
    frame = synthesize_frame(demo, demo.neutral_config(), LinkPose.identity(),
                             neck=(0.2, 0.1), timestamp=777)
    names = list(demo.human_links)
    buf = pack_frame(frame, names)
    assert len(buf) == frame_stride(len(names))
    back = unpack_frame(buf, names)
    assert frames_equal(frame, back)


def test_frame_codec_preserves_partial_presence(demo):
    full = synthesize_frame(demo, demo.neutral_config(), LinkPose.identity())
    links = {n: p for n, p in full.links.items() if n != "left_hand"}
    partial = HumanPoseFrame(links=links, timestamp=3)
    names = list(demo.human_links)
    back = unpack_frame(pack_frame(partial, names), names)
    assert "left_hand" not in back.present
    assert back.has("pelvis")


def test_frame_codec_limits():
    with pytest.raises(ValueError, match="64"):
        pack_frame(HumanPoseFrame(links={"pelvis": LinkPose.identity()}),
                   [f"l{i}" for i in range(65)])
    with pytest.raises(ValueError, match="bytes"):
        unpack_frame(b"\0" * 10, ["pelvis"])


def test_pose_file_round_trip(demo, tmp_path):
    frames = generate_motion(demo, "crouch", duration=0.5, seed=9)
    path = tmp_path / "m.tw2m"
    write_pose_file(path, frames, demo.human_links, 100.0, meta={"kind": "crouch"})
    back, header = read_pose_file(path)
    assert header["kind"] == "crouch"
    assert header["rate_hz"] == 100.0
    assert len(back) == len(frames)
    assert all(frames_equal(a, b) for a, b in zip(frames, back))


def test_pose_file_detects_corruption(demo, tmp_path):
    frames = generate_motion(demo, "walk", duration=0.2, seed=1)
    path = tmp_path / "m.tw2m"
    write_pose_file(path, frames, demo.human_links, 100.0)
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad.tw2m"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_pose_file(bad)

    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    bad.write_bytes(flipped)
    with pytest.raises(ValueError, match="checksum|footer|truncated"):
        read_pose_file(bad)

    bad.write_bytes(raw[:-30])
    with pytest.raises(ValueError, match="truncated"):
        read_pose_file(bad)
