import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from metricpose import io
from metricpose.config import RunConfig
from metricpose.evaluation import Estimate, EvalReport
from metricpose.geometry import Intrinsics
from metricpose.toy import SceneConfig, TrainRecord, generate_scene

K = Intrinsics(100.0, 101.5, 56.25, 55.0, 112, 112)


def test_float_format_is_exact():
    for x in [0.1, 1 / 3, 1e-300, -2.5e17, math.pi, 5e-324]:
        assert float(io.fmt(x)) == x


@given(st.floats(allow_nan=False, allow_infinity=False))
@settings(max_examples=200, deadline=None)
def test_float_format_roundtrip_property(x):
    assert float(io.fmt(x)) == x


def test_scene_roundtrip():
    scene = generate_scene(SceneConfig(noise_sigma=0.01, outlier_fraction=0.2), 3)
    text = io.serialize_scene(scene, RunConfig().to_json())
    back = io.parse_scene(text)
    assert io.scenes_equal(scene, back)
    assert io.serialize_scene(back, RunConfig().to_json()) == text


def test_manifest_roundtrip():
    entries = [("pair0000", "scene_0000.txt"), ("pair0001", "scene_0001.txt")]
    assert io.parse_manifest(io.serialize_manifest(entries)) == entries
    assert io.parse_manifest(io.serialize_manifest([])) == []


def test_ground_truth_roundtrip(rng):
    gts = [io.GroundTruth(f"p{k}", K, random_pose(rng)) for k in range(3)]
    back = io.parse_ground_truth(io.serialize_ground_truth(gts))
    for a, b in zip(gts, back):
        assert a.pair_id == b.pair_id and a.intrinsics == b.intrinsics
        assert torch.equal(a.pose.rotation, b.pose.rotation) and torch.equal(a.pose.translation, b.pose.translation)


def test_estimates_roundtrip(rng):
    ests = [Estimate(random_pose(rng), 17.123456789, "a"), Estimate(None, float("nan"), "b")]
    text = io.serialize_estimates(ests)
    assert "b none none" in text
    back = io.parse_estimates(text)
    assert back[0].confidence == ests[0].confidence and torch.equal(back[0].pose.rotation, ests[0].pose.rotation)
    assert back[1].pose is None and back[1].pair_id == "b"
    assert io.serialize_estimates(back) == text


def test_history_roundtrip():
    recs = [TrainRecord(0, 1.5, 2.25, 0.1, 3, (1.0, 2.0)), TrainRecord(1, 1 / 3, 0.5, 0.0, 1, ())]
    back = io.parse_history(io.serialize_history(recs))
    assert back == recs


def test_report_and_curve_roundtrip():
    rep = EvalReport(0.75, 0.625, 0.1, None, 3.5, 0.75, 4)
    assert io.parse_report(io.serialize_report(rep)) == rep
    r, p = np.array([0.5, 1.0]), np.array([1.0, 0.5])
    r2, p2 = io.parse_curve(io.serialize_curve(r, p))
    assert np.array_equal(r, r2) and np.array_equal(p, p2)


def test_config_echo():
    cfg = RunConfig(seed=4)
    text = io.serialize_manifest([], cfg.to_json())
    assert io.read_config_echo(text) == cfg.to_dict()


@pytest.mark.parametrize("text", [
    "",
    "# metricpose-estimates v2\n",
    "# metricpose-gt v1\n",
    "# metricpose-estimates v1\npair 1.0 1 2 3\n",
    "# metricpose-estimates v1\npair x 1 0 0 0 1 0 0 0 1 0 0 0\n",
    "# metricpose-manifest v1\na b c\n",
])
def test_malformed_input(text):
    with pytest.raises(io.FormatError):
        kind = "manifest" if "manifest" in text else "estimates"
        (io.parse_manifest if kind == "manifest" else io.parse_estimates)(text)


def test_truncated_scene():
    text = io.serialize_scene(generate_scene(SceneConfig(), 0))
    with pytest.raises(io.FormatError):
        io.parse_scene("\n".join(text.splitlines()[:-3]))
    with pytest.raises(io.FormatError):
        io.parse_scene("\n".join(line for line in text.splitlines() if not line.startswith("pose_b")))
