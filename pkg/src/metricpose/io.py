"""Line-oriented, versioned text formats.

Every file starts with ``# metricpose-<kind> v1``; an optional
``# config {json}`` line echoes the effective configuration.  Floats are
written with 17 significant digits so that parsing restores them exactly.
Poses are 12 numbers: row-major rotation, then translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import MetricPoseError
from .evaluation import Estimate, EvalReport
from .geometry import DTYPE, Intrinsics, Pose
from .toy import SyntheticScene, TrainRecord

VERSION = "v1"
NONE = "none"


class FormatError(MetricPoseError, ValueError):
    pass


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _floats(tokens) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"expected numbers, got {tokens}") from exc


def _header(kind: str, config_json: str | None) -> list[str]:
    lines = [f"# metricpose-{kind} {VERSION}"]
    if config_json is not None:
        lines.append(f"# config {config_json}")
    return lines


def _body(text: str, kind: str) -> tuple[list[str], str | None]:
    """Data lines and the echoed config of a ``kind`` file."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# metricpose-{kind} {VERSION}":
        got = lines[0] if lines else "<empty>"
        raise FormatError(f"expected '# metricpose-{kind} {VERSION}' header, got {got!r}")
    config = None
    body = []
    for line in lines[1:]:
        if line.startswith("# config "):
            config = line[len("# config "):]
        elif line.strip() and not line.startswith("#"):
            body.append(line)
    return body, config


def pose_tokens(pose: Pose | None) -> str:
    return NONE if pose is None else " ".join(fmt(v) for v in pose.to_list())


def parse_pose(tokens) -> Pose | None:
    if len(tokens) == 1 and tokens[0] == NONE:
        return None
    if len(tokens) != 12:
        raise FormatError(f"a pose needs 12 numbers, got {len(tokens)}")
    return Pose.from_list(_floats(tokens))


def _intrinsics_tokens(K: Intrinsics) -> str:
    return " ".join(fmt(v) for v in K.as_tuple()[:4]) + f" {K.width} {K.height}"


def _parse_intrinsics(tokens) -> Intrinsics:
    if len(tokens) != 6:
        raise FormatError("intrinsics need fx fy cx cy width height")
    fx, fy, cx, cy = _floats(tokens[:4])
    return Intrinsics(fx, fy, cx, cy, int(tokens[4]), int(tokens[5]))


# scenes

def serialize_scene(scene: SyntheticScene, config_json: str | None = None) -> str:
    h, w = scene.grid_shape
    lines = _header("scene", config_json)
    lines += [
        f"seed {scene.seed}",
        f"grid {h} {w} {scene.cell_size}",
        f"depth_range {fmt(scene.depth_range[0])} {fmt(scene.depth_range[1])}",
        f"noise_sigma {fmt(scene.noise_sigma)}",
        f"outlier_fraction {fmt(scene.outlier_fraction)}",
        f"intrinsics_a {_intrinsics_tokens(scene.intrinsics_a)}",
        f"pose_a {pose_tokens(scene.pose_a)}",
        f"intrinsics_b {_intrinsics_tokens(scene.intrinsics_b)}",
        f"pose_b {pose_tokens(scene.pose_b)}",
        f"points {len(scene.points3d)}",
    ]
    lines += [" ".join(fmt(v) for v in p) for p in scene.points3d.tolist()]
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> SyntheticScene:
    body, _ = _body(text, "scene")
    fields = {}
    k = 0
    while k < len(body):
        key, *rest = body[k].split()
        k += 1
        if key == "points":
            n = int(rest[0])
            rows = [_floats(line.split()) for line in body[k:k + n]]
            if len(rows) != n or any(len(r) != 3 for r in rows):
                raise FormatError("truncated point list")
            fields["points"] = torch.as_tensor(rows, dtype=DTYPE).reshape(n, 3)
            k += n
        else:
            fields[key] = rest
    try:
        h, w, cell = (int(v) for v in fields["grid"])
        return SyntheticScene(
            points3d=fields["points"],
            intrinsics_a=_parse_intrinsics(fields["intrinsics_a"]),
            pose_a=parse_pose(fields["pose_a"]),
            intrinsics_b=_parse_intrinsics(fields["intrinsics_b"]),
            pose_b=parse_pose(fields["pose_b"]),
            noise_sigma=_floats(fields["noise_sigma"])[0],
            outlier_fraction=_floats(fields["outlier_fraction"])[0],
            grid_shape=(h, w),
            cell_size=cell,
            depth_range=tuple(_floats(fields["depth_range"])),
            seed=int(fields["seed"][0]),
        )
    except KeyError as exc:
        raise FormatError(f"scene file lacks field {exc}") from exc


def scenes_equal(a: SyntheticScene, b: SyntheticScene) -> bool:
    return (
        torch.equal(a.points3d, b.points3d)
        and a.intrinsics_a == b.intrinsics_a
        and a.intrinsics_b == b.intrinsics_b
        and torch.equal(a.pose_a.rotation, b.pose_a.rotation)
        and torch.equal(a.pose_a.translation, b.pose_a.translation)
        and torch.equal(a.pose_b.rotation, b.pose_b.rotation)
        and torch.equal(a.pose_b.translation, b.pose_b.translation)
        and (a.noise_sigma, a.outlier_fraction, a.grid_shape, a.cell_size, a.depth_range, a.seed)
        == (b.noise_sigma, b.outlier_fraction, b.grid_shape, b.cell_size, b.depth_range, b.seed)
    )


# manifest of scene files

def serialize_manifest(entries, config_json: str | None = None) -> str:
    """``entries``: (pair_id, relative file name) pairs."""
    lines = _header("manifest", config_json) + [f"{pid} {name}" for pid, name in entries]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> list[tuple[str, str]]:
    body, _ = _body(text, "manifest")
    out = []
    for line in body:
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"bad manifest line {line!r}")
        out.append((parts[0], parts[1]))
    return out


# ground truth

@dataclass(frozen=True, eq=False)
class GroundTruth:
    pair_id: str
    intrinsics: Intrinsics  # of the query view
    pose: Pose


def serialize_ground_truth(gts, config_json: str | None = None) -> str:
    lines = _header("gt", config_json)
    lines += [f"{g.pair_id} {_intrinsics_tokens(g.intrinsics)} {pose_tokens(g.pose)}" for g in gts]
    return "\n".join(lines) + "\n"


def parse_ground_truth(text: str) -> list[GroundTruth]:
    body, _ = _body(text, "gt")
    out = []
    for line in body:
        t = line.split()
        if len(t) != 19:
            raise FormatError(f"bad ground-truth line {line!r}")
        out.append(GroundTruth(t[0], _parse_intrinsics(t[1:7]), parse_pose(t[7:])))
    return out


# estimates

def serialize_estimates(estimates, config_json: str | None = None) -> str:
    lines = _header("estimates", config_json)
    for e in estimates:
        conf = fmt(e.confidence) if e.pose is not None else NONE
        lines.append(f"{e.pair_id} {conf} {pose_tokens(e.pose)}")
    return "\n".join(lines) + "\n"


def parse_estimates(text: str) -> list[Estimate]:
    body, _ = _body(text, "estimates")
    out = []
    for line in body:
        t = line.split()
        if len(t) == 3 and t[1] == NONE and t[2] == NONE:
            out.append(Estimate(None, float("nan"), t[0]))
        elif len(t) == 14:
            out.append(Estimate(parse_pose(t[2:]), _floats(t[1:2])[0], t[0]))
        else:
            raise FormatError(f"bad estimate line {line!r}")
    return out


# training history

HISTORY_COLUMNS = ("iteration", "loss", "loss_all", "grad_norm", "selected", "scene_losses")


def serialize_history(records, config_json: str | None = None) -> str:
    lines = _header("history", config_json) + ["# " + " ".join(HISTORY_COLUMNS)]
    for r in records:
        scenes = ",".join(fmt(v) for v in r.scene_losses) or "-"
        lines.append(f"{r.iteration} {fmt(r.loss)} {fmt(r.loss_all)} {fmt(r.grad_norm)} {r.selected} {scenes}")
    return "\n".join(lines) + "\n"


def parse_history(text: str) -> list[TrainRecord]:
    body, _ = _body(text, "history")
    out = []
    for line in body:
        t = line.split()
        if len(t) != 6:
            raise FormatError(f"bad history line {line!r}")
        scenes = () if t[5] == "-" else tuple(_floats(t[5].split(",")))
        out.append(TrainRecord(int(t[0]), float(t[1]), float(t[2]), float(t[3]), int(t[4]), scenes))
    return out


# evaluation report and curve

REPORT_KEYS = ("precision", "auc", "median_trans", "median_rot", "median_vcre", "estimate_rate", "num_pairs",
               "tie_break")


def serialize_report(report: EvalReport, config_json: str | None = None) -> str:
    lines = _header("report", config_json)
    for key in REPORT_KEYS:
        v = getattr(report, key)
        if v is None:
            v = NONE
        elif isinstance(v, float):
            v = fmt(v)
        lines.append(f"{key} {v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> EvalReport:
    body, _ = _body(text, "report")
    vals = dict(line.split(None, 1) for line in body)
    try:
        def num(key):
            return None if vals[key] == NONE else float(vals[key])

        return EvalReport(
            precision=num("precision"),
            auc=num("auc"),
            median_trans=num("median_trans"),
            median_rot=num("median_rot"),
            median_vcre=num("median_vcre"),
            estimate_rate=num("estimate_rate"),
            num_pairs=int(vals["num_pairs"]),
            tie_break=vals["tie_break"],
        )
    except KeyError as exc:
        raise FormatError(f"report lacks {exc}") from exc


def serialize_curve(ratios, precisions, config_json: str | None = None) -> str:
    lines = _header("curve", config_json) + ["# ratio precision"]
    lines += [f"{fmt(r)} {fmt(p)}" for r, p in zip(ratios, precisions)]
    return "\n".join(lines) + "\n"


def parse_curve(text: str) -> tuple[np.ndarray, np.ndarray]:
    body, _ = _body(text, "curve")
    rows = np.array([_floats(line.split()) for line in body], dtype=float).reshape(-1, 2)
    return rows[:, 0], rows[:, 1]


def read_config_echo(text: str) -> dict | None:
    for line in text.splitlines()[:3]:
        if line.startswith("# config "):
            return json.loads(line[len("# config "):])
    return None


def write_text(path, text: str):
    Path(path).write_text(text, encoding="utf-8")


def read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")
