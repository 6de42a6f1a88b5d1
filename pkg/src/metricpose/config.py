"""Run configuration: one flat, validated record shared by every command."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, DomainError
from .objective import CurriculumSchedule, NullHypothesisConfig
from .ransac import RansacConfig
from .toy import SceneConfig, ToyRunConfig, TrainConfig

SEED_ENV = "METRICPOSE_SEED"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # solver
    tau: float = 0.15
    beta: float | None = None
    temperature: float = 0.1
    dustbin: float = 1.0
    j_train: int = 20
    j_test: int = 100
    n_train: int = 5
    n_test: int = 3
    t_max: int = 4
    samplings: int = 20
    solve_set_size: int = 32
    # objective
    vcre_max: float = 120.0
    null_fraction: float = 0.30
    threshold_px: float = 90.0
    curriculum_start: float = 0.30
    curriculum_increment: float = 0.10
    curriculum_interval: int = 4000
    curriculum_max: float = 0.80
    curriculum_warmup_end: int = 20000
    curriculum: bool = True
    # training
    iterations: int = 2000
    set_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.9
    checkpoint_every: int = 500
    train_offsets: bool = True
    score_lr_scale: float = 1.0
    common_random_numbers: bool = False
    init_depth_noise: float = 0.10
    init_descriptor_noise: float = 1.0
    # scenes
    num_scenes: int = 4
    grid_w: int = 8
    grid_h: int = 8
    cell_size: int = 14
    focal: float = 100.0
    depth_min: float = 2.0
    depth_max: float = 5.0
    baseline: float = 1.0
    max_rotation_deg: float = 20.0
    translation: tuple | None = None
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    min_points: int = 20

    def __post_init__(self):
        if self.translation is not None:
            object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        self.validate()

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Settings of the small end-to-end demonstration run."""
        t = ToyRunConfig()
        base = dict(
            set_size=t.set_size,
            lr=t.lr,
            train_offsets=False,
            score_lr_scale=t.score_lr_scale,
            curriculum_interval=t.curriculum_interval,
            curriculum_warmup_end=t.curriculum_warmup_end,
            init_depth_noise=t.depth_noise,
            init_descriptor_noise=t.descriptor_noise,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self):
        try:
            self.ransac_train()
            self.ransac_test()
            self.train_config()
            self.scene_config()
            if not self.threshold_px > 0:
                raise DomainError("threshold_px must be positive")
            if self.solve_set_size < self.n_test:
                raise DomainError("solve_set_size is below the minimal set size")
            if not self.dustbin == self.dustbin:
                raise DomainError("dustbin must be a number")
            if self.num_scenes < 0 or self.checkpoint_every < 0:
                raise DomainError("num_scenes and checkpoint_every must be non-negative")
            if self.init_depth_noise < 0 or self.init_descriptor_noise < 0:
                raise DomainError("initialization noise must be non-negative")
        except (DomainError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def ransac_train(self) -> RansacConfig:
        return RansacConfig(J=self.j_train, n=self.n_train, tau=self.tau, beta=self.beta, t_max=self.t_max,
                            mode="train")

    def ransac_test(self) -> RansacConfig:
        return RansacConfig(J=self.j_test, n=self.n_test, tau=self.tau, beta=self.beta, t_max=self.t_max,
                            mode="test")

    def null(self) -> NullHypothesisConfig:
        return NullHypothesisConfig(self.null_fraction, self.vcre_max)

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.curriculum_start, self.curriculum_increment, self.curriculum_interval,
                                  self.curriculum_max, self.curriculum_warmup_end, self.curriculum)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            set_size=self.set_size,
            samplings=self.samplings,
            ransac=self.ransac_train(),
            null=self.null(),
            temperature=self.temperature,
            curriculum=self.schedule(),
            optimizer=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            snapshot_every=0,
            common_random_numbers=self.common_random_numbers,
            train_offsets=self.train_offsets,
            score_lr_scale=self.score_lr_scale,
        )

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            grid_w=self.grid_w,
            grid_h=self.grid_h,
            cell_size=self.cell_size,
            focal=self.focal,
            depth_range=(self.depth_min, self.depth_max),
            translation=self.translation,
            baseline=self.baseline,
            max_rotation_deg=self.max_rotation_deg,
            noise_sigma=self.noise_sigma,
            outlier_fraction=self.outlier_fraction,
            min_points=self.min_points,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["translation"] is not None:
            d["translation"] = list(d["translation"])
        return d

    def to_json(self) -> str:
        """Canonical one-line form, echoed into every output file."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return replace(self, **_coerce(overrides))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(values: dict) -> dict:
    out = {}
    for key, val in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(RunConfig, key, None)
        if isinstance(val, str) and not isinstance(default, str):
            val = _parse_scalar(key, val)
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{key} expects true/false")
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(val, float) and val.is_integer():
                val = int(val)
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"{key} expects an integer")
        if isinstance(default, float) and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        out[key] = val
    return out


def _parse_scalar(key: str, text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse value {text!r} for {key}") from exc


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None, toy: bool = False,
                env=os.environ) -> RunConfig:
    """Defaults, then ``$METRICPOSE_SEED``, then the JSON file, then explicit overrides."""
    values: dict = {}
    if SEED_ENV in env:
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        values.update(data)
    values.update(overrides or {})
    try:
        base = RunConfig.toy() if toy else RunConfig()
        return base.with_overrides(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
