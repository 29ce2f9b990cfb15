"""Run configuration: one JSON document with a section per stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .attack import AttackConfig
from .tabular import GeneratorConfig

PHASES = ("train", "dev", "final")
TRACKS = ("white_box", "black_box")


class ConfigError(ValueError):
    pass


def derive_seed(master: int, *stage) -> int:
    """Stable 63-bit seed for ``stage`` under ``master``."""
    key = "/".join([str(master), *map(str, stage)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass
class ChallengeSpec:
    train_phase: int = 30
    dev_phase: int = 20
    final_phase: int = 20
    members_per_model: int = 64
    challenge_queries_per_model: int = 128
    train_challenge_queries_per_model: int = 32
    synth_per_model: int | None = None
    tracks: list[str] = field(default_factory=lambda: list(TRACKS))

    def __post_init__(self):
        for name in ("train_phase", "dev_phase", "final_phase", "members_per_model"):
            if getattr(self, name) < 1:
                raise ConfigError(f"challenge.{name} must be >= 1")
        for name in ("challenge_queries_per_model", "train_challenge_queries_per_model"):
            q = getattr(self, name)
            if q < 2 or q % 2:
                raise ConfigError(f"challenge.{name} must be a positive even number")
            if q // 2 > self.members_per_model:
                raise ConfigError(f"challenge.{name} needs more members than a model has")
        if self.train_challenge_queries_per_model // 2 >= self.members_per_model:
            raise ConfigError("train-phase models need members left over for attack training")
        bad = set(self.tracks) - set(TRACKS)
        if bad or not self.tracks:
            raise ConfigError(f"challenge.tracks must be a non-empty subset of {TRACKS}")

    def phase_of(self, model_id: str) -> str:
        return model_id.split("_", 1)[0]

    def ids_for(self, phase: str) -> list[str]:
        n = {"train": self.train_phase, "dev": self.dev_phase, "final": self.final_phase}[phase]
        return [f"{phase}_{i:03d}" for i in range(n)]

    def model_ids(self) -> list[str]:
        return [m for p in PHASES for m in self.ids_for(p)]

    def queries_for(self, phase: str) -> int:
        return self.train_challenge_queries_per_model if phase == "train" else self.challenge_queries_per_model

    @property
    def n_synth(self) -> int:
        return self.synth_per_model if self.synth_per_model is not None else self.members_per_model


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    embed_dim: int = 16
    steps: int = 3000
    batch: int = 64
    lr: float = 1e-3


@dataclass
class EvaluationConfig:
    fpr_levels: list[float] = field(default_factory=lambda: [0.10])


@dataclass
class RunConfig:
    master_seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    baselines: bool = True
    challenge: ChallengeSpec = field(default_factory=ChallengeSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig.default)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw = {k: obj[k] for k in ("master_seed", "out", "workers", "baselines") if k in obj}
            if "challenge" in obj:
                kw["challenge"] = ChallengeSpec(**obj["challenge"])
            if "generator" in obj:
                kw["generator"] = GeneratorConfig.from_dict(obj["generator"])
            if "diffusion" in obj:
                kw["diffusion"] = DiffusionConfig(**obj["diffusion"])
            if "attack" in obj:
                kw["attack"] = AttackConfig.from_dict(obj["attack"])
            if "evaluation" in obj:
                kw["evaluation"] = EvaluationConfig(**obj["evaluation"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        T = self.diffusion.T
        ts = list(self.attack.timesteps) + list(self.attack.naive_timesteps) + list(self.attack.best_noise_timesteps)
        if any(t < 0 or t >= T for t in ts):
            raise ConfigError(f"attack timesteps must lie in [0, {T})")
        if self.attack.secmi_t + self.attack.secmi_stride >= T:
            raise ConfigError("attack.secmi_t leaves no room for a forward step")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.attack.n_eps < 1:
            raise ConfigError("attack.n_eps must be >= 1")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(obj)


def bundled_config(name: str = "tiny") -> RunConfig:
    text = resources.files("tabmia").joinpath("configs").joinpath(f"{name}.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def bundled_config_path(name: str = "tiny") -> Path:
    return Path(str(resources.files("tabmia").joinpath("configs").joinpath(f"{name}.json")))
