"""Run configuration: a JSON tree merged over defaults, with dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from headmotion.core import derive_seed
from headmotion.diffusion import DenoiserConfig, SamplerConfig
from headmotion.synthetic import CLASSES
from headmotion.vae import VaeConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train_per_class: int = 100
    n_eval_per_class: int = 20
    classes: list = field(default_factory=lambda: list(CLASSES))
    amplitude: float = 0.25
    frequency: float = 2.0
    amplitude_jitter: float = 0.2
    frequency_jitter: float = 0.1
    coupling: float = 1.0
    noise_scale: float = 0.01
    T: int = 64
    fps: int = 25
    text_dim: int = 512
    audio_dim: int = 768
    normalize: bool = True

    def validate(self) -> None:
        bad = [c for c in self.classes if c not in CLASSES]
        if bad or not self.classes:
            raise ConfigError(f"data.classes must be a non-empty subset of {list(CLASSES)}, got {self.classes}")
        if self.n_train_per_class < 1 or self.n_eval_per_class < 1:
            raise ConfigError("data.n_train_per_class and data.n_eval_per_class must be >= 1")
        if self.amplitude < 0 or self.coupling < 0 or self.noise_scale < 0:
            raise ConfigError("data.amplitude, data.coupling and data.noise_scale must be >= 0")
        if not 0 <= self.amplitude_jitter < 1 or not 0 <= self.frequency_jitter < 1:
            raise ConfigError("data jitters must lie in [0, 1)")
        if not 0 < self.frequency * (1 + self.frequency_jitter) < self.fps / 2:
            raise ConfigError("data.frequency (with jitter) must lie in (0, fps/2)")
        if self.T < 2 or self.fps <= 0 or self.text_dim < 1 or self.audio_dim < 1:
            raise ConfigError("data.T >= 2, data.fps > 0 and positive feature dims required")


@dataclass
class SampleConfig:
    guidance: float = 7.5
    kind: str = "ancestral"
    steps: int | None = None
    count: int = 1
    seed: int | None = None


@dataclass
class MetricsConfig:
    diversity_pairs: int = 200
    diversity_mode: str = "pairwise"
    probe_frequency: float = 2.0
    probe_threshold: float = 0.05
    probe_band: float = 0.2
    seed: int | None = None

    def validate(self) -> None:
        if self.diversity_pairs < 1:
            raise ConfigError("metrics.diversity_pairs must be >= 1")
        if self.diversity_mode not in ("pairwise", "trace"):
            raise ConfigError("metrics.diversity_mode must be 'pairwise' or 'trace'")
        if self.probe_frequency <= 0 or self.probe_threshold < 0 or not 0 < self.probe_band < 1:
            raise ConfigError("invalid probe settings")


SECTIONS = {
    "data": DataConfig,
    "vae": VaeConfig,
    "pld": DenoiserConfig,
    "sample": SampleConfig,
    "metrics": MetricsConfig,
}

# sub-seeds left null are derived from the global seed with these keys
_SEED_KEYS = {"vae": 11, "pld": 12, "sample": 13, "metrics": 14}


def default_tree() -> dict:
    tree: dict = {"seed": 0}
    for name, cls in SECTIONS.items():
        tree[name] = asdict(cls())
    for name in _SEED_KEYS:
        tree[name]["seed"] = None
    return tree


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(value)


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(base[k], v, path + ".")
        else:
            base[k] = v


@dataclass
class RunConfig:
    tree: dict
    seed: int
    data: DataConfig
    vae: VaeConfig
    pld: DenoiserConfig
    sample: SampleConfig
    metrics: MetricsConfig

    def digest(self) -> str:
        blob = json.dumps(self.tree, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.sample.guidance, self.sample.kind, self.sample.steps, self.sample.seed)


def load_config(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``; validated before returning."""
    tree = default_tree()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        _merge(tree, user)
    for o in overrides:
        apply_override(tree, o)
    if seed is not None:
        tree["seed"] = seed
    return build(tree)


def build(tree: dict) -> RunConfig:
    tree = copy.deepcopy(tree)
    if not isinstance(tree.get("seed"), int) or tree["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    resolved = copy.deepcopy(tree)
    for name, key in _SEED_KEYS.items():
        if resolved[name].get("seed") is None:
            resolved[name]["seed"] = derive_seed(tree["seed"], key) % (2**31)
    sections = {}
    for name, cls in SECTIONS.items():
        known = {f.name for f in fields(cls)}
        unknown = set(resolved[name]) - known
        if unknown:
            raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
        try:
            sections[name] = cls(**resolved[name])
        except TypeError as exc:
            raise ConfigError(f"bad {name} config: {exc}") from exc
    try:
        sections["data"].validate()
        vae, pld = sections["vae"], sections["pld"]
        data = sections["data"]
        if vae.T != data.T:
            raise ConfigError(f"vae.T ({vae.T}) must equal data.T ({data.T})")
        if (pld.n_latent, pld.latent_dim) != (vae.n_latent, vae.latent_dim):
            raise ConfigError("pld.n_latent/latent_dim must match the VAE")
        if (pld.text_dim, pld.audio_dim) != (data.text_dim, data.audio_dim):
            raise ConfigError("pld.text_dim/audio_dim must match data.text_dim/audio_dim")
        vae.validate()
        pld.validate()
        smp = sections["sample"]
        SamplerConfig(smp.guidance, smp.kind, smp.steps, smp.seed).validate(pld.T_diff)
        if smp.count < 1:
            raise ConfigError("sample.count must be >= 1")
        sections["metrics"].validate()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(tree=tree, seed=tree["seed"], **sections)
