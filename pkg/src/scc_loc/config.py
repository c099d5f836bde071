"""Pipeline configuration: nested dataclasses with YAML loading.

The file format is plain YAML with one section per stage.  Every field
defaults to the standard operating value, so an empty file is a valid
config.  Unknown keys anywhere are hard errors; silent typo absorption has
burned enough runs to be worth the strictness.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .cdraps import OptimConfig
from .csatsf import FilterConfig
from .errors import ConfigError
from .retrieval import RetrievalConfig
from .sgva import SgvaConfig

SEED_ENV_VAR = "SCC_LOC_SEED"


@dataclass
class PipelineConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    sgva: SgvaConfig = field(default_factory=SgvaConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    penalize_failures: bool = False

    def __post_init__(self):
        # one run seed feeds every seeded stage unless set explicitly
        self.optim.seed = self.seed if self.optim.seed == 0 else self.optim.seed


_SECTIONS = {
    "retrieval": RetrievalConfig,
    "sgva": SgvaConfig,
    "filter": FilterConfig,
    "optim": OptimConfig,
}
_SCALARS = {"seed", "penalize_failures"}


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key!r}; known: {sorted(known)}")
    coerced = dict(data)
    if cls is OptimConfig and "weights" in coerced:
        coerced["weights"] = tuple(float(w) for w in coerced["weights"])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {path!r}: {exc}") from exc


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load a pipeline config; a missing path yields pure defaults.

    The ``SCC_LOC_SEED`` environment variable overrides the configured seed.
    """
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded

    for key in raw:
        if key not in _SECTIONS and key not in _SCALARS:
            raise ConfigError(
                f"unknown top-level key {key!r}; known: "
                f"{sorted(_SECTIONS) + sorted(_SCALARS)}"
            )

    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        kwargs[name] = _build_section(cls, section, name)
    cfg = PipelineConfig(
        **kwargs,
        seed=int(raw.get("seed", 0)),
        penalize_failures=bool(raw.get("penalize_failures", False)),
    )
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg.seed = int(env_seed)
        cfg.optim.seed = cfg.seed
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["optim"]["weights"] = list(out["optim"]["weights"])
    return out


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest of the full configuration, for the run manifest."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
