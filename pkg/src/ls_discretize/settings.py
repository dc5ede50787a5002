"""
⚙️ Configuration for ls-discretize

Two layers:

* ``Settings``: numerical defaults (solver tolerances, time steps, block
  size, significance level). Defaults live in ``ls_discretize_config.yaml``
  and can be overridden by ``LS_*`` environment variables, with ``.env``
  files picked up through python-dotenv.
* Experiment configs: TOML (primary), JSON or YAML files validated by the
  pydantic models below. ``--override key.path=value`` edits are applied to
  the raw mapping before validation.
"""

import os
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .debug_utils import ConfigError, get_logger

load_dotenv()

logger = get_logger(__name__)

# ============================================================================
# ⚙️ NUMERICAL SETTINGS
# ============================================================================

DEFAULT_CONFIG_NAME = "ls_discretize_config.yaml"


def _find_default_config() -> Optional[Path]:
    explicit = os.getenv("LS_DISCRETIZE_CONFIG")
    if explicit:
        return Path(explicit)
    for candidate in (Path.cwd() / DEFAULT_CONFIG_NAME,
                      Path(__file__).resolve().parents[2] / DEFAULT_CONFIG_NAME):
        if candidate.exists():
            return candidate
    return None


class Settings:
    """Numerical defaults with YAML and environment overrides"""

    # Linear algebra
    DIRECT_SOLVE_LIMIT: int = 50_000
    ITERATIVE_RTOL: float = 1e-12
    RESIDUAL_CONTRACT: float = 1e-10
    PRUNE_THRESHOLD: float = 1e-15
    LEAK_TOLERANCE: float = 1e-6
    INTERIOR_LEAK: float = 1e-9

    # Diffusion
    DT_LOW_DIM: float = 1e-4
    DT_D3: float = 2.5e-4
    T_MAX: float = 100.0
    BLOCK_SIZE: int = 1024
    TIMEOUT_BOUND: float = 0.01
    SNAP_TOLERANCE: float = 1e-9

    # LS recursion
    LS_TOL: float = 1e-3
    ROUND_SLACK: int = 10
    HARNACK_MARGIN: float = 1.05
    SMOOTHING_BINS: float = 1.5

    # Statistics
    ALPHA: float = 0.01
    Z_SIGMA: float = 3.0

    # Runtime
    WORKERS: int = int(os.getenv("LS_DISCRETIZE_WORKERS", "1"))
    SEED: Optional[int] = int(os.environ["LS_DISCRETIZE_SEED"]) if os.getenv("LS_DISCRETIZE_SEED") else None

    _ENV_PREFIX = "LS_NUMERICS_"

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        path = Path(config_path) if config_path else _find_default_config()
        self.source: Optional[str] = None
        if path is not None and path.exists():
            self._apply(self._read_numerics(path))
            self.source = str(path)
        self._apply_env()

    @staticmethod
    def _read_numerics(path: Path) -> Dict[str, Any]:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            line = getattr(getattr(e, "problem_mark", None), "line", None)
            raise ConfigError(f"Cannot parse {path}: {e}",
                              {"path": str(path), "line": None if line is None else line + 1})
        return raw.get("numerics", {}) or {}

    def _apply(self, values: Dict[str, Any]):
        for key, value in values.items():
            attr = key.upper()
            if not hasattr(type(self), attr):
                raise ConfigError(f"Unknown numerics setting: {key}", {"field": f"numerics.{key}"})
            current = getattr(type(self), attr)
            setattr(self, attr, type(current)(value) if current is not None else value)

    def _apply_env(self):
        for attr in dir(type(self)):
            if not attr.isupper() or attr.startswith("_"):
                continue
            env_value = os.getenv(self._ENV_PREFIX + attr)
            if env_value is None:
                continue
            current = getattr(self, attr)
            setattr(self, attr, type(current)(env_value) if current is not None else int(env_value))

    def default_dt(self, d: int) -> float:
        return self.DT_D3 if d >= 3 else self.DT_LOW_DIM

    def as_dict(self) -> Dict[str, Any]:
        return {attr: getattr(self, attr) for attr in sorted(dir(type(self)))
                if attr.isupper() and not attr.startswith("_")}


settings = Settings()

# ============================================================================
# 📋 EXPERIMENT CONFIG MODELS
# ============================================================================

CONTINUOUS_FAMILIES = ("torus-cover", "torus-cover-d1", "torus-cover-d2", "torus-cover-d3")
DISCRETE_FAMILIES = ("zd-lattice", "free-group-tree", "sublattice-orbit",
                     "cycle", "biased-line", "dihedral-line", "explicit")


class ModelSpec(BaseModel):
    """Model family and its parameters"""
    family: str
    d: Optional[int] = None
    # ln phi = sum a * cos(2 pi k.x); entries are [k_1, ..., k_d, a]
    phi: List[List[float]] = Field(default_factory=list)
    radius: int = 10
    modulus: int = 2
    n: int = 7
    lazy: bool = False
    bias: float = 1.0
    transitions: Optional[List[List[float]]] = None
    symmetric: Optional[bool] = None
    dt: Optional[float] = None
    t_max: Optional[float] = None

    @field_validator("family")
    @classmethod
    def known_family(cls, v):
        if v not in CONTINUOUS_FAMILIES + DISCRETE_FAMILIES:
            raise ValueError(f"unknown model family '{v}'")
        return v

    @field_validator("d")
    @classmethod
    def dimension_range(cls, v):
        if v is not None and not 1 <= v <= 3:
            raise ValueError("d must be 1, 2 or 3")
        return v

    @model_validator(mode="after")
    def resolve_dimension(self):
        if self.family.startswith("torus-cover-d"):
            preset = int(self.family[-1])
            if self.d is not None and self.d != preset:
                raise ValueError(f"family {self.family} fixes d={preset}")
            self.d = preset
        if self.family == "torus-cover" and self.d is None:
            raise ValueError("torus-cover needs d")
        for term in self.phi:
            if self.d is not None and len(term) != self.d + 1:
                raise ValueError(f"phi term {term} needs {self.d} wave numbers and one amplitude")
        return self

    @property
    def is_continuous(self) -> bool:
        return self.family in CONTINUOUS_FAMILIES


class LSDataSpec(BaseModel):
    """LS-data geometry for the continuous engine"""
    f_radius: Optional[float] = None
    v_radius: float = 0.3
    spacing: int = 1
    center: Optional[List[float]] = None
    harnack: Optional[float] = None
    harnack_margin: float = 1.05
    balance: Optional[float] = None
    n_bins: Optional[int] = None

    @field_validator("v_radius", "harnack_margin")
    @classmethod
    def positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("spacing")
    @classmethod
    def positive_spacing(cls, v):
        if v < 1:
            raise ValueError("spacing must be a positive integer")
        return v


class ExperimentConfig(BaseModel):
    """One experiment: model, data, suite and sampling parameters"""
    model: ModelSpec
    ls_data: Union[LSDataSpec, Literal["auto-balanced"], None] = None
    suite: Optional[str] = None
    operation: Optional[str] = None
    n_paths: int = 10_000
    seed: Optional[int] = None
    workers: int = 1
    out: str = "runs/latest"
    dump_events: bool = False
    params: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("n_paths", "workers")
    @classmethod
    def at_least_one(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("seed")
    @classmethod
    def unsigned_seed(cls, v):
        if v is not None and not 0 <= v < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        return v

    @model_validator(mode="after")
    def one_target(self):
        if self.suite is None and self.operation is None:
            raise ValueError("config needs a suite or an operation")
        return self


class SuiteEntry(BaseModel):
    """One check; a missing model means the experiment config's model"""
    check: str
    model: Optional[str] = None
    params: Dict[str, Any] = Field(default_factory=dict)


class SuiteManifest(BaseModel):
    """JSON suite manifest: (check, model id, parameters) entries"""
    name: str
    entries: List[SuiteEntry]


# ============================================================================
# 📥 LOADING
# ============================================================================

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``a.b.c=value`` edits; values are JSON when they parse as JSON."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not KEY=VAL", {"override": item})
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}", {"path": str(path)})
    text = path.read_text(encoding="utf-8")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            return tomllib.loads(text)
        if suffix == ".json":
            return json.loads(text)
        if suffix in (".yaml", ".yml"):
            return yaml.safe_load(text) or {}
    except tomllib.TOMLDecodeError as e:
        line = getattr(e, "lineno", None)
        raise ConfigError(f"Malformed TOML in {path}: {e}", {"path": str(path), "line": line})
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed JSON in {path}: {e.msg}", {"path": str(path), "line": e.lineno})
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"Malformed YAML in {path}: {e}",
                          {"path": str(path), "line": None if mark is None else mark.line + 1})
    raise ConfigError(f"Unsupported config format '{suffix}'", {"path": str(path)})


def _validation_error(e: ValidationError, source: str) -> ConfigError:
    first = e.errors()[0]
    field_path = ".".join(str(p) for p in first["loc"])
    return ConfigError(f"Invalid config {source}: {field_path}: {first['msg']}",
                       {"path": source, "field": field_path, "errors": len(e.errors())})


def load_experiment_config(path: Union[str, Path], overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse, override and validate an experiment config."""
    data = apply_overrides(read_config_file(path), overrides)
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise _validation_error(e, str(path))
    logger.debug(f"📥 Loaded experiment config {path}")
    return config


def load_suite_manifest(path: Union[str, Path]) -> SuiteManifest:
    data = read_config_file(path)
    try:
        return SuiteManifest.model_validate(data)
    except ValidationError as e:
        raise _validation_error(e, str(path))


def resolve_seed(explicit: Optional[int], config_seed: Optional[int]) -> int:
    """CLI flag, then config, then LS_DISCRETIZE_SEED, then 0."""
    for candidate in (explicit, config_seed):
        if candidate is not None:
            return int(candidate)
    env_seed = os.getenv("LS_DISCRETIZE_SEED")
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f"LS_DISCRETIZE_SEED is not an integer: {env_seed!r}",
                              {"field": "LS_DISCRETIZE_SEED"})
    return 0


def phi_terms(spec: ModelSpec) -> Tuple[Tuple[Tuple[int, ...], float], ...]:
    """Split raw [k..., a] rows into (wave vector, amplitude) pairs."""
    return tuple((tuple(int(k) for k in row[:-1]), float(row[-1])) for row in spec.phi)
