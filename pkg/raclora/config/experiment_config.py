import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import yaml

from ..core.optimizers import InnerSolver, Method
from ..core.sketch import SketchDistribution, SketchSide
from ..errors import InvalidConfig, IoError
from . import PRESETS_DIR, Config

logger = logging.getLogger(__name__)

CHAIN_OBJECTIVES = ('counterexample', 'linreg', 'logreg')
FED_OBJECTIVES = ('fed_quadratic', 'fed_linreg')

DEFAULT_SHAPES = {
    'counterexample': (3, 3),
    'linreg': (10, 10),
    'logreg': (10, 10),
    'fed_quadratic': (3, 3),
    'fed_linreg': (4, 4),
}
DEFAULT_REG_LAMBDA = {'linreg': 1e-4, 'logreg': 0.1, 'fed_linreg': 1e-2}

LIST_KEYS = ('methods', 'ranks', 'gamma_factors', 'gamma_sweep_methods')


@dataclass
class ExperimentConfig:
    """Flat experiment description; ``None`` fields are filled by :meth:`resolved`."""

    name: str = 'custom'
    objective: str = 'counterexample'
    data: Optional[str] = None
    data_seed: int = 0
    rows: Optional[int] = None
    cols: Optional[int] = None
    n_pretrain: int = 3000
    n_finetune: int = 1000
    n_samples: int = 2000
    reg_lambda: Optional[float] = None
    noise: float = 0.01
    shift: float = 0.5

    methods: List[str] = field(default_factory=lambda: ['rac_lora'])
    gamma: Optional[float] = None
    gamma_factors: List[float] = field(default_factory=list)
    gamma_sweep_methods: List[str] = field(default_factory=list)
    chain_length: int = 100
    rank: int = 1
    ranks: List[int] = field(default_factory=list)
    alpha: Optional[float] = None  # None means alpha = r
    side: str = 'left'
    distribution: str = 'gaussian'
    inner: str = 'gd'
    inner_steps: int = 1
    sgd_sampler: str = 'uniform'
    sgd_batch: int = 1
    cola_steps: int = 10

    num_clients: int = 4
    cohort_size: Optional[int] = None
    local_gamma: Optional[float] = None
    server_beta: float = 1.0
    heterogeneity: float = 1.0
    samples_per_client: int = 50
    theorem_mode: bool = False

    seed: Optional[int] = None
    num_seeds: int = 1
    output_dir: Optional[str] = None
    workers: int = Config.DEFAULT_WORKERS
    gap_threshold: float = Config.GAP_THRESHOLD
    mc_samples: int = Config.MC_SAMPLES
    fail_on_divergence: bool = False

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'ExperimentConfig':
        return cls().updated(values)

    def updated(self, values: Dict[str, Any]) -> 'ExperimentConfig':
        """Copy with ``values`` applied; comma strings become lists for list keys."""
        unknown = sorted(set(values) - set(self.keys()))
        if unknown:
            raise InvalidConfig(f"Unknown configuration keys: {', '.join(unknown)}")
        clean = {}
        for key, value in values.items():
            if key in LIST_KEYS and isinstance(value, str):
                value = [yaml.safe_load(v.strip()) for v in value.split(',') if v.strip()]
            elif key in LIST_KEYS and not isinstance(value, (list, tuple)):
                value = [value]
            clean[key] = list(value) if isinstance(value, tuple) else value
        return replace(self, **clean)

    @property
    def is_federated(self) -> bool:
        return self.objective in FED_OBJECTIVES

    @property
    def seeds(self) -> List[int]:
        if self.seed is None:
            raise InvalidConfig("Seed is not resolved")
        return list(range(self.seed, self.seed + self.num_seeds))

    @property
    def shape(self):
        return (self.rows, self.cols)

    def resolved(self) -> 'ExperimentConfig':
        """Fill environment and objective dependent defaults, then validate."""
        rows, cols = DEFAULT_SHAPES.get(self.objective, (None, None))
        try:
            cfg = replace(
                self,
                seed=Config.seed() if self.seed is None else int(self.seed),
                output_dir=str(Config.output_dir()) if self.output_dir is None else str(self.output_dir),
                rows=rows if self.rows is None else self.rows,
                cols=cols if self.cols is None else self.cols,
                cohort_size=self.num_clients if self.cohort_size is None else self.cohort_size,
                reg_lambda=(
                    DEFAULT_REG_LAMBDA.get(self.objective, 0.0)
                    if self.reg_lambda is None
                    else float(self.reg_lambda)
                ),
            )
            cfg.validate()
        except (TypeError, ValueError) as e:
            raise InvalidConfig(f"Malformed configuration value: {e}") from e
        return cfg

    def validate(self) -> None:
        if self.objective not in CHAIN_OBJECTIVES + FED_OBJECTIVES:
            raise InvalidConfig(
                f"Unknown objective '{self.objective}', expected one of "
                f"{', '.join(CHAIN_OBJECTIVES + FED_OBJECTIVES)}"
            )
        if self.objective == 'counterexample' and (self.rows, self.cols) != (3, 3):
            raise InvalidConfig("The counterexample objective is fixed to a 3x3 parameter")
        if self.num_seeds < 1:
            raise InvalidConfig("The seed list is empty (num_seeds must be >= 1)")
        if self.seed is not None and self.seed < 0:
            raise InvalidConfig(f"seed must be non-negative, got {self.seed}")
        if not self.methods:
            raise InvalidConfig("At least one method is required")
        for name in list(self.methods) + list(self.gamma_sweep_methods):
            _enum_value(Method, name, 'method')
        _enum_value(InnerSolver, self.inner, 'inner')
        _enum_value(SketchSide, self.side, 'side')
        _enum_value(SketchDistribution, self.distribution, 'distribution')
        for key in (
            'chain_length',
            'rank',
            'inner_steps',
            'sgd_batch',
            'cola_steps',
            'num_clients',
            'workers',
            'mc_samples',
        ):
            if int(getattr(self, key)) < 1:
                raise InvalidConfig(f"{key} must be >= 1, got {getattr(self, key)}")
        if any(int(r) < 1 for r in self.ranks):
            raise InvalidConfig(f"ranks must be positive, got {self.ranks}")
        if self.gamma is not None and not self.gamma > 0:
            raise InvalidConfig(f"gamma must be positive, got {self.gamma}")
        if any(not float(g) > 0 for g in self.gamma_factors):
            raise InvalidConfig(f"gamma_factors must be positive, got {self.gamma_factors}")
        if self.cohort_size is not None and not 1 <= self.cohort_size <= self.num_clients:
            raise InvalidConfig(
                f"cohort_size must lie in [1, {self.num_clients}], got {self.cohort_size}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def _enum_value(enum_cls, value: str, label: str) -> None:
    try:
        enum_cls(value)
    except ValueError:
        allowed = ', '.join(e.value for e in enum_cls)
        raise InvalidConfig(f"Unknown {label} '{value}', expected one of {allowed}") from None


def load_config_file(path: Path) -> Dict[str, Any]:
    """Read a flat key-value YAML (or JSON) document."""
    path = Path(path)
    try:
        with open(path, 'r') as f:
            values = yaml.safe_load(f)
    except OSError as e:
        raise IoError(f"Cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise InvalidConfig(f"Config file {path} is not valid YAML: {e}") from e
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise InvalidConfig(f"Config file {path} must contain a key-value mapping")
    return values


def parse_set_args(pairs: Optional[Iterable[str]]) -> Dict[str, Any]:
    """Turn ``key=value`` strings into a dict, parsing values as YAML scalars."""
    values = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition('=')
        if not sep or not key.strip():
            raise InvalidConfig(f"Override '{pair}' is not of the form key=value")
        try:
            values[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as e:
            raise InvalidConfig(f"Cannot parse override '{pair}': {e}") from e
    return values


class ExperimentConfigManager:
    """Preset manager that loads and provides access to experiment presets."""

    def __init__(self, presets_dir: Path = None):
        """
        Initialize the preset manager.

        Args:
            presets_dir: Directory containing preset files. If None, uses the
                         'presets' directory shipped with the package.
        """
        self.presets_dir = PRESETS_DIR if presets_dir is None else Path(presets_dir)
        self.presets: Dict[str, Dict[str, Any]] = {}
        self.load_all_configs()

    def load_all_configs(self) -> None:
        """Load all preset files from the presets directory."""
        if not self.presets_dir.exists():
            raise IoError(f"Preset directory does not exist: {self.presets_dir}")

        for file_path in sorted(self.presets_dir.glob('*.json')):
            try:
                with open(file_path, 'r') as f:
                    preset = json.load(f)
                preset_id = preset.get('id')
                if preset_id:
                    self.presets[preset_id] = preset
            except Exception as e:
                logger.error(f"Error loading preset file {file_path}: {e}")

    def get_preset(self, name: str) -> Optional[Dict[str, Any]]:
        """Get a specific preset definition."""
        return self.presets.get(name)

    def list_presets(self) -> List[Dict[str, Any]]:
        """List all presets with basic information."""
        return [
            {
                'id': preset_id,
                'name': preset.get('name', preset_id),
                'description': preset.get('description', ''),
            }
            for preset_id, preset in self.presets.items()
        ]

    def save_preset(self, name: str, config: ExperimentConfig, description: str = '') -> bool:
        """Save an experiment configuration as a preset file."""
        try:
            preset = {
                'id': name,
                'name': name,
                'description': description,
                'config': {k: v for k, v in config.to_dict().items() if v is not None},
            }
            with open(self.presets_dir / f"{name}.json", 'w') as f:
                json.dump(preset, f, indent=4)
            self.presets[name] = preset
            return True
        except Exception as e:
            logger.error(f"Error saving preset {name}: {e}")
            return False

    def build(
        self,
        preset: Optional[str] = None,
        config_file: Optional[Path] = None,
        flags: Optional[Dict[str, Any]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> ExperimentConfig:
        """Resolve preset -> config file -> CLI flags -> ``--set`` overrides."""
        cfg = ExperimentConfig()
        if preset is not None:
            definition = self.get_preset(preset)
            if definition is None:
                known = ', '.join(sorted(self.presets))
                raise InvalidConfig(f"Unknown preset '{preset}', available: {known}")
            cfg = cfg.updated({'name': preset, **definition.get('config', {})})
        if config_file is not None:
            cfg = cfg.updated(load_config_file(config_file))
        if flags:
            cfg = cfg.updated({k: v for k, v in flags.items() if v is not None})
        if overrides:
            cfg = cfg.updated(overrides)
        return cfg.resolved()


# Create a singleton instance
experiment_config = ExperimentConfigManager()
