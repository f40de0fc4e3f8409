"""
ControlSR Run Configuration
Strictly validated JSON run configuration with defaults.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from src.errors import ConfigError, ControlSRError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DegradeConfig:
    """Single-order synthetic degradation settings"""
    blur_sigma: Tuple[float, float] = (0.2, 1.5)
    scale: int = 4
    noise_sigma: Tuple[float, float] = (0.0, 0.03)
    jpeg_quality: Tuple[float, float] = (60.0, 95.0)
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a training or inference run"""
    seed: int = 0
    # noise schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # sampling / latent space adjustment
    steps: int = 50
    alpha: float = 0.01
    beta: float = 0.01
    early_frac: float = 0.4
    late_frac: float = 0.8
    # optimization
    iters: int = 5000
    batch: int = 4
    lr: float = 5e-5
    image_size: int = 64
    dataset_size: int = 4
    checkpoint_every: int = 1000
    log_every: int = 50
    audit_freeze: bool = True
    # architecture
    vae_widths: Tuple[int, ...] = (32, 64, 128)
    latent_channels: int = 4
    vae_kl_weight: float = 1e-6
    unet_width: int = 64
    time_dim: int = 128
    cond_dim: int = 128
    heads: int = 4
    key_window: int = 4
    # low-rank adaptation
    vae_lora_rank: int = 16
    unet_lora_rank: int = 16
    lora_scale: float = 1.0
    use_vae_lora: bool = True
    use_unet_lora: bool = True
    # branch ablations
    use_gspm: bool = True
    dpm_cross_attn: bool = True
    dpm_window_partition: bool = True
    dpm_only: bool = False
    degrade: DegradeConfig = field(default_factory=DegradeConfig)

    @property
    def gspm_enabled(self) -> bool:
        return self.use_gspm and not self.dpm_only

    @property
    def cross_attn_enabled(self) -> bool:
        return self.dpm_cross_attn and not self.dpm_only

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["vae_widths"] = list(self.vae_widths)
        data["degrade"] = {k: list(v) if isinstance(v, tuple) else v for k, v in data["degrade"].items()}
        return data


def _positive(x) -> bool:
    return x > 0


def _non_negative(x) -> bool:
    return x >= 0


# u64 in the checkpoint trailer and torch.manual_seed
MAX_SEED = 2 ** 64 - 1


def _seed(x) -> bool:
    return 0 <= x <= MAX_SEED


def _unit(x) -> bool:
    return 0.0 <= x <= 1.0


def _open_unit(x) -> bool:
    return 0.0 < x < 1.0


# key -> (kind, predicate, description of the valid range)
_Rule = Tuple[str, Optional[Callable[[Any], bool]], str]

_RUN_RULES: Dict[str, _Rule] = {
    "seed": ("int", _seed, "in [0, 2**64 - 1]"),
    "T": ("int", _positive, ">= 1"),
    "beta_start": ("float", _open_unit, "in (0, 1)"),
    "beta_end": ("float", _open_unit, "in (0, 1)"),
    "steps": ("int", _positive, ">= 1"),
    "alpha": ("float", _non_negative, ">= 0"),
    "beta": ("float", _non_negative, ">= 0"),
    "early_frac": ("float", _unit, "in [0, 1]"),
    "late_frac": ("float", _unit, "in [0, 1]"),
    "iters": ("int", _non_negative, ">= 0"),
    "batch": ("int", _positive, ">= 1"),
    "lr": ("float", _non_negative, ">= 0"),
    "image_size": ("int", lambda x: x > 0 and x % 8 == 0, "a positive multiple of 8"),
    "dataset_size": ("int", _positive, ">= 1"),
    "checkpoint_every": ("int", _non_negative, ">= 0 (0 disables)"),
    "log_every": ("int", _positive, ">= 1"),
    "audit_freeze": ("bool", None, ""),
    "vae_widths": ("int_list", lambda xs: len(xs) == 3 and all(x > 0 for x in xs), "three positive widths"),
    "latent_channels": ("int", _positive, ">= 1"),
    "vae_kl_weight": ("float", _non_negative, ">= 0"),
    "unet_width": ("int", _positive, ">= 1"),
    "time_dim": ("int", lambda x: x > 0 and x % 2 == 0, "a positive even number"),
    "cond_dim": ("int", _positive, ">= 1"),
    "heads": ("int", _positive, ">= 1"),
    "key_window": ("int", _positive, ">= 1"),
    "vae_lora_rank": ("int", _positive, ">= 1"),
    "unet_lora_rank": ("int", _positive, ">= 1"),
    "lora_scale": ("float", None, ""),
    "use_vae_lora": ("bool", None, ""),
    "use_unet_lora": ("bool", None, ""),
    "use_gspm": ("bool", None, ""),
    "dpm_cross_attn": ("bool", None, ""),
    "dpm_window_partition": ("bool", None, ""),
    "dpm_only": ("bool", None, ""),
}

_DEGRADE_RULES: Dict[str, _Rule] = {
    "blur_sigma": ("range", _non_negative, "a [lo, hi] pair with 0 <= lo <= hi"),
    "scale": ("int", lambda x: x in (1, 2, 4), "one of 1, 2, 4"),
    "noise_sigma": ("range", _non_negative, "a [lo, hi] pair with 0 <= lo <= hi"),
    "jpeg_quality": ("range", lambda x: 1 <= x <= 100, "a [lo, hi] pair within [1, 100]"),
    "seed": ("int", _seed, "in [0, 2**64 - 1]"),
}


def _coerce(key: str, value: Any, rule: _Rule) -> Any:
    kind, check, valid = rule

    def is_int(v):
        return isinstance(v, int) and not isinstance(v, bool)

    def is_num(v):
        return (is_int(v) or isinstance(v, float)) and math.isfinite(v)

    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if kind == "int":
        if not is_int(value):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        out = value
    elif kind == "float":
        if not is_num(value):
            raise ConfigError(key, f"expected a number, got {value!r}")
        out = float(value)
    elif kind == "int_list":
        if not isinstance(value, list) or not all(is_int(v) for v in value):
            raise ConfigError(key, f"expected a list of integers, got {value!r}")
        out = tuple(value)
    elif kind == "range":
        if not isinstance(value, list) or len(value) != 2 or not all(is_num(v) for v in value):
            raise ConfigError(key, f"expected a [lo, hi] pair of numbers, got {value!r}")
        lo, hi = float(value[0]), float(value[1])
        if lo > hi or (check and not (check(lo) and check(hi))):
            raise ConfigError(key, f"must be {valid}, got {value!r}")
        return (lo, hi)
    else:  # pragma: no cover - rule table typo
        raise AssertionError(kind)
    if check is not None and not check(out):
        raise ConfigError(key, f"must be {valid}, got {value!r}")
    return out


def _split_degrade(raw: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Separate run keys from degrade keys (nested object or 'degrade.' prefix)"""
    run, degrade = {}, {}
    for key, value in raw.items():
        if key == "degrade":
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            for sub_key, sub_value in value.items():
                if isinstance(sub_value, dict):
                    raise ConfigError(f"degrade.{sub_key}", "nesting deeper than two levels")
                degrade[sub_key] = sub_value
        elif key.startswith("degrade."):
            degrade[key[len("degrade."):]] = value
        else:
            if isinstance(value, dict):
                raise ConfigError(key, "unexpected nested object")
            run[key] = value
    return run, degrade


def config_from_dict(raw: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Validate a raw mapping and overlay it on defaults (or on `base`)"""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", f"expected a JSON object, got {type(raw).__name__}")
    base = base or RunConfig()
    run_raw, degrade_raw = _split_degrade(raw)

    run_values = {}
    for key, value in run_raw.items():
        if key not in _RUN_RULES:
            raise ConfigError(key, "unknown key")
        run_values[key] = _coerce(key, value, _RUN_RULES[key])
    degrade_values = {}
    for key, value in degrade_raw.items():
        if key not in _DEGRADE_RULES:
            raise ConfigError(f"degrade.{key}", "unknown key")
        degrade_values[key] = _coerce(f"degrade.{key}", value, _DEGRADE_RULES[key])

    config = replace(base, degrade=replace(base.degrade, **degrade_values), **run_values)
    if config.beta_start > config.beta_end:
        raise ConfigError("beta_start", f"must not exceed beta_end ({config.beta_end})")
    if config.early_frac > config.late_frac:
        raise ConfigError("early_frac", f"must not exceed late_frac ({config.late_frac})")
    if config.steps > config.T:
        raise ConfigError("steps", f"must not exceed T ({config.T})")
    if config.image_size % (8 * config.degrade.scale):
        raise ConfigError("image_size", f"must be divisible by 8*scale = {8 * config.degrade.scale}")
    return config


def load_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a JSON run configuration"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ControlSRError(f"failed to read config {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise ConfigError("<root>", f"{path} is not UTF-8: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"{path} is not valid JSON: {e}") from e
    config = config_from_dict(raw)
    logger.info(f"Loaded config {path} ({len(raw)} keys overridden)")
    return config


def dump_config(path: Union[str, Path], config: RunConfig) -> None:
    """Write a config as JSON; load_config(dump_config(c)) == c"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise ControlSRError(f"failed to write config {path}: {e}") from e


def sidecar_path(checkpoint_path: Union[str, Path]) -> Path:
    """Config sidecar stored next to a checkpoint"""
    return Path(checkpoint_path).with_suffix(".json")


def load_sidecar(checkpoint_path: Union[str, Path]) -> RunConfig:
    path = sidecar_path(checkpoint_path)
    if not path.exists():
        logger.warning(f"No config sidecar at {path}; assuming default architecture")
        return RunConfig()
    return load_config(path)


assert {f.name for f in fields(RunConfig)} == set(_RUN_RULES) | {"degrade"}
assert {f.name for f in fields(DegradeConfig)} == set(_DEGRADE_RULES)
