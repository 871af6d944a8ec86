"""Run configuration: sectioned config files, validation, defaults, echoes.

The file grammar is a mapping with up to three sections, all optional:

    scenario:    # ScenarioConfig fields (n_bs, m_users, ...)
    algorithm:   # beta_th, i_iter, large_threshold, blur: {width, q}
    run:         # realizations, mode, output_dir, emit_plots, workers, base_seed

Anything omitted falls back to the full-scale simulation defaults. A
``manifest.json`` written by a previous run parses too (its ``config`` echo is
read back), so runs can be replayed from their own output directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .scenario import ScenarioConfig, _scenario_to_dict

MODES = ("df", "ablation", "both")


def default_scenario() -> ScenarioConfig:
    """Full-scale setup used when the config file leaves the scenario out."""
    return ScenarioConfig(
        n_bs=64,
        m_users=2,
        pilot_len=2,
        n_subcarriers=40,
        snr_db=10.0,
        aoa_range_deg=(-80.0, 80.0),
        angular_spread_deg=2.0,
        paths_per_user=3,
        drift_deg_per_step=0.5,
        t_steps=50,
        env_change_at=None,
        rng_seed=0,
    )


@dataclass(frozen=True)
class BlurOptions:
    """Prediction-blur settings; ``q`` falls back to the tracker default."""

    width: float
    q: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "width", float(self.width))
        if not (math.isfinite(self.width) and self.width > 0):
            raise ValueError(f"blur.width: must be a positive finite number, got {self.width}")
        if self.q is not None:
            object.__setattr__(self, "q", float(self.q))
            if not (math.isfinite(self.q) and self.q > 0):
                raise ValueError(f"blur.q: must be a positive finite number, got {self.q}")


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment run needs, validated on construction."""

    scenario: ScenarioConfig = field(default_factory=default_scenario)
    beta_th: float = 1e-3
    i_iter: int = 1000
    realizations: int = 100
    mode: str = "df"
    large_threshold: float = 1e3
    blur: Optional[BlurOptions] = None
    output_dir: str = "results"
    emit_plots: bool = False
    workers: int = 1
    base_seed: int = 0

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "beta_th", float(self.beta_th))
        set_(self, "i_iter", int(self.i_iter))
        set_(self, "realizations", int(self.realizations))
        set_(self, "mode", str(self.mode))
        set_(self, "large_threshold", float(self.large_threshold))
        set_(self, "output_dir", str(self.output_dir))
        set_(self, "emit_plots", bool(self.emit_plots))
        set_(self, "workers", int(self.workers))
        set_(self, "base_seed", int(self.base_seed))

        def fail(name, why):
            raise ValueError(f"{name}: {why}")

        if not (math.isfinite(self.beta_th) and self.beta_th > 0):
            fail("beta_th", f"must be a positive finite number, got {self.beta_th}")
        if self.i_iter < 1:
            fail("i_iter", f"must be >= 1, got {self.i_iter}")
        if self.realizations < 1:
            fail("realizations", f"must be >= 1, got {self.realizations}")
        if self.mode not in MODES:
            fail("mode", f"must be one of {'|'.join(MODES)}, got {self.mode!r}")
        if not (math.isfinite(self.large_threshold) and self.large_threshold > 0):
            fail("large_threshold", f"must be a positive finite number, got {self.large_threshold}")
        if self.workers < 1:
            fail("workers", f"must be >= 1, got {self.workers}")
        if self.base_seed < 0:
            fail("base_seed", f"must be >= 0, got {self.base_seed}")

    @property
    def modes(self) -> tuple:
        """Concrete mode labels this run executes."""
        return ("df", "ablation") if self.mode == "both" else (self.mode,)


_SCENARIO_KEYS = frozenset(f.name for f in fields(ScenarioConfig))
_ALGORITHM_KEYS = frozenset(("beta_th", "i_iter", "large_threshold", "blur"))
_RUN_KEYS = frozenset(("realizations", "mode", "output_dir", "emit_plots", "workers", "base_seed"))
_SECTIONS = ("scenario", "algorithm", "run")


def _section(data: dict, name: str, allowed: frozenset) -> dict:
    raw = data.get(name)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ValueError(f"{name}: section must be a mapping, got {type(raw).__name__}")
    for key in raw:
        if key not in allowed:
            raise ValueError(f"{name}.{key}: unknown key (expected one of {', '.join(sorted(allowed))})")
    return dict(raw)


def _parse_blur(raw) -> Optional[BlurOptions]:
    if raw is None:
        return None
    if isinstance(raw, BlurOptions):
        return raw
    if not isinstance(raw, dict):
        raise ValueError(f"algorithm.blur: must be a mapping, got {type(raw).__name__}")
    for key in raw:
        if key not in ("width", "q"):
            raise ValueError(f"algorithm.blur.{key}: unknown key (expected width, q)")
    if "width" not in raw:
        raise ValueError("algorithm.blur.width: required when blur is configured")
    return BlurOptions(width=raw["width"], q=raw.get("q"))


def config_from_dict(data: dict) -> RunConfig:
    """Build a validated RunConfig from a sectioned mapping (file contents)."""
    if not isinstance(data, dict):
        raise ValueError(f"config root must be a mapping of sections, got {type(data).__name__}")
    for key in data:
        if key not in _SECTIONS:
            raise ValueError(f"{key}: unknown section (expected one of {', '.join(_SECTIONS)})")

    overrides = _section(data, "scenario", _SCENARIO_KEYS)
    scenario_kwargs = _scenario_to_dict(default_scenario())
    scenario_kwargs.update(overrides)
    try:
        scenario = ScenarioConfig(**scenario_kwargs)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"scenario.{exc}") from exc

    kwargs = _section(data, "algorithm", _ALGORITHM_KEYS)
    kwargs["blur"] = _parse_blur(kwargs.get("blur"))
    kwargs.update(_section(data, "run", _RUN_KEYS))
    return RunConfig(scenario=scenario, **kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain nested-dict echo of a RunConfig; parses back to an equal config."""
    algorithm = {
        "beta_th": cfg.beta_th,
        "i_iter": cfg.i_iter,
        "large_threshold": cfg.large_threshold,
    }
    if cfg.blur is not None:
        blur = {"width": cfg.blur.width}
        if cfg.blur.q is not None:
            blur["q"] = cfg.blur.q
        algorithm["blur"] = blur
    return {
        "scenario": _scenario_to_dict(cfg.scenario),
        "algorithm": algorithm,
        "run": {
            "realizations": cfg.realizations,
            "mode": cfg.mode,
            "output_dir": cfg.output_dir,
            "emit_plots": cfg.emit_plots,
            "workers": cfg.workers,
            "base_seed": cfg.base_seed,
        },
    }


def parse_config(path) -> RunConfig:
    """Read a config file (or a run manifest) into a validated RunConfig.

    YAML files hold the sectioned grammar above. JSON files are treated as
    run manifests and parsed through their ``config`` echo.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text) or {}
    else:
        data = yaml.safe_load(text) or {}
    if isinstance(data, dict) and "config" in data:
        data = data["config"]
    return config_from_dict(data)
