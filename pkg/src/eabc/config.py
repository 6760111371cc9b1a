"""JSON run configuration.

A configuration document has up to five sections, all optional::

    {
      "robot":    {"m": 7.4, "lambda_deg": 25, ...},
      "observer": {"Q_proc": [...7 values...], "mode": "steady-state-gain", ...},
      "ocp":      {"horizon": 1.0, "N": 20, "Q": [...], ...},
      "harness":  {"plant_dt": 0.001, "tau_max": 3.0, ...},
      "scenario": {"name": "rear-tracking", "seed": 0, ...builder overrides...}
    }

Errors carry ``file:line:column`` positions so a bad value can be found
without guessing. Semantic errors point at the offending key.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .controllers import OcpConfig
from .dynamics import RobotParams
from .harness import SCENARIOS, HarnessConfig
from .observer import ObserverConfig, ObserverConfigError

SECTIONS = ("robot", "observer", "ocp", "harness", "scenario")


class ConfigError(ValueError):
    """Malformed or invalid configuration; the message names file and line."""


@dataclass(frozen=True)
class RunConfig:
    robot: RobotParams = field(default_factory=RobotParams)
    observer: ObserverConfig | None = None
    ocp: OcpConfig = field(default_factory=OcpConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    scenario: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.observer is None:
            object.__setattr__(self, "observer", ObserverConfig(dt=self.harness.feedback_dt))

    @property
    def scenario_name(self) -> str | None:
        return self.scenario.get("name")

    def scenario_overrides(self) -> dict:
        """Builder keyword arguments, with ``*_deg`` keys converted to radians."""
        out = {}
        for key, val in self.scenario.items():
            if key in ("name", "seed"):
                continue
            if key.endswith("_deg"):
                out[key[:-4]] = math.radians(val)
            else:
                out[key] = val
        return out

    def to_dict(self) -> dict:
        """Fully resolved snapshot; loading it back reproduces this config."""
        return {
            "robot": self.robot.to_dict(),
            "observer": self.observer.to_dict(),
            "ocp": self.ocp.to_dict(),
            "harness": self.harness.to_dict(),
            "scenario": dict(self.scenario),
        }


def _position(text: str, section: str | None, key: str | None) -> tuple[int, int]:
    """Line and column (1-based) of ``"key":`` inside ``"section":``, best effort."""
    start = 0
    if section is not None:
        m = re.search(rf'"{re.escape(section)}"\s*:', text)
        if m is None:
            return 1, 1
        start = m.start()
    if key is not None:
        m = re.search(rf'"{re.escape(key)}"\s*:', text[start:])
        if m is not None:
            start += m.start()
    line = text.count("\n", 0, start) + 1
    col = start - (text.rfind("\n", 0, start) + 1) + 1
    return line, col


def _fail(text: str, source: str, section: str | None, key: str | None, message: str):
    line, col = _position(text, section, key)
    raise ConfigError(f"{source}:{line}:{col}: {message}")


def _build(cls, data: dict, text: str, source: str, section: str, **extra):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            _fail(text, source, section, key, f"unknown key {key!r} in section {section!r}")
    try:
        return cls(**extra, **data)
    except (TypeError, ValueError, ObserverConfigError) as exc:
        bad = next((k for k in data if k in str(exc)), None)
        _fail(text, source, section, bad, f"invalid {section} settings: {exc}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        _fail(text, source, None, None, "top level must be a JSON object")
    for key, val in doc.items():
        if key not in SECTIONS:
            _fail(text, source, None, key, f"unknown section {key!r}; expected one of {list(SECTIONS)}")
        if not isinstance(val, dict):
            _fail(text, source, None, key, f"section {key!r} must be an object")

    robot_data = doc.get("robot", {})
    try:
        robot = RobotParams.from_dict(robot_data)
    except (TypeError, ValueError) as exc:
        bad = next((k for k in robot_data if k in str(exc)), None)
        _fail(text, source, "robot", bad, f"invalid robot parameters: {exc}")

    harness_data = dict(doc.get("harness", {}))
    if isinstance(harness_data.get("sensor_noise"), list):
        harness_data["sensor_noise"] = tuple(harness_data["sensor_noise"])
    harness = _build(HarnessConfig, harness_data, text, source, "harness")

    obs_data = dict(doc.get("observer", {}))
    obs_data.setdefault("dt", harness.feedback_dt)
    if abs(obs_data["dt"] - harness.feedback_dt) > 1e-12:
        _fail(text, source, "observer", "dt",
              f"observer dt {obs_data['dt']} must equal the feedback period {harness.feedback_dt}")
    observer = _build(ObserverConfig, obs_data, text, source, "observer")

    ocp = _build(OcpConfig, dict(doc.get("ocp", {})), text, source, "ocp")

    scenario = dict(doc.get("scenario", {}))
    name = scenario.get("name")
    if name is not None and name not in SCENARIOS:
        _fail(text, source, "scenario", "name",
              f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}")
    return RunConfig(robot=robot, observer=observer, ocp=ocp, harness=harness, scenario=scenario)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def with_scenario(config: RunConfig, **changes) -> RunConfig:
    scenario = dict(config.scenario)
    scenario.update({k: v for k, v in changes.items() if v is not None})
    return replace(config, scenario=scenario)
