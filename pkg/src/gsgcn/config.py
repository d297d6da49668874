"""Run configuration: INI files with [run], [model], [train] and [data] sections."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .model import DEFAULT_CONFIG, MICRO_CONFIG, ModelConfig
from .training import TrainConfig

PRESETS: dict[str, ModelConfig] = {
    "default": DEFAULT_CONFIG,
    "micro": MICRO_CONFIG,
    # desk-scale ablations on the synthetic benchmark
    "small": ModelConfig(num_frames=32, channels=(12, 24), fusion_channels=48, num_classes=6),
}


@dataclass
class RunConfig:
    model: ModelConfig = DEFAULT_CONFIG
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    preset: str = "default"
    references: str = "first"
    class_names: tuple[str, ...] = ()

    def names(self) -> list[str]:
        if self.class_names:
            return list(self.class_names)
        return [f"class_{i}" for i in range(self.model.num_classes)]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed), "preset": self.preset}
        cp["model"] = {k: _fmt(v) for k, v in self.model.to_dict().items()}
        cp["train"] = {k: _fmt(v) for k, v in self.train.to_dict().items() if k != "seed"}
        cp["data"] = {"references": self.references, "class_names": ", ".join(self.class_names)}
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw.strip()


def _apply(obj, section: Mapping[str, str], what: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    kw = {}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"unknown {what} setting {key!r}")
        kw[key] = _convert(raw, known[key])
    return replace(obj, **kw)


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None,
                    preset: str | None = None) -> RunConfig:
    """Merge preset, config file and ``section.key=value`` overrides (later wins)."""
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config not found: {path}")
        cp.read(path)
    for key, value in (overrides or {}).items():
        if "." not in key:
            raise ValueError(f"override {key!r} must look like section.key=value")
        sec, k = key.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][k] = value
    run = dict(cp["run"]) if cp.has_section("run") else {}
    name = preset or run.pop("preset", None) or "default"
    run.pop("preset", None)
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    model = PRESETS[name]
    if cp.has_section("model"):
        model = _apply(model, cp["model"], "model")
    train = TrainConfig()
    if cp.has_section("train"):
        train = _apply(train, cp["train"], "train")
    seed = int(run.pop("seed", 0))
    if run:
        raise ValueError(f"unknown run setting {next(iter(run))!r}")
    train = replace(train, seed=seed)
    data = dict(cp["data"]) if cp.has_section("data") else {}
    names = tuple(n.strip() for n in data.get("class_names", "").split(",") if n.strip())
    refs = data.get("references", "first")
    if refs not in ("first", "all"):
        raise ValueError("data.references must be 'first' or 'all'")
    return RunConfig(model, train, seed, name, refs, names)
