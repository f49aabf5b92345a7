"""Run configuration: TOML (or JSON) with [backbone], [decoder], [train], [eval], [data] sections."""

from __future__ import annotations

import difflib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import tomli
import tomli_w

from . import backbone as bb
from . import data as D
from . import decoder as dec
from . import metrics as M
from . import trainer as TR

SECTIONS = ("backbone", "decoder", "train", "eval", "data")
TOP_LEVEL = ("seed", "output_dir")


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, section, key and (when known) line."""


@dataclass
class EvalConfig:
    multi_scale: bool = False
    scales: List[float] = field(default_factory=lambda: list(M.DEFAULT_SCALES))
    flip: bool = True

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"eval.scales must be a non-empty list of positive numbers, got {self.scales}")


@dataclass
class RunConfig:
    backbone_name: str = "micro"
    backbone: bb.BackboneConfig = field(default_factory=lambda: bb.named_config("micro"))
    decoder: dec.DecoderConfig = field(default_factory=lambda: dec.DecoderConfig(C=64, n_cls=5))
    train: TR.TrainConfig = field(
        default_factory=lambda: TR.TrainConfig(schedule="constant", accuracy_gate=0.95)
    )
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: D.DatasetSpec = field(default_factory=D.DatasetSpec)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.decoder.n_cls != self.data.n_cls:
            raise ConfigError(
                f"decoder.n_cls = {self.decoder.n_cls} but data.n_cls = {self.data.n_cls}; they must agree"
            )

    def to_dict(self) -> dict:
        bdict = {"name": self.backbone_name}
        bdict.update(_strip_none(self.backbone.to_dict()))
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "backbone": bdict,
            "decoder": _strip_none(asdict(self.decoder)),
            "train": _strip_none(asdict(self.train)),
            "eval": _strip_none(asdict(self.eval)),
            "data": _strip_none({**asdict(self.data), "size": list(self.data.size)}),
        }


def _strip_none(d: dict) -> dict:
    # TOML has no null; absent keys fall back to the dataclass default (None)
    return {k: v for k, v in d.items() if v is not None}


def _line_of(text: Optional[str], section: str, key: str) -> Optional[int]:
    if not text:
        return None
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return no
    return None


def _check_keys(cls, section: str, values: dict, source: str, text: Optional[str]) -> None:
    allowed = [f.name for f in fields(cls)]
    for key in values:
        if key not in allowed:
            line = _line_of(text, section, key)
            where = f"{source}:{line}" if line else source
            hint = difflib.get_close_matches(key, allowed, n=1)
            tip = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]{tip}; allowed: {', '.join(allowed)}")


def _build(cls, section: str, values: dict, source: str, text: Optional[str]):
    _check_keys(cls, section, values, source, text)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: [{section}] {exc}") from exc


def from_dict(raw: dict, source: str = "<config>", text: Optional[str] = None) -> RunConfig:
    for key in raw:
        if key not in SECTIONS and key not in TOP_LEVEL:
            line = None
            if text:
                for no, ln in enumerate(text.splitlines(), 1):
                    if re.match(rf"\s*(\[\s*{re.escape(key)}\s*\]|{re.escape(key)}\s*=)", ln):
                        line = no
                        break
            where = f"{source}:{line}" if line else source
            raise ConfigError(f"{where}: unknown top-level key or section {key!r}; allowed: {', '.join(TOP_LEVEL + SECTIONS)}")
    for s in SECTIONS:
        if s in raw and not isinstance(raw[s], dict):
            raise ConfigError(f"{source}: [{s}] must be a table")

    bsec = dict(raw.get("backbone", {}))
    name = bsec.pop("name", "micro")
    if name not in bb.NAMED_CONFIGS:
        raise ConfigError(f"{source}: [backbone] name {name!r} not in {sorted(bb.NAMED_CONFIGS)}")
    _check_keys(bb.BackboneConfig, "backbone", bsec, source, text)
    try:
        backbone = bb.named_config(name, **bsec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: [backbone] {exc}") from exc

    defaults = RunConfig.__dataclass_fields__
    data = _build(D.DatasetSpec, "data", raw.get("data", {}), source, text)
    # the class count is stated once, in either section
    dsec = {**asdict(defaults["decoder"].default_factory()), "n_cls": data.n_cls, **raw.get("decoder", {})}
    if "n_cls" in raw.get("decoder", {}) and "n_cls" not in raw.get("data", {}):
        data.n_cls = dsec["n_cls"]
    tsec = {**asdict(defaults["train"].default_factory()), **raw.get("train", {})}
    decoder = _build(dec.DecoderConfig, "decoder", dsec, source, text)
    train = _build(TR.TrainConfig, "train", tsec, source, text)
    evalc = _build(EvalConfig, "eval", raw.get("eval", {}), source, text)
    try:
        seed = int(raw.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: seed must be an integer") from exc
    try:
        return RunConfig(name, backbone, decoder, train, evalc, data, seed, str(raw.get("output_dir", "runs/default")))
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse a ``.toml`` or ``.json`` file into a validated :class:`RunConfig`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix.lower() == ".json" else tomli.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, str(path), text)


def dump_toml(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved.toml"
    path.write_text(dump_toml(cfg))
    return path
