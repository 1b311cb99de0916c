"""Resolved run configurations and the train / evaluate pipelines behind the CLI."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import Manifest, load_cubes, load_manifest
from .metrics import Metrics, retrieval_map
from .model import ModelConfig, Model, build, extract_features, load_checkpoint, save_checkpoint
from .training import RingWindow, TrainConfig, TrainResult, evaluate, train, write_log_csv

_SECTIONS = {"model": ModelConfig, "train": TrainConfig}
DATA_DEFAULTS = {"path": None, "interval": 10.0, "start": 0, "elevation": None}


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


@dataclass
class RunConfig:
    """Everything one command needs, keyed as flat dotted names.

    Keys are ``model.<ModelConfig field>``, ``train.<TrainConfig field>``,
    ``data.path|interval|start|elevation`` and ``out``. Later sources
    override earlier ones: built-in defaults, then the config file, then
    command-line flags.
    """

    values: dict = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        flat = {f"model.{k}": v for k, v in ModelConfig().to_dict().items()}
        flat.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items()})
        flat.update({f"data.{k}": v for k, v in DATA_DEFAULTS.items()})
        flat["out"] = None
        return cls(flat)

    @staticmethod
    def check_key(key: str) -> None:
        section, _, name = key.partition(".")
        if key == "out":
            return
        if section == "data" and name in DATA_DEFAULTS:
            return
        if section in _SECTIONS and name in _field_names(_SECTIONS[section]):
            return
        raise ValueError(f"unknown config key {key!r}")

    def update(self, overrides: dict) -> "RunConfig":
        for k, v in overrides.items():
            self.check_key(k)
            self.values[k] = v
        return self

    @classmethod
    def resolve(cls, config_file=None, overrides: dict | None = None) -> "RunConfig":
        rc = cls.defaults()
        if config_file is not None:
            path = Path(config_file)
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            try:
                loaded = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(loaded, dict):
                raise ValueError(f"{path}: expected a JSON object of dotted keys")
            rc.update(loaded)
        rc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        rc.model_config()
        rc.train_config()
        return rc

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self, **changes) -> ModelConfig:
        return ModelConfig.from_dict({**self.section("model"), **changes})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def __getitem__(self, key: str):
        return self.values[key]

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def _manifest(rc: RunConfig) -> Manifest:
    if rc["data.path"] is None:
        raise ValueError("no dataset given (data.path / --data)")
    path = Path(rc["data.path"])
    return load_manifest(path / "manifest.json" if path.is_dir() else path)


def run_train(rc: RunConfig, manifest: Manifest | None = None) -> TrainResult:
    """Train on the manifest's ``train`` split; writes outputs under ``rc['out']``."""
    manifest = manifest or _manifest(rc)
    mcfg = rc.model_config(n_classes=len(manifest.classes))
    tcfg = rc.train_config()
    interval, start, elev = float(rc["data.interval"]), int(rc["data.start"]), rc["data.elevation"]
    window = None
    n_load = mcfg.n_views
    if tcfg.random_start:
        # load the whole ring at this interval; each sample draws its own arc
        n_load = int(math.floor(360.0 / interval + 1e-9))
        window = RingWindow(mcfg.n_views)
    cubes, labels, _ = load_cubes(manifest, "train", n_load, interval, start, mcfg.image_size, elevation=elev)
    if not cubes:
        raise ValueError("manifest has no train split entries")
    model = build(mcfg)
    result = train(model, cubes, labels, tcfg, window=window)
    out = rc["out"]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        rc.write(out / "run_config.json")
        extra = {"classes": list(manifest.classes), "interval": interval, "start": start, "elevation": elev}
        result.checkpoint_checksum = save_checkpoint(model, out / "model.ckpt", extra)
        write_log_csv(result.log, out / "train_log.csv")
        (out / "metrics.json").write_text(result.metrics.to_json())
    return result


class ViewCountMismatch(ValueError):
    pass


def run_eval(
    model: Model,
    manifest: Manifest,
    split: str = "test",
    interval: float = 10.0,
    start: int = 0,
    elevation=None,
    retrieval: bool = False,
    n_views: int | None = None,
    batch_size: int = 8,
) -> Metrics:
    N = model.config.n_views
    if n_views is not None and n_views != N:
        raise ViewCountMismatch(f"checkpoint model has N={N} views, --views requested N={n_views}")
    cubes, labels, _ = load_cubes(manifest, split, N, interval, start, model.config.image_size, elevation=elevation)
    if not cubes:
        raise ValueError(f"manifest has no {split!r} entries")
    metrics = evaluate(model, cubes, labels, batch_size, class_names=manifest.classes)
    if retrieval:
        feats = np.concatenate(
            [extract_features(model, np.stack(cubes[i : i + batch_size])).data for i in range(0, len(cubes), batch_size)]
        )
        metrics.retrieval_map = retrieval_map(feats, labels)
    return metrics


def train_and_test(rc: RunConfig, manifest: Manifest | None = None) -> tuple[TrainResult, Metrics]:
    manifest = manifest or _manifest(rc)
    result = run_train(rc, manifest)
    metrics = run_eval(
        result.model, manifest, "test", float(rc["data.interval"]), int(rc["data.start"]), rc["data.elevation"]
    )
    return result, metrics


def load_run_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)
