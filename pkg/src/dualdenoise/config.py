"""One JSON file that pins down an entire experiment.

Relative paths inside the file are resolved against the file's own
directory at load time, so a config checked into a run folder stays
portable.  Validation is strict: unknown demosaic names, overlapping
train/test manifests, or a missing section fail loudly instead of
defaulting quietly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace

from . import isp as isp_mod
from .errors import FormatError, ParameterError
from .nets import NetConfig, PipelineConfig
from .rawnoise import RawImage, SamplerConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig.desk_profile)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    raw_net: NetConfig = field(default_factory=NetConfig)
    srgb_net: NetConfig = field(default_factory=NetConfig)
    demosaic_kind: str = "bilinear"
    train_manifest: str = "data/train_manifest.json"
    test_manifest: str = "data/test_manifest.json"
    out_dir: str = "run"
    weights_name: str = "weights.wbin"
    train_csv_name: str = "train_log.csv"
    eval_csv_name: str = "eval.csv"
    scene_count: int = 80
    scene_size: int = 96
    data_seed: int = 0

    def __post_init__(self):
        if self.demosaic_kind not in isp_mod.DEMOSAIC_KINDS:
            raise ParameterError(f"unknown demosaic kind {self.demosaic_kind!r}")
        if self.scene_count < 2 or self.scene_size < 16:
            raise ParameterError("need scene_count >= 2 and scene_size >= 16")

    @property
    def weights_path(self) -> str:
        return os.path.join(self.out_dir, self.weights_name)

    @property
    def train_csv_path(self) -> str:
        return os.path.join(self.out_dir, self.train_csv_name)

    @property
    def eval_csv_path(self) -> str:
        return os.path.join(self.out_dir, self.eval_csv_name)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "train": self.train.to_dict(),
            "sampler": dataclasses.asdict(self.sampler),
            "pipeline": self.pipeline.to_dict(),
            "raw_net": self.raw_net.to_dict(),
            "srgb_net": self.srgb_net.to_dict(),
            "demosaic_kind": self.demosaic_kind,
            "train_manifest": self.train_manifest,
            "test_manifest": self.test_manifest,
            "out_dir": self.out_dir,
            "weights_name": self.weights_name,
            "train_csv_name": self.train_csv_name,
            "eval_csv_name": self.eval_csv_name,
            "scene_count": self.scene_count,
            "scene_size": self.scene_size,
            "data_seed": self.data_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"unsupported experiment schema {d.get('schema_version')!r}")
        required = ("train", "sampler", "pipeline", "raw_net", "srgb_net")
        missing = [k for k in required if k not in d]
        if missing:
            raise FormatError(f"experiment config missing sections {missing}")
        simple = {k: d[k] for k in ("demosaic_kind", "train_manifest", "test_manifest",
                                    "out_dir", "weights_name", "train_csv_name",
                                    "eval_csv_name", "scene_count", "scene_size",
                                    "data_seed") if k in d}
        return cls(train=TrainConfig.from_dict(d["train"]),
                   sampler=SamplerConfig(**d["sampler"]),
                   pipeline=PipelineConfig.from_dict(d["pipeline"]),
                   raw_net=NetConfig.from_dict(d["raw_net"]),
                   srgb_net=NetConfig.from_dict(d["srgb_net"]),
                   **simple)


def save_experiment(cfg: ExperimentConfig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_experiment(path: str) -> ExperimentConfig:
    """Parse a config file and absolutize its paths against its directory."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read experiment config {path}: {exc}") from None
    cfg = ExperimentConfig.from_dict(data)
    root = os.path.dirname(os.path.abspath(path))

    def absolutize(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(root, p)

    cfg.train_manifest = absolutize(cfg.train_manifest)
    cfg.test_manifest = absolutize(cfg.test_manifest)
    cfg.out_dir = absolutize(cfg.out_dir)
    return cfg


def validate_data_split(cfg: ExperimentConfig):
    """Both manifests must exist and must not share a single frame."""
    from . import dataio

    for p in (cfg.train_manifest, cfg.test_manifest):
        if not os.path.exists(p):
            raise FormatError(f"manifest not found: {p}")
    train = set(dataio.load_manifest(cfg.train_manifest))
    test = set(dataio.load_manifest(cfg.test_manifest))
    shared = sorted(os.path.basename(p) for p in train & test)
    if shared:
        raise ParameterError(f"train and test manifests overlap: {shared}")


def apply_demosaic_kind(scenes: list, kind: str) -> list:
    """Return scenes whose render params use the experiment's demosaic."""
    out = []
    for s in scenes:
        if s.params.demosaic_kind == kind:
            out.append(s)
        else:
            out.append(RawImage(plane=s.plane, bayer=s.bayer,
                                params=replace(s.params, demosaic_kind=kind)))
    return out
