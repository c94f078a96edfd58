"""Flat key-value run configuration shared by every CLI stage.

Format: one ``key = value`` per line, ``#`` comments, UTF-8. Relative paths
resolve against the working directory. The config hash covers the effective
key set (file contents plus CLI overrides) and is embedded in every artifact
the run writes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .curation import Thresholds
from .errors import ConfigurationError
from .model import ModelConfig
from .scoring import WindowConfig
from .training import LossWeights, TrainConfig
from .util import stable_digest

DEFAULTS = {
    "out_dir": "out",
    "seed": "0",
    # scoring
    "grid_rows": "3",
    "grid_cols": "3",
    "min_window": "1",
    "backend": "scene",  # scene | stub
    "backend_dim": "256",
    "backend_noise": "0.5",
    "phrase_template": "",  # empty = score the bare phrase
    "extractor": "lexicon",  # lexicon | remote
    "lexicon_path": "",
    "remote_endpoint": "",
    "remote_model": "",
    "score_workers": "1",
    # curation thresholds
    "t0": "32",
    "t1": "23",
    "t2": "27.5",
    # toy model
    "prefix_tokens": "4",
    "model_embed": "32",
    "model_layers": "2",
    "model_heads": "4",
    "model_mlp_ratio": "4",
    "model_max_len": "128",
    "model_dtype": "float64",
    "model_seed": "0",
    # training
    "lambda1": "0.3",
    "lambda2": "0.2",
    "lr": "0.01",
    "weight_decay": "0.0",
    "optimizer": "adamw",
    "epochs": "1",
    "batch_pos": "8",
    "batch_neg": "8",
    "batch_sent": "8",
    "grad_clip": "",
    "trainable": "image_projector",
    "train_mode": "efuf",  # efuf | sft
    "init_checkpoint": "",
    # generation
    "gen_checkpoint": "",
    "gen_prompt": "Describe the image. ",
    "gen_max_tokens": "48",
    "gen_split": "train",
    # evaluation
    "eval_checkpoint": "",
    "eval_baseline": "",
    "eval_split": "train",
    "eval_bins": "20",
    # preliminary experiment
    "prelim_source": "normal",  # normal | mentions
    "prelim_n": "500",
    "prelim_mean0": "28.26",
    "prelim_std0": "2.74",
    "prelim_mean1": "25.35",
    "prelim_std1": "2.70",
    "prelim_bins": "20",
}


def parse_flat_config(path: Path | str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


@dataclass
class RunConfig:
    values: dict[str, str]

    @classmethod
    def load(cls, path: Path | str, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        values.update(parse_flat_config(path))
        unknown = set(values) - set(DEFAULTS) - {"manifest"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if overrides:
            values.update({k: str(v) for k, v in overrides.items()})
        return cls(values=values)

    # -- primitive accessors --------------------------------------------------

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_path(self, key: str) -> Path | None:
        raw = self.values.get(key, "")
        return Path(raw) if raw else None

    @property
    def seed(self) -> int:
        return self.get_int("seed")

    @property
    def out_dir(self) -> Path:
        return Path(self.get("out_dir"))

    def stage_dir(self, stage: str, out_override: str | None = None) -> Path:
        return Path(out_override) if out_override else self.out_dir / stage

    def config_hash(self) -> str:
        return stable_digest(sorted(self.values.items()))

    # -- module config builders ----------------------------------------------

    def window_config(self) -> WindowConfig:
        return WindowConfig(
            grid_rows=self.get_int("grid_rows"),
            grid_cols=self.get_int("grid_cols"),
            min_window=self.get_int("min_window"),
        )

    def phrase_template(self) -> str | None:
        return self.values["phrase_template"] or None

    def thresholds(self) -> Thresholds:
        return Thresholds(t0=self.get_float("t0"), t1=self.get_float("t1"), t2=self.get_float("t2"))

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.get_float("lambda1"), lambda2=self.get_float("lambda2"))

    def model_config(self, d_img: int) -> ModelConfig:
        return ModelConfig(
            d_img=d_img,
            prefix_tokens=self.get_int("prefix_tokens"),
            embed_dim=self.get_int("model_embed"),
            layers=self.get_int("model_layers"),
            heads=self.get_int("model_heads"),
            mlp_ratio=self.get_int("model_mlp_ratio"),
            max_len=self.get_int("model_max_len"),
            dtype=self.get("model_dtype"),
        )

    def train_config(self) -> TrainConfig:
        grad_clip = self.values["grad_clip"]
        return TrainConfig(
            lr=self.get_float("lr"),
            weight_decay=self.get_float("weight_decay"),
            optimizer=self.get("optimizer"),
            epochs=self.get_int("epochs"),
            batch_pos=self.get_int("batch_pos"),
            batch_neg=self.get_int("batch_neg"),
            batch_sent=self.get_int("batch_sent"),
            seed=self.seed,
            grad_clip=float(grad_clip) if grad_clip else None,
            trainable=tuple(t.strip() for t in self.get("trainable").split(",") if t.strip()),
        )


def write_flat_config(path: Path | str, values: dict[str, str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in values.items():
            f.write(f"{key} = {value}\n")
