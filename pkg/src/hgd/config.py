"""Configuration containers shared by the trainer, CLI and model builders."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


# Slot layout used for the 4-class brain phantom and IXI/UKB-style labels.
IXI_LAYOUT = {"background": 2, "csf": 2, "gm": 3, "wm": 3, "GLOBAL": 10}
# BraTS-style: 6 structure classes + background, 19 structural and 19 global slots.
BRATS_LAYOUT = {
    "background": 2, "csf": 2, "gm": 3, "wm": 3,
    "edema": 3, "necrosis": 3, "enhancing": 3, "GLOBAL": 19,
}


@dataclass
class LossConfig:
    lambda1: float = 1.0   # content adversarial
    lambda2: float = 1.0   # domain adversarial
    lambda3: float = 10.0  # cross-cycle L1
    lambda4: float = 10.0  # self-reconstruction L1
    lambda5: float = 1.0   # pixel-level contrast
    lambda6: float = 2.0   # structure-level contrast
    lambda7: float = 1.0   # global-level contrast
    tau1: float = 0.5
    tau2: float = 0.5
    alpha_s: float = 0.5
    alpha_p: float = 0.01
    max_pixel_anchors: int = 256
    structure_feature: str = "flatten"  # or "mean"

    def validate(self) -> None:
        for k in range(1, 8):
            if getattr(self, f"lambda{k}") < 0:
                raise ConfigError(f"lambda{k} must be nonnegative")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ConfigError("temperatures must be positive")
        if self.alpha_s <= 0:
            raise ConfigError("alpha_s must be positive")
        if not 0.0 < self.alpha_p < 1.0:
            raise ConfigError("alpha_p must lie in (0, 1)")
        if self.structure_feature not in ("flatten", "mean"):
            raise ConfigError(f"unknown structure_feature {self.structure_feature!r}")


@dataclass
class NetConfig:
    """Architecture hyperparameters.

    The defaults are the toy scale used for the phantom experiments; use
    :meth:`full_scale` for the 256x256 / 54x54x256 configuration.
    """

    image_size: int = 64
    content_size: int = 16
    content_channels: int = 64
    attr_channels: int = 8
    base_channels: int = 8
    edge_kernel: int = 3
    n_res_content: int = 2
    n_res_gen: int = 2
    disc_channels: int = 8
    disc_layers: int = 3
    disc_scales: int = 1
    num_modalities: int = 2
    share_content_encoder: bool = False
    init_std: float = 0.02

    @classmethod
    def full_scale(cls) -> "NetConfig":
        return cls(image_size=256, content_size=54, content_channels=256,
                   base_channels=64, edge_kernel=7, n_res_content=4, n_res_gen=4,
                   disc_channels=64, disc_scales=2)

    def validate(self) -> None:
        if self.image_size < 32:
            raise ConfigError("image_size must be at least 32")
        if self.content_size < 1 or self.content_size > self.image_size:
            raise ConfigError("content_size out of range")
        if self.num_modalities < 2:
            raise ConfigError("need at least two modalities")


@dataclass
class AblationFlags:
    use_pgd: bool = True
    use_sgd: bool = True
    use_ggd: bool = True
    structural_slots: bool = True

    @property
    def uses_bank(self) -> bool:
        # the memory bank belongs to the pixel/global branches
        return self.use_pgd or self.use_ggd


ABLATE_TOKENS = {"pgd": "use_pgd", "sgd": "use_sgd", "ggd": "use_ggd", "bank": "structural_slots"}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 2
    steps: int = 3000
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    eval_every: int = 0
    read_mode: str = "values"          # or "literal"
    update_norm: str = "assigned"      # or "literal"
    test_attribute: str = "zero"       # or "sample"
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size != 2:
            raise ConfigError("the pairwise protocol uses batch_size=2 (one image per modality)")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.read_mode not in ("values", "literal"):
            raise ConfigError(f"unknown read_mode {self.read_mode!r}")
        if self.update_norm not in ("assigned", "literal"):
            raise ConfigError(f"unknown update_norm {self.update_norm!r}")
        if self.test_attribute not in ("zero", "sample"):
            raise ConfigError(f"unknown test_attribute {self.test_attribute!r}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    layout: dict[str, int] = field(default_factory=lambda: dict(IXI_LAYOUT))
    class_names: list[str] = field(default_factory=lambda: ["background", "csf", "gm", "wm"])
    train_manifest: str | None = None
    test_manifest: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        self.train.validate()
        self.loss.validate()
        self.net.validate()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _build(cls, data, "")

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a copy with dotted-key overrides applied, e.g. ``{"train.steps": 10}``."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            parts = dotted.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[p]
            if not isinstance(node, dict) or (parts[-1] not in node and node is not data["layout"]):
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {prefix or 'config'}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(prefix + k for k in unknown))}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{prefix}{name}.")
        elif name == "betas":
            kwargs[name] = tuple(float(v) for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "net"): NetConfig,
    (TrainConfig, "ablation"): AblationFlags,
}
