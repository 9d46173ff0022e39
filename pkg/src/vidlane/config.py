"""Run configuration shared by training, inference and the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

MASK_MODES = ("off", "second-frame", "all-frames")
LR_SCHEDULES = ("constant", "cosine")
STRIDE = 8


@dataclass(frozen=True)
class RunConfig:
    height: int = 192
    width: int = 320
    channels: int = 64
    heads: int = 4
    basis_k: int = 4
    basis_n: int = 36
    lr: float = 1e-4
    lr_schedule: str = "cosine"  # "cosine" (anneal to 0 over all steps) or "constant"
    weight_decay: float = 1e-4
    epochs: int = 10
    seed: int = 0
    mask_mode: str = "second-frame"
    acc_length: str = "all"  # "all" or a positive integer as text
    use_adjacent: bool = True
    use_accumulative: bool = True
    pos_encoding: bool = True
    clip_len: int = 4
    batch_clips: int = 1
    positive_rows: int = 3
    prob_threshold: float = 0.5
    nms_iou: float = 0.5
    lane_width: float = 30.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    liou_e: float = 3.0

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.height % STRIDE or self.width % STRIDE:
            raise ValueError(f"image size must be a multiple of {STRIDE}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.acc_period is not None and self.acc_period < 1:
            raise ValueError("acc_length must be 'all' or a positive integer")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.clip_len < 1 or self.batch_clips < 1:
            raise ValueError("clip_len and batch_clips must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // STRIDE, self.width // STRIDE

    @property
    def acc_period(self) -> int | None:
        return None if str(self.acc_length) == "all" else int(self.acc_length)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "acc_length" in d:
            d["acc_length"] = str(d["acc_length"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def override(self, **kw) -> RunConfig:
        kw = {k: v for k, v in kw.items() if v is not None}
        if "acc_length" in kw:
            kw["acc_length"] = str(kw["acc_length"])
        return replace(self, **kw)
