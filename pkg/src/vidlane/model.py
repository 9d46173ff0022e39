"""The full network: encoder, temporal aggregation, ID embedding and lane head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bootstrap import IDEmbedKernel, apply_mask_cue, bootstrap_second_frame, id_embedding, rasterize_lanes
from .config import RunConfig
from .geometry import Lane
from .lanehead import DecoderWeights, LaneBasis, candidates, decode, nms
from .numerics import DimensionError, Tensor, conv2d, relu
from .tca import BranchConfig, TCAWeights, TemporalState, sinusoidal_positions, step, temporal_update

ENCODER_CHANNELS = (16, 32)


@dataclass
class EncoderWeights:
    kernels: list[Tensor]
    biases: list[Tensor]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases), start=1):
            out[f"conv{i}.kernel"] = k
            out[f"conv{i}.bias"] = b
        return out

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, in_channels: int = 3) -> EncoderWeights:
        dims = (in_channels, *ENCODER_CHANNELS, channels)
        ks, bs = [], []
        for cin, cout in zip(dims[:-1], dims[1:]):
            ks.append(Tensor(rng.normal(0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout)), requires_grad=True))
            bs.append(Tensor(np.zeros(cout), requires_grad=True))
        return cls(ks, bs)


def encode(image, w: EncoderWeights, expected: tuple[int, int] | None = None) -> Tensor:
    """Three stride-2 3x3 convolutions with ReLU between stages: H x W x 3 -> H/8 x W/8 x C."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 3 or x.shape[2] != w.kernels[0].shape[2]:
        raise DimensionError(f"encoder expects H x W x {w.kernels[0].shape[2]} input, got {x.shape}")
    if expected is not None and x.shape[:2] != tuple(expected):
        raise DimensionError(f"image size {x.shape[:2]} does not match configured {tuple(expected)}")
    for i, (k, b) in enumerate(zip(w.kernels, w.biases)):
        x = conv2d(x, k, b, stride=2, padding="same")
        if i < len(w.kernels) - 1:
            x = relu(x)
    return x


class LaneNet:
    """Parameters plus the per-frame building blocks used by training and inference."""

    def __init__(self, cfg: RunConfig, basis: LaneBasis, encoder: EncoderWeights, tca: TCAWeights,
                 id_kernel: IDEmbedKernel, decoder: DecoderWeights):
        self.cfg = cfg
        self.basis = basis
        self.encoder = encoder
        self.tca = tca
        self.id_kernel = id_kernel
        self.decoder = decoder
        self.branches = BranchConfig(
            adjacent=cfg.use_adjacent,
            accumulative=cfg.use_accumulative,
            pos=sinusoidal_positions(cfg.grid, cfg.channels) if cfg.pos_encoding else None,
        )

    @classmethod
    def init(cls, cfg: RunConfig, basis: LaneBasis) -> LaneNet:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        return cls(cfg, basis,
                   EncoderWeights.init(cfg.channels, rng),
                   TCAWeights.init(cfg.channels, cfg.heads, rng),
                   IDEmbedKernel.init(cfg.channels, rng),
                   DecoderWeights.init(cfg.channels, cfg.basis_k, rng))

    def reconfigured(self, **overrides) -> LaneNet:
        """Same weight tensors (shared, not copied) under an inference-time config change."""
        cfg = self.cfg.override(**overrides)
        if (cfg.channels, cfg.heads, cfg.basis_k, cfg.height, cfg.width) != (
                self.cfg.channels, self.cfg.heads, self.cfg.basis_k, self.cfg.height, self.cfg.width):
            raise ValueError("reconfigured() cannot change the architecture or image size")
        return LaneNet(cfg, self.basis, self.encoder, self.tca, self.id_kernel, self.decoder)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, part in (("encoder", self.encoder), ("tca", self.tca), ("id_embed", self.id_kernel),
                             ("decoder", self.decoder)):
            for k, v in part.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out

    # -- per-frame pieces
    def encode(self, image: np.ndarray) -> Tensor:
        return encode(Tensor(np.asarray(image, dtype=np.float64) - 0.5), self.encoder,
                      (self.cfg.height, self.cfg.width))

    def embed_mask(self, lanes: list[Lane]) -> Tensor:
        mask = rasterize_lanes(lanes, self.cfg.height, self.cfg.width)
        return id_embedding(mask, self.id_kernel, self.cfg.grid)

    def second_frame_state(self, F_2: Tensor, prev_lanes: list[Lane]) -> TemporalState:
        return bootstrap_second_frame(F_2, self.embed_mask(prev_lanes), self.tca)

    def passthrough_state(self, F_hat_prev: Tensor, frame_index: int) -> TemporalState:
        """State carried from a previous frame's refined features (detached)."""
        k, v = temporal_update(F_hat_prev.detach(), self.tca)
        return TemporalState(k, v, Tensor(np.zeros(v.shape)), frame_index, self.cfg.grid)

    def mask_cue(self, s: TemporalState, prev_lanes: list[Lane]) -> TemporalState:
        return apply_mask_cue(s, self.embed_mask(prev_lanes), self.tca)

    def refine(self, F_t: Tensor, s: TemporalState, trace: dict | None = None):
        return step(F_t, s, self.tca, self.branches, trace)

    def head(self, F_hat: Tensor) -> tuple[Tensor, Tensor]:
        return decode(F_hat, self.decoder)

    def lanes(self, P, C) -> list[Lane]:
        cfg = self.cfg
        cands = candidates(P, C, self.basis, cfg.prob_threshold, width=cfg.width)
        return nms(cands, self.basis, cfg.nms_iou, cfg.lane_width, cfg.height, cfg.width)
