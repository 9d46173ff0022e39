"""Recursive video inference and the evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Lane
from .metrics import EvalConfig, MatchResult, combine, f1, iou_matrix, match_from_ious, miou
from .model import LaneNet
from .numerics import Tensor, no_grad
from .tca import TemporalState


class ConfigMismatch(ValueError):
    pass


def state_for_frame(net: LaneNet, t: int, F_t: Tensor, state: TemporalState | None, prev_F_hat: Tensor | None,
                    prev_lanes: list[Lane]) -> tuple[TemporalState, bool]:
    """State that refines frame ``t`` (1-based, t >= 2) and whether a lane mask was consulted.

    Frame 2 is bootstrapped from the frame-1 lane mask unless the mask cue is
    off, in which case it uses the frame-1 features like any later frame. The
    accumulative query is re-zeroed every ``acc_period`` refinements.
    """
    mode = net.cfg.mask_mode
    used_mask = False
    if t == 2:
        if mode == "off":
            state = net.passthrough_state(prev_F_hat, 1)
        else:
            state = net.second_frame_state(F_t, prev_lanes)
            used_mask = True
    elif mode == "all-frames":
        state = net.mask_cue(state, prev_lanes)
        used_mask = True
    period = net.cfg.acc_period
    if period is not None and (t - 2) % period == 0 and t > 2:
        state = state.with_zero_query()
    return state, used_mask


@dataclass
class FrameRecord:
    frame: int
    lanes: list[Lane]
    used_mask: bool
    state_nbytes: int
    v_matches_features: bool | None
    F_hat: np.ndarray | None = None


class VideoRunner:
    """Single-pass stream: frames go in one at a time, lanes come out; no look-ahead."""

    def __init__(self, net: LaneNet, keep_features: bool = False):
        self.net = net
        self.keep_features = keep_features
        self.t = 0
        self.state: TemporalState | None = None
        self.prev_F_hat: Tensor | None = None
        self.prev_lanes: list[Lane] = []
        self.records: list[FrameRecord] = []

    def feed(self, image: np.ndarray) -> list[Lane]:
        net = self.net
        self.t += 1
        with no_grad():
            F_t = net.encode(image)
            used_mask, v_ok = False, None
            if self.t == 1:
                F_hat = F_t
            else:
                s, used_mask = state_for_frame(net, self.t, F_t, self.state, self.prev_F_hat, self.prev_lanes)
                F_hat, self.state = net.refine(F_t, s)
                v_ok = bool(np.array_equal(self.state.v_prev.data, F_hat.data.reshape(-1, F_hat.shape[2])))
            P, C = net.head(F_hat)
            lanes = net.lanes(P, C)
        self.prev_F_hat, self.prev_lanes = F_hat, lanes
        self.records.append(FrameRecord(self.t, lanes, used_mask, self.state.nbytes if self.state else 0, v_ok,
                                        F_hat.data.copy() if self.keep_features else None))
        return lanes


def infer_video(frames: Iterable[np.ndarray], net: LaneNet) -> list[list[Lane]]:
    runner = VideoRunner(net)
    return [runner.feed(f) for f in frames]


# ---------------------------------------------------------------- evaluation

def evaluate_predictions(preds: Sequence[Sequence[list[Lane]]], gts: Sequence[Sequence[list[Lane]]],
                         eval_cfg: EvalConfig, config_echo: dict | None = None) -> dict:
    """Aggregate per-frame matches into the JSON-ready report."""
    per_tau: dict[float, list[MatchResult]] = {tau: [] for tau in eval_cfg.tau_list}
    frames = []
    for si, (pseq, gseq) in enumerate(zip(preds, gts)):
        for t, (p, g) in enumerate(zip(pseq, gseq)):
            ious = iou_matrix(p, g, eval_cfg)
            counts = {}
            for tau in eval_cfg.tau_list:
                r = match_from_ious(ious, tau)
                per_tau[tau].append(r)
                counts[str(tau)] = [r.tp, r.fp, r.fn]
            frames.append({"sequence": si, "frame": t, "counts": counts})
    summary = {}
    for tau, results in per_tau.items():
        tot = combine(results)
        p, r, f = f1(tot)
        summary[str(tau)] = {"tp": tot.tp, "fp": tot.fp, "fn": tot.fn, "precision": p, "recall": r, "f1": f}
    miou_tau = 0.5 if 0.5 in per_tau else min(per_tau)
    has_tp = any(r.matched_ious for r in per_tau[miou_tau])
    return {
        "config": config_echo or {},
        "eval": {**asdict(eval_cfg), "tau_list": list(eval_cfg.tau_list)},
        "miou": miou(per_tau[miou_tau]) if has_tp else 0.0,
        "miou_definition": f"global mean IoU over all true positives at tau={miou_tau}",
        "per_tau": summary,
        "frames": frames,
    }


def evaluate(sequences, net: LaneNet, eval_cfg: EvalConfig | None = None) -> dict:
    cfg = net.cfg
    eval_cfg = eval_cfg or EvalConfig(cfg.height, cfg.width, cfg.lane_width)
    if (eval_cfg.height, eval_cfg.width) != (cfg.height, cfg.width):
        raise ConfigMismatch(f"eval size {(eval_cfg.height, eval_cfg.width)} != model size {(cfg.height, cfg.width)}")
    preds, gts = [], []
    for seq in sequences:
        if (seq.config.height, seq.config.width) != (cfg.height, cfg.width):
            raise ConfigMismatch(
                f"sequence image size {(seq.config.height, seq.config.width)} != model size {(cfg.height, cfg.width)}")
        preds.append(infer_video((seq.frame(t) for t in range(len(seq))), net))
        gts.append(seq.gt)
    return evaluate_predictions(preds, gts, eval_cfg, cfg.to_dict())


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
