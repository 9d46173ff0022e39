"""Ablation sweeps: temporal branches, accumulative length and mask-cue setting.

Each sweep trains (or re-runs) models over several seeds on the same data and
reports F1@0.5, F1@0.8 and mIoU per variant and seed plus seed means, as JSON
and as a Markdown table.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import MASK_MODES, RunConfig
from .infer import evaluate
from .lanehead import LaneBasis
from .model import LaneNet
from .train import fit_basis, train

log = logging.getLogger(__name__)

BRANCH_VARIANTS = {
    "baseline": dict(use_adjacent=False, use_accumulative=False),
    "adjacent": dict(use_adjacent=True, use_accumulative=False),
    "accumulative": dict(use_adjacent=False, use_accumulative=True),
    "full": dict(use_adjacent=True, use_accumulative=True),
}
ACC_LENGTHS = ("4", "8", "16", "all")


@dataclass
class Row:
    sweep: str
    variant: str
    seed: int
    f1_05: float
    f1_08: float
    miou: float


def _score(net: LaneNet, sequences) -> tuple[float, float, float]:
    rep = evaluate(sequences, net)
    return rep["per_tau"]["0.5"]["f1"], rep["per_tau"]["0.8"]["f1"], rep["miou"]


def _fit(train_seqs, cfg: RunConfig, basis: LaneBasis) -> LaneNet:
    net, tlog = train(train_seqs, cfg, basis=basis)
    log.info("trained %s seed %d: final loss %.5f", cfg.mask_mode, cfg.seed, tlog.epoch_losses[-1])
    return net


def branch_sweep(train_seqs, test_seqs, base: RunConfig, seeds: Sequence[int],
                 keep_full: dict | None = None) -> list[Row]:
    """Branch ablation: no temporal branch, each single branch, both.

    Trained full models are stored in ``keep_full[seed]`` when given, so the
    accumulative-length sweep can reuse them.
    """
    basis = fit_basis(train_seqs, base)
    rows = []
    for seed in seeds:
        for name, flags in BRANCH_VARIANTS.items():
            net = _fit(train_seqs, base.override(seed=seed, **flags), basis)
            rows.append(Row("branches", name, seed, *_score(net, test_seqs)))
            if name == "full" and keep_full is not None:
                keep_full[seed] = net
    return rows


def acc_length_sweep(test_seqs, nets: dict[int, LaneNet], lengths: Sequence[str] = ACC_LENGTHS) -> list[Row]:
    """Accumulative-length ablation, inference-only: the same trained full model with the
    accumulative query re-zeroed every ``L`` refinements."""
    rows = []
    for seed, net in sorted(nets.items()):
        for length in lengths:
            rows.append(Row("acc_length", str(length), seed, *_score(net.reconfigured(acc_length=length), test_seqs)))
    return rows


def mask_cue_sweep(train_seqs, test_seqs, base: RunConfig, seeds: Sequence[int],
                   trained: dict[int, LaneNet] | None = None) -> list[Row]:
    """Mask-cue ablation: one model trained per mask-cue mode and seed.

    ``trained`` may supply already-trained models for ``base.mask_mode``.
    """
    basis = fit_basis(train_seqs, base)
    rows = []
    for seed in seeds:
        for mode in MASK_MODES:
            if trained is not None and mode == base.mask_mode and seed in trained:
                net = trained[seed]
            else:
                net = _fit(train_seqs, base.override(seed=seed, mask_mode=mode), basis)
            rows.append(Row("mask_cue", mode, seed, *_score(net, test_seqs)))
    return rows


def summarize(rows: Sequence[Row]) -> dict:
    """Seed means per (sweep, variant), keeping first-seen variant order."""
    out: dict[str, dict[str, dict]] = {}
    for r in rows:
        out.setdefault(r.sweep, {}).setdefault(r.variant, {"f1_05": [], "f1_08": [], "miou": [], "seeds": []})
        d = out[r.sweep][r.variant]
        d["f1_05"].append(r.f1_05)
        d["f1_08"].append(r.f1_08)
        d["miou"].append(r.miou)
        d["seeds"].append(r.seed)
    for sweep in out.values():
        for d in sweep.values():
            for key in ("f1_05", "f1_08", "miou"):
                d[key + "_mean"] = float(np.mean(d[key]))
    return out


def to_json(rows: Sequence[Row], config: RunConfig) -> str:
    payload = {"config": config.to_dict(), "rows": [r.__dict__ for r in rows], "summary": summarize(rows)}
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def to_markdown(rows: Sequence[Row]) -> str:
    lines = []
    for sweep, variants in summarize(rows).items():
        lines += [f"### {sweep}", "", "| variant | F1@0.5 | F1@0.8 | mIoU | seeds |", "|---|---|---|---|---|"]
        for name, d in variants.items():
            lines.append(f"| {name} | {d['f1_05_mean']:.4f} | {d['f1_08_mean']:.4f} | {d['miou_mean']:.4f} "
                         f"| {len(d['seeds'])} |")
        lines.append("")
    return "\n".join(lines)


def run(train_seqs, test_seqs, base: RunConfig, seeds: Sequence[int], sweeps: Sequence[str]) -> list[Row]:
    rows: list[Row] = []
    full: dict[int, LaneNet] = {}
    if "branches" in sweeps:
        rows += branch_sweep(train_seqs, test_seqs, base, seeds, keep_full=full)
    if "acc_length" in sweeps:
        if not full:
            basis = fit_basis(train_seqs, base)
            full = {s: _fit(train_seqs, base.override(seed=s, **BRANCH_VARIANTS["full"]), basis) for s in seeds}
        rows += acc_length_sweep(test_seqs, full)
    if "mask_cue" in sweeps:
        reuse = full if base.use_adjacent and base.use_accumulative else None
        rows += mask_cue_sweep(train_seqs, test_seqs, base, seeds, trained=reuse)
    return rows
