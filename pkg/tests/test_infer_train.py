import numpy as np
import pytest
from PIL import Image

from vidlane.checkpoint import dumps
from vidlane.geometry import Lane
from vidlane.infer import ConfigMismatch, VideoRunner, evaluate, evaluate_predictions, infer_video
from vidlane.metrics import EvalConfig
from vidlane.numerics import no_grad
from vidlane.overlay import PALETTE, draw_lanes, render_overlay
from vidlane.train import AdamW, NumericFailure, clip_loss, frame_targets, train


def frames_of(seq):
    return [seq.frame(t) for t in range(len(seq))]


def same_lanes(a, b):
    return len(a) == len(b) and all(np.array_equal(x.points, y.points) for x, y in zip(a, b))


# ---------------------------------------------------------------- streaming inference

def test_single_frame_video_equals_single_image_mode(tiny_net, tiny_data):
    f = tiny_data[0].frame(0)
    with no_grad():
        expected = tiny_net.lanes(*tiny_net.head(tiny_net.encode(f)))
    (got,) = infer_video([f], tiny_net)
    assert same_lanes(got, expected)


def test_empty_video():
    assert infer_video([], None) == []


def test_state_size_constant_and_values_are_refined_features(tiny_net, tiny_data):
    runner = VideoRunner(tiny_net)
    frames = frames_of(tiny_data[0])
    for t in range(100):
        runner.feed(frames[t % len(frames)])
    recs = runner.records
    assert recs[2].state_nbytes == recs[99].state_nbytes > 0
    assert len({r.state_nbytes for r in recs[1:]}) == 1
    assert all(r.v_matches_features for r in recs[1:])


@pytest.mark.parametrize("mode,expected", [("off", [False] * 6), ("second-frame", [True] + [False] * 5),
                                           ("all-frames", [True] * 6)])
def test_mask_cue_modes(tiny_net, tiny_data, mode, expected):
    runner = VideoRunner(tiny_net.reconfigured(mask_mode=mode))
    for f in frames_of(tiny_data[0])[:7]:
        runner.feed(f)
    assert [r.used_mask for r in runner.records[1:]] == expected and not runner.records[0].used_mask


def test_acc_length_reset_only_affects_later_frames(tiny_net, tiny_data):
    outs = {}
    for length in ("all", "4"):
        runner = VideoRunner(tiny_net.reconfigured(acc_length=length), keep_features=True)
        for f in frames_of(tiny_data[0]):
            runner.feed(f)
        outs[length] = [r.F_hat for r in runner.records]
    for t in range(5):  # frames 1..5
        assert np.array_equal(outs["all"][t], outs["4"][t])
    assert not np.array_equal(outs["all"][5], outs["4"][5])  # frame 6 starts from a zero query


def test_inference_is_deterministic(tiny_net, tiny_data):
    a = infer_video(frames_of(tiny_data[1]), tiny_net)
    b = infer_video(frames_of(tiny_data[1]), tiny_net)
    assert all(same_lanes(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------- training

def test_frame_targets_mark_crossing_cells(tiny_cfg, tiny_data):
    gt = tiny_data[0].gt[0]
    tg = frame_targets(gt, tiny_cfg)
    gh, gw = tiny_cfg.grid
    assert tg.prob.shape == (gh, gw) and tg.prob.sum() == len(tg.cells)
    assert all(i >= gh - tiny_cfg.positive_rows for i, _ in tg.cells)
    assert len(tg.cells) == len(tg.gt_x)


def test_zero_lr_leaves_parameters_unchanged(tiny_net, tiny_data):
    params = tiny_net.parameters()
    before = {k: p.data.copy() for k, p in params.items()}
    opt = AdamW(params, lr=0.0, weight_decay=1e-4)
    seq = tiny_data[0]
    from vidlane.numerics import backward

    backward(clip_loss(tiny_net, frames_of(seq)[:4], seq.gt[:4]))
    assert any(np.any(p.gradient != 0) for p in params.values())
    opt.step()
    assert all(np.array_equal(before[k], p.data) for k, p in params.items())


def test_loss_decreases(tiny_cfg, tiny_data):
    # one memorizable sequence: 2 clips per epoch, 25 epochs = 50 optimizer steps
    _, log = train(tiny_data[:1], tiny_cfg.override(epochs=25, lr=3e-3))
    assert log.steps == 50
    means = np.array(log.epoch_losses)
    assert np.polyfit(np.arange(len(means)), means, 1)[0] < 0  # downward trend of epoch means
    assert means[-5:].mean() < 0.8 * means[:5].mean()


def test_training_is_deterministic(tiny_cfg, tiny_data, tmp_path):
    a, _ = train(tiny_data, tiny_cfg, max_steps=3, out_dir=tmp_path / "a")
    b, _ = train(tiny_data, tiny_cfg, max_steps=3, out_dir=tmp_path / "b")
    assert dumps(a, 3) == dumps(b, 3)
    assert (tmp_path / "a" / "epoch_000.ckpt").read_bytes() == (tmp_path / "b" / "epoch_000.ckpt").read_bytes()


def test_non_finite_loss_raises(tiny_cfg, tiny_data, tiny_net):
    next(iter(tiny_net.parameters().values())).data[...] = np.nan
    with pytest.raises(NumericFailure, match="epoch 0"):
        train(tiny_data, tiny_cfg, net=tiny_net, max_steps=1)


# ---------------------------------------------------------------- evaluation

def test_ground_truth_scores_perfectly(tiny_data):
    gts = [s.gt for s in tiny_data]
    rep = evaluate_predictions(gts, gts, EvalConfig(48, 80))
    assert rep["per_tau"]["0.5"]["f1"] == 1.0 and rep["miou"] == 1.0


def test_empty_predictions_score_zero(tiny_data):
    gts = [s.gt for s in tiny_data]
    empty = [[[] for _ in s.gt] for s in tiny_data]
    rep = evaluate_predictions(empty, gts, EvalConfig(48, 80))
    assert rep["per_tau"]["0.5"]["f1"] == 0.0 and rep["per_tau"]["0.5"]["tp"] == 0


def test_totals_equal_per_frame_sums(tiny_net, tiny_data):
    rep = evaluate(tiny_data, tiny_net)
    for tau, tot in rep["per_tau"].items():
        sums = np.sum([f["counts"][tau] for f in rep["frames"]], axis=0)
        assert list(sums) == [tot["tp"], tot["fp"], tot["fn"]]
    assert len(rep["frames"]) == sum(len(s) for s in tiny_data)


def test_eval_size_mismatch(tiny_net, tiny_data):
    with pytest.raises(ConfigMismatch):
        evaluate(tiny_data, tiny_net, EvalConfig(96, 160))


# ---------------------------------------------------------------- overlay

def test_overlay_without_lanes_is_identity():
    img = np.random.Generator(np.random.PCG64(0)).integers(0, 256, (20, 30, 3), dtype=np.uint8)
    assert np.array_equal(draw_lanes(img, []), img)


def test_overlay_vertical_lane_recolours_three_columns():
    img = np.zeros((20, 30, 3), dtype=np.uint8)
    out = draw_lanes(img, [Lane([[10.0, 0.0], [10.0, 19.0]])])
    changed = np.any(out != img, axis=2)
    assert np.array_equal(np.nonzero(changed.any(axis=0))[0], [9, 10, 11]) and changed[:, 9:12].all()
    assert np.all(out[changed] == PALETTE[0])


def test_overlay_file_round_trip(tmp_path):
    img = np.full((16, 24, 3), 0.5)
    out = render_overlay(img, [Lane([[3.0, 2.0], [20.0, 15.0]])], tmp_path / "o" / "f.ppm")
    assert (tmp_path / "o" / "f.ppm").read_bytes()[:2] == b"P6"
    with Image.open(tmp_path / "o" / "f.ppm") as im:
        assert np.array_equal(np.asarray(im), out)
