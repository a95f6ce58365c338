import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dopus.imaging import DuplexFrame, ImageGrid
from dopus.pose import ProbePose
from dopus.compound import dice_score
from dopus.segnet import (
    AugParams,
    ConvGruCell,
    DopUsNet,
    TrainConfig,
    VARIANTS,
    augment_sequence,
    build_sequences,
    classical_segment,
    count_parameters,
    downsample_frame,
    get_variant,
    learning_rate,
    load_checkpoint,
    loocv_split,
    predict_sweep,
    run_sequence,
    save_checkpoint,
    soft_dice_loss,
    tbptt_backward,
    train,
)

from oracles import disk_mask, scalar_gru

torch.set_num_threads(1)


# ---- ConvGRU ----

def test_zero_weights_average_hidden():
    cell = ConvGruCell(2, 3)
    for conv in (cell.w_z, cell.w_r, cell.w):
        torch.nn.init.zeros_(conv.weight)
    x = torch.randn(2, 2, 5, 4)
    h = torch.randn(2, 3, 5, 4)
    torch.testing.assert_close(cell(x, h), 0.5 * h)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=11, max_size=11))
def test_gru_matches_scalar_oracle(v):
    x, h, *w = v
    cell = ConvGruCell(1, 1, kernel_size=1).double()
    with torch.no_grad():
        for conv, (wx, wh, b) in zip((cell.w_z, cell.w_r, cell.w), (w[0:3], w[3:6], w[6:9])):
            conv.weight[:] = torch.tensor([wx, wh], dtype=torch.float64).view(1, 2, 1, 1)
            conv.bias[:] = b
    out = cell(torch.full((1, 1, 1, 1), x, dtype=torch.float64), torch.full((1, 1, 1, 1), h, dtype=torch.float64))
    want = scalar_gru(x, h, w[0:3], w[3:6], w[6:9])
    assert float(out.detach()) == pytest.approx(want, abs=1e-12)


def test_gru_shape_checks():
    cell = ConvGruCell(2, 3)
    with pytest.raises(ValueError):
        cell(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 5))
    with pytest.raises(ValueError):
        cell(torch.zeros(1, 1, 4, 4), torch.zeros(1, 3, 4, 4))
    with pytest.raises(ValueError):
        ConvGruCell(1, 1, kernel_size=2)


# ---- network family ----

@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_forward_shapes_and_range(name):
    torch.manual_seed(0)
    net = DopUsNet(get_variant(name)).eval()
    b = torch.rand(2, 1, 16, 16)
    d = (torch.rand(2, 1, 16, 16) > 0.8).float()
    state = net.initial_state(2, 16, 16)
    with torch.no_grad():
        p, state2 = net(b, d, state)
    assert p.shape == (2, 1, 16, 16)
    assert float(p.min()) > 0 and float(p.max()) < 1
    assert (state2.top is not None) == net.variant.rnn_top
    assert (state2.bottom is not None) == net.variant.rnn_bottom
    if net.variant.rnn_top:
        assert state2.top.shape == (2, 32, 4, 4)


def test_recurrent_needs_state():
    net = DopUsNet(get_variant("dopus4"))
    with pytest.raises(RuntimeError, match="initial_state"):
        net(torch.rand(1, 1, 16, 16), torch.zeros(1, 1, 16, 16))
    # feed-forward variants do not
    DopUsNet(get_variant("unet-b"))(torch.rand(1, 1, 16, 16), torch.zeros(1, 1, 16, 16))


def test_bad_input_size():
    net = DopUsNet(get_variant("dopus4"))
    with pytest.raises(ValueError):
        net.initial_state(1, 18, 16)
    with pytest.raises(ValueError):
        net(torch.rand(1, 1, 16, 16), torch.zeros(1, 1, 8, 8), net.initial_state(1, 16, 16))


def test_parameter_count_ordering():
    n = {k: count_parameters(DopUsNet(get_variant(k))) for k in VARIANTS}
    assert n["unet-b"] <= n["unet-bd"] < n["dopus0"] < n["unet-bd-rnn"] < n["dopus2"]
    assert n["dopus2"] < n["dopus3"] <= n["dopus4"] < n["dopus1"]


def test_variant_lookup():
    assert get_variant("DopUS-4") is VARIANTS["dopus4"]
    assert get_variant("dopus3", widths=(4, 8)).widths == (4, 8)
    with pytest.raises(KeyError):
        get_variant("resnet")


def test_unet_b_ignores_doppler():
    torch.manual_seed(1)
    net = DopUsNet(get_variant("unet-b")).eval()
    b = torch.rand(1, 1, 16, 16)
    p1, _ = net(b, torch.zeros(1, 1, 16, 16))
    p2, _ = net(b, torch.ones(1, 1, 16, 16))
    torch.testing.assert_close(p1, p2)


def test_state_carries_information():
    torch.manual_seed(2)
    net = DopUsNet(get_variant("dopus4")).eval()
    b = torch.rand(1, 4, 1, 16, 16)
    d = torch.zeros(1, 4, 1, 16, 16)
    d2 = d.clone()
    d2[:, 0, :, 6:10, 6:10] = 1.0
    with torch.no_grad():
        p1, _ = run_sequence(net, b, d)
        p2, _ = run_sequence(net, b, d2)
    # only frame 0 differs, yet the last output changes through the hidden state
    assert not torch.allclose(p1[:, -1], p2[:, -1])


# ---- loss ----

def test_loss_examples():
    y = torch.tensor([1.0, 1.0, 0.0, 0.0])
    assert float(soft_dice_loss(y, y)) == 0.0
    half = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    assert float(soft_dice_loss(half, torch.ones_like(half))) == pytest.approx(1 - 5 / 6, abs=1e-12)
    a = torch.zeros(1, 1, 2, 10, dtype=torch.float64)
    b = a.clone()
    a[..., 0, :5] = 1
    b[..., 1, 5:] = 1
    assert float(soft_dice_loss(a, b)) == pytest.approx(1 - 1 / 11, abs=1e-12)
    with pytest.raises(ValueError):
        soft_dice_loss(torch.zeros(3), torch.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=30))
def test_loss_matches_loop(pairs):
    p = torch.tensor([a for a, _ in pairs], dtype=torch.float64)
    y = torch.tensor([float(b) for _, b in pairs], dtype=torch.float64)
    inter = sum(a * float(b) for a, b in pairs)
    den = sum(a * a for a, _ in pairs) + sum(float(b) for _, b in pairs)
    want = 1 - (2 * inter + 1) / (den + 1)
    got = float(soft_dice_loss(p, y))
    assert got == pytest.approx(want, abs=1e-12)
    assert 0.0 <= got <= 1.0


# ---- schedule, folds, augmentation ----

def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(cfg, 0) == 1e-4
    assert learning_rate(cfg, 249) == 1e-4
    assert learning_rate(cfg, 250) == 5e-5
    assert learning_rate(cfg, 500) == pytest.approx(2.5e-5, abs=1e-18)


def test_loocv_folds():
    groups = np.repeat(np.arange(7), 3)
    folds = [loocv_split(groups, k) for k in range(7)]
    assert len(folds) == 7
    for k, (tr, va) in enumerate(folds):
        assert set(groups[va]) == {k} and k not in set(groups[tr])
        assert len(tr) + len(va) == len(groups)
    assert len([loocv_split([4, 4, 9], k) for k in range(2)]) == 2
    with pytest.raises(IndexError):
        loocv_split([4, 4, 9], 2)
    with pytest.raises(ValueError):
        loocv_split([1, 1], 0)


def _seq(t=5, h=24, w=24, seed=0):
    rng = np.random.default_rng(seed)
    b = rng.uniform(size=(t, h, w))
    d = (rng.uniform(size=(t, h, w)) < 0.1).astype(float)
    g = np.zeros((t, h, w))
    g[:, 8:16, 6:12] = 1
    return b, d, g


def test_identity_augmentation_is_noop():
    b, d, g = _seq()
    b2, d2, g2, p = augment_sequence(b, d, g, params=AugParams())
    assert p.is_identity
    for a, a2 in ((b, b2), (d, d2), (g, g2)):
        np.testing.assert_array_equal(a, a2)


def test_double_flip_restores():
    b, d, g = _seq()
    flip = AugParams(hflip=True)
    once = augment_sequence(b, d, g, params=flip)
    assert not np.array_equal(once[0], b)
    twice = augment_sequence(*once[:3], params=flip)
    for a, a2 in zip((b, d, g), twice[:3]):
        np.testing.assert_array_equal(a, a2)


def test_one_draw_per_sequence():
    b, d, g = _seq(t=6)
    b[:] = b[0]
    d[:] = d[0]
    rng = np.random.default_rng(5)
    b2, d2, g2, p = augment_sequence(b, d, g, rng)
    assert isinstance(p, AugParams)
    # identical input frames stay identical, so every frame got the same transform
    for k in range(1, 6):
        np.testing.assert_array_equal(b2[k], b2[0])
        np.testing.assert_array_equal(g2[k], g2[0])
    assert set(np.unique(g2)) <= {0.0, 1.0} and set(np.unique(d2)) <= {0.0, 1.0}
    # same seed gives the same draw
    assert augment_sequence(b, d, g, np.random.default_rng(5))[3] == p


def test_augment_validation():
    b, d, g = _seq()
    with pytest.raises(ValueError):
        augment_sequence(b, d[:, :3], g, params=AugParams())
    with pytest.raises(ValueError):
        augment_sequence(b, d, g)


# ---- data plumbing ----

def test_downsample_keeps_binary():
    rng = np.random.default_rng(0)
    b = rng.uniform(size=(320, 320))
    d = disk_mask(320, 320, 160, 160, 30)
    g = disk_mask(320, 320, 160, 160, 40)
    b2, d2, g2 = downsample_frame(b, d, 64, g)
    assert b2.shape == (64, 64)
    assert set(np.unique(d2)) <= {0, 1} and set(np.unique(g2)) <= {0, 1}
    assert g2.sum() == pytest.approx(g.sum() / 25, rel=0.1)


def test_build_sequences_windows():
    arrays = {3: [_seq(t=45)], 1: [_seq(t=20)]}
    s = build_sequences(arrays, length=20, stride=10)
    assert len(s) == 1 + 3
    assert s.groups.tolist() == [1, 3, 3, 3]
    bt, _, _ = s.tensors([0, 1])
    assert tuple(bt.shape) == (2, 20, 1, 24, 24)
    with pytest.raises(ValueError):
        build_sequences({0: [_seq(t=5)]}, length=20)


# ---- training ----

def test_tbptt_detaches_between_chunks():
    torch.manual_seed(0)
    net = DopUsNet(get_variant("dopus4", widths=(4, 8)))
    b = torch.rand(1, 8, 1, 8, 8, requires_grad=True)
    d = (torch.rand(1, 8, 1, 8, 8) > 0.7).float()
    g = (torch.rand(1, 8, 1, 8, 8) > 0.5).float()
    snaps = []

    def hook(loss):
        snaps.append(b.grad.clone())
        net.zero_grad()

    losses = tbptt_backward(net, b, d, g, every=4, on_chunk=hook)
    assert len(losses) == 2
    # the first chunk reaches only its own frames
    assert snaps[0][:, :4].abs().sum() > 0 and snaps[0][:, 4:].abs().sum() == 0
    # the second chunk's loss adds nothing to the first chunk's inputs
    torch.testing.assert_close(snaps[1][:, :4], snaps[0][:, :4], rtol=0, atol=0)
    assert snaps[1][:, 4:].abs().sum() > 0


def _toy_set():
    rng = np.random.default_rng(0)
    arrays = {}
    for p in range(2):
        t = 24
        b = 0.6 + 0.05 * rng.standard_normal((t, 16, 16))
        g = np.zeros((t, 16, 16))
        for k in range(t):
            c = 6 + (k % 4)
            g[k] = disk_mask(16, 16, 8, c, 3)
        b = np.where(g > 0, 0.1, b).clip(0, 1)
        d = g.copy()
        arrays[p] = [(b.astype(np.float32), d.astype(np.float32), g.astype(np.float32))]
    return arrays


def test_train_smoke_and_determinism():
    arrays = _toy_set()
    seqs = build_sequences(arrays, 20, 4)

    def once():
        torch.manual_seed(0)
        net = DopUsNet(get_variant("dopus4", widths=(4, 8)))
        cfg = TrainConfig(lr=1e-2, batch_size=2, max_iterations=12, rng_seed=3, augment=True)
        return train(net, seqs, cfg)

    r1, r2 = once(), once()
    # one optimiser step per TBPTT chunk; the cap is checked after each batch (5 chunks)
    assert 12 <= r1.iterations < 12 + 5
    assert [c[1] for c in r1.curve] == [c[1] for c in r2.curve]
    assert r1.curve[-1][1] < r1.curve[0][1]


def test_train_rejects_bad_data():
    seqs = build_sequences(_toy_set(), 20, 4)
    net = DopUsNet(get_variant("unet-b", widths=(4, 8)))
    with pytest.raises(ValueError):
        train(net, seqs, TrainConfig(sequence_length=10))
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_curve_csv(tmp_path):
    seqs = build_sequences(_toy_set(), 20, 4)
    net = DopUsNet(get_variant("unet-bd", widths=(4, 8)))
    res = train(net, seqs, TrainConfig(batch_size=4, max_iterations=3), seqs.subset([0]))
    text = res.write_curve(tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "iteration,loss,lr,val_dice" and len(text) == 1 + len(res.curve)
    assert not np.isnan(res.best_val_dice)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(4)
    net = DopUsNet(get_variant("dopus1", widths=(4, 8))).eval()
    path = save_checkpoint(net, tmp_path / "m", 16, {"note": 1})
    back, header = load_checkpoint(path)
    assert header["resolution"] == 16 and header["extra"] == {"note": 1}
    assert back.variant == net.variant
    b = np.random.default_rng(0).uniform(size=(3, 16, 16))
    d = np.zeros_like(b)
    np.testing.assert_array_equal(predict_sweep(net, b, d), predict_sweep(back, b, d))
    bad = tmp_path / "bad.npz"
    np.savez(bad, header=np.frombuffer(b'{"format": "x"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        load_checkpoint(bad)


# ---- classical segmenter ----

def _frame(bmode, doppler):
    return DuplexFrame(ImageGrid(bmode), ImageGrid(doppler), 0.0, ProbePose.from_tilt((0, 0, 0)))


def test_classical_on_clean_frame():
    rng = np.random.default_rng(0)
    gt = disk_mask(160, 160, 80, 70, 17)
    b = (0.6 + 0.05 * rng.standard_normal((160, 160)))
    b = np.where(gt > 0, 0.08, b).clip(0, 1)
    d = disk_mask(160, 160, 80, 70, 9)
    m = classical_segment(_frame(b, d))
    assert dice_score(m > 0.5, gt > 0.5) >= 0.7
    np.testing.assert_array_equal(m, classical_segment(_frame(b, d)))


def test_classical_uniform_is_empty():
    b = np.full((64, 64), 0.5)
    assert classical_segment(_frame(b, np.zeros((64, 64)))).sum() == 0
    assert classical_segment(_frame(b, disk_mask(64, 64, 32, 32, 5))).sum() == 0
