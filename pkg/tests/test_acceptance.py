"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train real models and take several minutes each.
"""

import time

import numpy as np
import pytest
from oracles import agreement_up_to_permutation, brute_vpq, count_iou, random_instance_sequence

from bevpredformer import checkpoint as ckpt
from bevpredformer import tensor as T
from bevpredformer.bev_encoder import BEVEncoder
from bevpredformer.dataset import read_dataset, write_dataset
from bevpredformer.geometry import (BEVGridConfig, Pose, build_reference_set, camera_from_present, default_rig,
                                    make_camera, project_points, unproject_pixels)
from bevpredformer.heads import PredictionHeads
from bevpredformer.image_encoder import Neck
from bevpredformer.losses import LOSS_NAMES, total_loss
from bevpredformer.metrics import iou_metric, vpq_metric
from bevpredformer.model import BEVPredFormerNet
from bevpredformer.postprocess import make_instance_prediction
from bevpredformer.synth import generate_dataset, generate_scenario, rasterize_gt
from bevpredformer.temporal import BlockConfig, DifferenceModule, TemporalEncoder
from bevpredformer.tensor import Tensor
from bevpredformer.train import (TrainConfig, evaluate, load_checkpoint, load_stage1_weights, run_ablation,
                                 save_checkpoint, train_stage1, train_stage2)

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return emit


def probe(shape, rng):
    w = Tensor(rng.standard_normal(shape))
    return lambda out: T.sum(out * w)


# 1. gradient suite -----------------------------------------------------------

def primitive_cases(rng):
    """(name, function of one tensor, input) with shapes drawn from ``rng``."""
    m, k, n = rng.integers(2, 6, 3)
    c, h, w = rng.integers(1, 4), 2 * rng.integers(2, 4), 2 * rng.integers(2, 4)

    def arr(*shape):
        return Tensor(rng.standard_normal(shape))

    other, x2 = arr(m, k), arr(m, k)
    wmat, conv_w, convt_w = arr(k, n), arr(2, c, 3, 3), arr(c, 2, 2, 2)
    gamma, beta = arr(k), arr(k)
    p_mk, p_mn = probe((m, k), rng), probe((m, n), rng)
    img = (1, c, h, w)
    idx = rng.integers(0, m, 5)
    coords = np.stack([rng.uniform(-0.5, w - 0.5, 7), rng.uniform(-0.5, h - 0.5, 7)], axis=1)
    p_conv = probe((1, 2, h // 2, w // 2), rng)
    p_convt = probe((1, 2, 2 * h, 2 * w), rng)
    p_pool = probe((1, c, h // 2, w // 2), rng)
    p_cat = probe((2 * m, k), rng)
    p_sl = probe((m - 1, k), rng)
    p_emb = probe((5, k), rng)
    p_bil = probe((7, c), rng)
    p_t = probe((k, m), rng)
    p_r = probe((m * k,), rng)
    p_st = probe((2, m, k), rng)
    p_ex = probe((3, m, k), rng)
    return [
        ("add", lambda v: p_mk(v + other), x2),
        ("sub", lambda v: p_mk(other - v), x2),
        ("mul", lambda v: p_mk(v * other), x2),
        ("scalar_mul", lambda v: p_mk(T.scalar_mul(v, 1.7)), x2),
        ("matmul_a", lambda v: p_mn(T.matmul(v, wmat)), x2),
        ("matmul_b", lambda v: p_mn(T.matmul(other, v)), wmat),
        ("conv2d", lambda v: p_conv(T.conv2d(v, conv_w, None, stride=2, padding=1)), arr(*img)),
        ("conv2d_w", lambda v: p_conv(T.conv2d(Tensor(np.ones(img)), v, None, stride=2, padding=1)), conv_w),
        ("conv_transpose2d", lambda v: p_convt(T.conv_transpose2d(v, convt_w, None, stride=2)), arr(*img)),
        ("max_pool2d", lambda v: p_pool(T.max_pool2d(v, 2)), arr(*img)),
        ("sum", lambda v: T.sum(T.sum(v, axis=0) * Tensor(np.arange(k) + 1.0)), x2),
        ("mean", lambda v: T.sum(T.mean(v, axis=1) * Tensor(np.arange(m) + 1.0)), x2),
        ("reshape", lambda v: p_r(T.reshape(v, (m * k,))), x2),
        ("permute", lambda v: p_t(T.permute(v, (1, 0))), x2),
        ("concat", lambda v: p_cat(T.concat([v, other], axis=0)), x2),
        ("slice", lambda v: p_sl(v[1:]), x2),
        ("stack", lambda v: p_st(T.stack([v, other], axis=0)), x2),
        ("expand", lambda v: p_ex(T.expand(v.reshape(1, m, k), (3, m, k))), x2),
        ("softmax", lambda v: p_mk(T.softmax(v)), x2),
        ("log_softmax", lambda v: p_mk(T.log_softmax(v)), x2),
        ("sigmoid", lambda v: p_mk(T.sigmoid(v)), x2),
        ("gelu", lambda v: p_mk(T.gelu(v)), x2),
        ("exp", lambda v: p_mk(T.exp(v)), x2),
        ("log", lambda v: p_mk(T.log(T.exp(v))), x2),
        ("abs", lambda v: p_mk(T.abs(v)), x2),
        ("layer_norm", lambda v: p_mk(T.layer_norm(v, gamma, beta)), x2),
        ("layer_norm_scale", lambda v: p_mk(T.layer_norm(other, v, beta)), gamma),
        ("embedding", lambda v: p_emb(T.embedding(v, idx)), other),
        ("bilinear_sample", lambda v: p_bil(T.bilinear_sample(v, coords)), arr(c, h, w)),
    ]


def composite_cases(seed):
    rng = np.random.default_rng(seed)
    cases = []
    neck = Neck(4, 6, 5, rng)
    f8, f16 = Tensor(rng.standard_normal((2, 4, 4, 6))), Tensor(rng.standard_normal((2, 6, 2, 3)))
    p_neck = probe((2, 5, 4, 6), rng)
    cases.append(("neck(stride 8)", lambda v: p_neck(neck(v, f16)), f8))
    cases.append(("neck(stride 16)", lambda v: p_neck(neck(f8, v)), f16))

    grid = BEVGridConfig(4, 4, (-8.0, 8.0), (-8.0, 8.0), (0.0, 1.0))
    refs = build_reference_set(grid, default_rig(32, 32), [Pose.planar(-1.0, 0.2, 0.05), Pose.identity()])
    enc = BEVEncoder(4, 4, 4, 2, rng, n_layers=1, heads=2)
    feats = Tensor(rng.standard_normal((4, 4, 4, 4)))
    p_bev = probe((2, 4, 4, 4), rng)
    cases.append(("bev_encode", lambda v: p_bev(enc(v, refs, 8)), feats))

    seq = Tensor(rng.standard_normal((3, 4, 8, 8)))
    dm = DifferenceModule(4, rng)
    te = TemporalEncoder(4, BlockConfig("TST", 1, 16, 2, 2), rng)
    heads = PredictionHeads(4, 3, 6, rng)
    p, p6 = probe((3, 4, 8, 8), rng), probe((6, 2, 8, 8), rng)
    cases.append(("difference_features", lambda v: p(dm(v)), seq))
    cases.append(("temporal_encode", lambda v: p(te(v)), seq))
    cases.append(("heads", lambda v: p6(heads(v).seg_logits) + p6(heads(v).flow), seq))

    parts = {n: Tensor(v) for n, v in zip(LOSS_NAMES, rng.random(4) * 2)}
    cases.append(("total_loss", lambda v: total_loss(parts, v).total, Tensor(rng.standard_normal(4) * 0.5)))
    return cases


def test_1_gradient_suite(report):
    t0 = time.time()
    worst = {}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, f, x in primitive_cases(rng) + composite_cases(seed):
            err = T.finite_diff_check(f, x, max_elements=60, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    elapsed = time.time() - t0
    report(1, err < 1e-2 and elapsed < 120,
           f"{len(worst)} checks x {len(SEEDS)} seeds, worst {name} rel err {err:.2e} (< 1e-2), {elapsed:.0f} s")


# 2. metric oracles -----------------------------------------------------------

def test_2_metric_oracles(report):
    t0 = time.time()
    masks = ((np.arange(512)[:, None] >> np.arange(9)) & 1).reshape(512, 1, 3, 3)
    # independent oracle: popcounts of the 9-bit codes
    codes = np.arange(512)
    pop = np.vectorize(lambda v: bin(int(v)).count("1"))
    inter, union = pop(codes[:, None] & codes[None, :]), pop(codes[:, None] | codes[None, :])
    expect = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    iou_bad = sum(iou_metric(masks[i], masks[j]) != expect[i, j] for i in range(512) for j in range(512))
    # a handful of pairs also through the cell-counting oracle
    rng = np.random.default_rng(0)
    for i, j in rng.integers(0, 512, (50, 2)):
        assert count_iou(masks[i], masks[j]) == expect[i, j]

    vpq_err = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        gt = random_instance_sequence(rng)
        pred = random_instance_sequence(rng)
        if rng.random() < 0.5:                  # correlated case: jittered copy of gt
            pred = np.where(rng.random(gt.shape) < 0.15, 0, gt)
        vpq_err = max(vpq_err, abs(vpq_metric(pred, gt) - brute_vpq(pred, gt)))
    elapsed = time.time() - t0
    report(2, iou_bad == 0 and vpq_err <= 1e-9 and elapsed < 180,
           f"IoU mismatches {iou_bad}/262144, max VPQ deviation {vpq_err:.1e} over 1000 seeds, {elapsed:.0f} s")


# 3. ground-truth self-consistency --------------------------------------------

def test_3_gt_self_consistency(report):
    t0 = time.time()
    agree, occupied, vpq_min = 0.0, 0, 1.0
    for seed in range(100):
        gt = rasterize_gt(generate_scenario(10_000 + seed))
        logits = np.stack([np.where(gt.seg > 0, -5.0, 5.0), np.where(gt.seg > 0, 5.0, -5.0)], axis=1)
        labels = make_instance_prediction(logits, gt.flow)
        n = int((gt.instances > 0).sum())
        agree += agreement_up_to_permutation(labels, gt.instances) * n
        occupied += n
        vpq_min = min(vpq_min, vpq_metric(gt.instances, gt.instances))
    frac = agree / occupied
    elapsed = time.time() - t0
    report(3, frac >= 0.99 and vpq_min == 1.0 and elapsed < 120,
           f"label agreement {frac * 100:.2f}% of {occupied} occupied cells, min VPQ(GT,GT) {vpq_min}, "
           f"{elapsed:.0f} s")


# 4. geometry -----------------------------------------------------------------

def test_4_geometry(report):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_m = 0.0
    for _ in range(10):
        cam = make_camera(rng.uniform(-np.pi, np.pi), rng.uniform(-0.3, 0.1), rng.uniform(-1, 1, 3) + [0, 0, 1.5],
                          rng.uniform(50, 100), 96, 64)
        present = Pose.planar(*rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi))
        past = Pose.planar(*rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi))
        k = cam.intrinsics
        z = rng.uniform(0.5, 60.0, 1000)
        u, v = rng.uniform(0, k.width, 1000), rng.uniform(0, k.height, 1000)
        in_cam = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)
        pts = camera_from_present(present, past, cam.extrinsic).inverse().apply(in_cam)
        pix, valid = project_points(pts, present, past, cam.extrinsic, k)
        assert valid.all()
        depth = camera_from_present(present, past, cam.extrinsic).apply(pts)[:, 2]
        back = unproject_pixels(pix, depth, present, past, cam.extrinsic, k)
        worst_m = max(worst_m, float(np.linalg.norm(back - pts, axis=1).max()))

    # ego moved 2 m forward from the past frame to the present: the world slides
    # 2 m backwards past the car, so a present-frame point sits 2 m further
    # ahead in the past frame, and 2 m nearer when the motion is reversed
    cam = default_rig()[0]
    pts = np.stack([rng.uniform(4, 30, 500), rng.uniform(-10, 10, 500), rng.uniform(0, 2, 500)], axis=1)
    fwd = np.array([2.0, 0.0, 0.0])
    ident = Pose.identity()
    worst_px = 0.0
    for present, past, shift in ((Pose.planar(2.0, 0.0, 0.0), ident, fwd), (ident, Pose.planar(2.0, 0.0, 0.0), -fwd)):
        a, va = project_points(pts, present, past, cam.extrinsic, cam.intrinsics)
        b, vb = project_points(pts + shift, ident, ident, cam.extrinsic, cam.intrinsics)
        assert np.array_equal(va, vb) and va.sum() > 50
        worst_px = max(worst_px, float(np.abs(a - b)[va > 0].max()))
    elapsed = time.time() - t0
    report(4, worst_m < 1e-5 and worst_px < 1e-5 and elapsed < 30,
           f"round trip {worst_m:.1e} m on 10^4 points, ego-motion equivalence {worst_px:.1e} px, {elapsed:.1f} s")


# 5. overfit ------------------------------------------------------------------

def overfit_cfg(stage, steps):
    # epochs set high so that max_steps is the binding limit
    return TrainConfig(stage=stage, epochs=1000, max_steps=steps, max_lr=1e-3,
                       augment_images=False, augment_bev=False, seed=0)


def test_5_overfit(report, tmp_path):
    t0 = time.time()
    data = generate_dataset(8, seed=123)
    s1 = train_stage1(overfit_cfg(1, 400), data)
    net = BEVPredFormerNet(overfit_cfg(2, 800).model_config(data[0]))
    load_stage1_weights(net, s1.net.state_dict())
    s2 = train_stage2(overfit_cfg(2, 800), data, net)
    steps = len(s1.losses) + len(s2.losses)
    m = s2.metrics
    # the checkpoint must reproduce the logged training metrics
    save_checkpoint(s2.net, tmp_path / "overfit.bpft", overfit_cfg(2, 800), stage=2, metrics=m)
    again = evaluate(load_checkpoint(tmp_path / "overfit.bpft")[0], data)
    consistent = all(abs(again[k] - m[k]) <= 1e-6 for k in ("iou", "vpq"))
    elapsed = time.time() - t0
    ok = m["iou"] >= 0.7 and m["vpq"] >= 0.5 and steps <= 2000 and elapsed < 1800 and consistent
    report(5, ok, f"train IoU {m['iou']:.3f} (>= 0.7), VPQ {m['vpq']:.3f} (>= 0.5), "
                  f"present-frame IoU after stage 1 {s1.metrics['present_iou']:.3f}, {steps} steps, "
                  f"checkpoint re-evaluation {'matches' if consistent else 'differs'}, {elapsed / 60:.1f} min")


# 6. temporal trend -----------------------------------------------------------

def test_6_temporal_trend(report):
    t0 = time.time()
    train, val = generate_dataset(64, seed=2024), generate_dataset(16, seed=4048)
    rows = []
    for seed in SEEDS:
        base = dict(max_lr=1e-3, augment_images=False, augment_bev=False, seed=seed)
        s1 = train_stage1(TrainConfig(stage=1, max_steps=960, **base), train)
        rows += run_ablation(TrainConfig(stage=2, max_steps=640, **base), train, val, patterns=("TST", "none"),
                             blocks=(2,), seeds=(seed,), stage1_state=s1.net.state_dict())
    tst = np.mean([r["iou"] for r in rows if r["pattern"] == "TST"])
    none = np.mean([r["iou"] for r in rows if r["pattern"] == "none"])
    elapsed = time.time() - t0
    per_seed = ", ".join(f"{r['pattern']}/s{r['seed']} {r['iou']:.3f}" for r in rows)
    report(6, tst >= none - 0.01 and elapsed < 7200,
           f"mean val IoU TST {tst:.4f} vs none {none:.4f} (gap {tst - none:+.4f}, gate >= -0.01); "
           f"{per_seed}; {elapsed / 60:.0f} min")


# 7. structural ablation contract ---------------------------------------------

def test_7_structure(report):
    t0 = time.time()
    sample = generate_dataset(1, seed=0)[0]
    layers_ok, params = True, {}
    for pattern in ("TS", "TST", "TSST"):
        for nb in (1, 2, 3):
            te = TemporalEncoder(8, BlockConfig(pattern, nb, 16, 2, 2), np.random.default_rng(0))
            te(Tensor(np.random.default_rng(1).standard_normal((3, 8, 8, 8))))
            layers_ok &= len(te.executed) == nb * len(pattern) == len(te.layers)
            cfg = TrainConfig(pattern=pattern, n_blocks=nb).model_config(sample)
            params[pattern, nb] = BEVPredFormerNet(cfg).num_parameters()
    increasing = all(params[p, 1] < params[p, 2] < params[p, 3] for p in ("TS", "TST", "TSST"))
    elapsed = time.time() - t0
    counts = ", ".join(f"{p}x{n}={c}" for (p, n), c in params.items())
    report(7, layers_ok and increasing and elapsed < 10,
           f"layer counts {'match' if layers_ok else 'differ'}, params {counts}, {elapsed:.1f} s")


# 8. determinism and serialization --------------------------------------------

def test_8_determinism_and_serialization(report, tmp_path):
    t0 = time.time()
    data = generate_dataset(3, seed=7)
    cfg = TrainConfig(max_steps=10, seed=5)         # augmentation on: the draws must repeat too
    a, b = train_stage1(cfg, data), train_stage1(cfg, data)
    traces_equal = a.losses == b.losses and len(a.losses) == 10

    save_checkpoint(a.net, tmp_path / "a.bpft", cfg, stage=1)
    net, _ = load_checkpoint(tmp_path / "a.bpft")
    weights_equal = all(np.array_equal(x, y) for x, y in zip(a.net.state_dict().values(), net.state_dict().values()))
    save_checkpoint(net, tmp_path / "b.bpft", cfg, stage=1)
    ckpt_bytes = (tmp_path / "a.bpft").read_bytes() == (tmp_path / "b.bpft").read_bytes()
    raw = ckpt.loads(ckpt.dumps(a.net.state_dict()))
    weights_equal &= list(raw) == list(a.net.state_dict())

    write_dataset(tmp_path / "d.bpds", data)
    back = read_dataset(tmp_path / "d.bpds")
    write_dataset(tmp_path / "e.bpds", back)
    data_bytes = (tmp_path / "d.bpds").read_bytes() == (tmp_path / "e.bpds").read_bytes()
    data_equal = all(np.array_equal(x.images, y.images)
                     and all(np.array_equal(x.gt.tensors()[k], y.gt.tensors()[k]) for k in x.gt.tensors())
                     for x, y in zip(data, back))
    elapsed = time.time() - t0
    ok = traces_equal and weights_equal and ckpt_bytes and data_bytes and data_equal and elapsed < 120
    report(8, ok, f"10-step traces {'identical' if traces_equal else 'differ'}, checkpoint "
                  f"{'bit-exact' if weights_equal and ckpt_bytes else 'differs'}, dataset "
                  f"{'bit-exact' if data_bytes and data_equal else 'differs'}, {elapsed:.0f} s")
