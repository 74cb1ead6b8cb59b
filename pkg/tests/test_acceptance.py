"""Release gates. Every test prints one verdict line on the real stdout
(bypassing capture) so a full run always shows nine PASS/FAIL tallies in
order, then asserts.

The multiply-accumulate budget gate (criterion 3) is expected to fail: under
the stated counting convention the architecture costs ~48.7G Multi-Adds for
a 1280x720 output, while the budget says 32.6G +-10%. The budget is
internally inconsistent with the parameter budget of criterion 1 (the same
convention reproduces the published cost of comparable baselines from their
parameter counts, but not this one). The counter is kept faithful and the
gate is asserted as stated rather than bent to go green."""

import json
import math
import re
import sys

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from hffn import imaging as I
from hffn import tensor as T
from hffn.autodiff import EVAL, Tape, backward, finite_diff_check
from hffn.blocks import BlockGroup, FreqSplitBlock
from hffn.cli import main
from hffn.network import ModelConfig, build, load_weights
from hffn.training import TrainConfig, train_toy, smoothed

from helpers import ACCEPTANCE_VERDICTS, smooth_image, write_pngs


def _verdict(num, ok, detail):
    status = "PASS" if ok else "FAIL"
    line = f"[criterion {num}] {status} - {detail}"
    # Twice on purpose: the direct print lands next to a failure's traceback,
    # while the recorded copy is echoed by a terminal-summary hook that
    # output capture cannot eat.
    print(line, file=sys.__stdout__, flush=True)
    ACCEPTANCE_VERDICTS.append(line)
    return ok


def _summary_totals(capsys, *extra_flags):
    assert main(["summary", *extra_flags]) == 0
    out = capsys.readouterr().out
    found = re.findall(r"^\s*total\s+([\d,]+)", out, flags=re.MULTILINE)
    return [int(s.replace(",", "")) for s in found]


# ---------------------------------------------------------------------------
# 1. parameter budget per scale
# ---------------------------------------------------------------------------

def test_criterion_1_parameter_budget(capsys):
    budgets = {4: 867_000, 2: 851_000, 3: 857_000}
    measured = {}
    for scale, budget in budgets.items():
        flags = ["--scale", str(scale)]
        if scale == 3:
            # 1280 is not divisible by 3; state the nearest 720p-class
            # resolution that is (the totals under test are
            # resolution-independent anyway).
            flags += ["--out-res", "1278x720"]
        params, _ = _summary_totals(capsys, *flags)
        measured[scale] = params
    ok = all(
        abs(measured[s] - budgets[s]) <= 0.10 * budgets[s] for s in budgets
    )
    detail = ", ".join(
        f"x{s}: {measured[s]:,} (budget {budgets[s] / 1000:.0f}K +-10%)"
        for s in sorted(budgets)
    )
    assert _verdict(1, ok, f"parameter totals {detail}"), detail


# ---------------------------------------------------------------------------
# 2. depth sweep budget
# ---------------------------------------------------------------------------

def test_criterion_2_depth_sweep_budget():
    budgets = {4: 705_000, 5: 867_000, 6: 1_026_000}
    measured = {
        m: build(ModelConfig(m_blocks=m)).param_count().total for m in (4, 5, 6)
    }
    within = all(abs(measured[m] - budgets[m]) <= 0.10 * budgets[m] for m in budgets)
    increasing = measured[4] < measured[5] < measured[6]
    detail = (
        ", ".join(f"m={m}: {measured[m]:,}" for m in sorted(measured))
        + ("; strictly increasing" if increasing else "; NOT increasing")
    )
    assert _verdict(2, within and increasing, detail), detail


# ---------------------------------------------------------------------------
# 3. multiply-accumulate budget (expected red; see the module docstring)
# ---------------------------------------------------------------------------

def test_criterion_3_multi_adds_budget():
    budget = 32_600_000_000
    measured = build(ModelConfig(scale=4)).multi_adds(720, 1280).total
    ok = abs(measured - budget) <= 0.10 * budget
    detail = (
        f"Multi-Adds at 1280x720: {measured:,} vs budget {budget:,} +-10% "
        f"(max {1.10 * budget:,.0f})"
    )
    _verdict(3, ok, detail)
    assert ok, (
        f"{detail}. The counter follows the stated convention - stride-1 convs "
        f"at working resolution, the transposed upsampler per scatter multiply, "
        f"gate convs on 1x1 summaries, pooling/adds/activations free - which "
        f"reproduces comparable baselines' published costs from their parameter "
        f"counts (params x LR pixels). For this architecture the same arithmetic "
        f"gives {measured / 1e9:.2f}G, so the 32.6G figure cannot be met by any "
        f"counter that also satisfies the criterion-1 parameter budget; the "
        f"budget itself is inconsistent. Kept faithful and red by design."
    )


# ---------------------------------------------------------------------------
# 4. numerical correctness: oracle sweep + full-model gradient check
# ---------------------------------------------------------------------------

def _oracle_conv2d(x, w, b, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwkl,ockl->nohw", win, w)
    return out if b is None else out + b.reshape(1, -1, 1, 1)


def _oracle_depthwise(x, w, b, padding):
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("nchwkl,ckl->nchw", win, w[:, 0])
    return out if b is None else out + b.reshape(1, -1, 1, 1)


def _oracle_conv_transpose(x, w, b, stride):
    n, ci, h, wd = x.shape
    co, k = w.shape[1], w.shape[2]
    out = np.zeros((n, co, (h - 1) * stride + k, (wd - 1) * stride + k))
    for p in range(k):
        for q in range(k):
            contrib = np.einsum("nchw,co->nohw", x, w[:, :, p, q])
            out[:, :, p : p + (h - 1) * stride + 1 : stride,
                q : q + (wd - 1) * stride + 1 : stride] += contrib
    return out if b is None else out + b.reshape(1, -1, 1, 1)


def _oracle_avg_pool(x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.mean(axis=(-2, -1))


def _oracle_pixel_shuffle(x, r):
    n, c, h, w = x.shape
    return (
        x.reshape(n, c // (r * r), r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c // (r * r), h * r, w * r)
    )


def _random_op_cases(rng):
    """(label, engine_output, oracle_output) for 110 randomized shapes."""
    cases = []
    for _ in range(35):  # dense convolution
        n, ci, co = rng.integers(1, 3), rng.integers(1, 6), rng.integers(1, 6)
        k, stride, pad = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 3)
        h = int(rng.integers(max(1, k - 2 * pad), 9)) + k
        w = int(rng.integers(max(1, k - 2 * pad), 9)) + k
        x = rng.uniform(-1, 1, (n, ci, h, w))
        wt = rng.uniform(-1, 1, (co, ci, k, k))
        bias = rng.uniform(-1, 1, (1, co, 1, 1))
        got = T.conv2d(T.Tensor(x), T.Tensor(wt), T.Tensor(bias), stride=int(stride), padding=int(pad))
        want = _oracle_conv2d(x, wt, bias, int(stride), int(pad))
        cases.append(("conv2d", got.data, want))
    for _ in range(25):  # transposed convolution
        n, ci, co = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        k, stride = rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(2, 7), rng.integers(2, 7)
        x = rng.uniform(-1, 1, (n, ci, h, w))
        wt = rng.uniform(-1, 1, (ci, co, k, k))
        bias = rng.uniform(-1, 1, (1, co, 1, 1))
        got = T.conv_transpose2d(T.Tensor(x), T.Tensor(wt), T.Tensor(bias), stride=int(stride))
        want = _oracle_conv_transpose(x, wt, bias, int(stride))
        cases.append(("conv_transpose2d", got.data, want))
    for _ in range(20):  # depthwise convolution
        n, c = rng.integers(1, 3), rng.integers(1, 7)
        k = int(rng.integers(1, 4))
        pad = k // 2
        h = int(rng.integers(k, 9))
        w = int(rng.integers(k, 9))
        x = rng.uniform(-1, 1, (n, c, h, w))
        wt = rng.uniform(-1, 1, (c, 1, k, k))
        got = T.depthwise_conv2d(T.Tensor(x), T.Tensor(wt), padding=pad)
        want = _oracle_depthwise(x, wt, None, pad)
        cases.append(("depthwise_conv2d", got.data, want))
    for _ in range(15):  # average pooling
        n, c = rng.integers(1, 3), rng.integers(1, 5)
        k = int(rng.integers(1, 4))
        h, w = k * int(rng.integers(1, 4)), k * int(rng.integers(1, 4))
        x = rng.uniform(-1, 1, (n, c, h, w))
        got = T.avg_pool2d(T.Tensor(x), k, k)
        cases.append(("avg_pool2d", got.data, _oracle_avg_pool(x, k, k)))
    for _ in range(15):  # pixel shuffle
        n, r = rng.integers(1, 3), int(rng.integers(1, 4))
        c = r * r * int(rng.integers(1, 4))
        h, w = rng.integers(1, 6), rng.integers(1, 6)
        x = rng.uniform(-1, 1, (n, c, h, w))
        got = T.pixel_shuffle(T.Tensor(x), r)
        cases.append(("pixel_shuffle", got.data, _oracle_pixel_shuffle(x, r)))
    return cases


def _mini_model():
    return build(
        ModelConfig(scale=2, channels=8, n_groups=1, m_blocks=1, cca_reduction=2),
        seed=11,
    )


def _sampled_weight_gradient_error(model, x, cot):
    """Max relative error of taped parameter gradients against central
    differences, two sampled coordinates per parameter tensor."""

    def scalar():
        return float((model.forward(x).data * cot).mean())

    tape = Tape()
    out = model.forward(tape.constant(x), engine=tape)
    loss = tape.mean_all(tape.mul(out, tape.constant(T.Tensor(cot))))
    grads = backward(tape, loss)

    rng = np.random.default_rng(7)
    step = 1e-5
    worst = 0.0
    for p in model.parameters():
        flat_indices = rng.choice(p.value.size, size=min(2, p.value.size), replace=False)
        for flat in flat_indices:
            idx = np.unravel_index(flat, p.value.shape)
            original = p.value
            bump = np.zeros(p.value.shape)
            bump[idx] = step
            p.value = T.Tensor(original.data + bump)
            up = scalar()
            p.value = T.Tensor(original.data - bump)
            down = scalar()
            p.value = original
            numeric = (up - down) / (2.0 * step)
            analytic = float(grads[p.name].data[idx])
            worst = max(worst, abs(analytic - numeric) / (abs(numeric) + 1e-12))
    return worst


def test_criterion_4_numerics():
    cases = _random_op_cases(np.random.default_rng(404))
    worst_op = max(float(np.abs(got - want).max()) for _, got, want in cases)
    ops_ok = worst_op <= 1e-10 and len(cases) >= 100

    model = _mini_model()
    x = T.Tensor(np.random.default_rng(405).uniform(0.1, 0.9, (1, 3, 8, 8)))
    input_err = finite_diff_check(
        lambda tape, node: model.forward(node, engine=tape), x, step=1e-5, seed=0
    )
    cot = np.random.default_rng(406).uniform(0.5, 1.5, (1, 3, 16, 16))
    weight_err = _sampled_weight_gradient_error(model, x, cot)
    grad_ok = input_err <= 1e-4 and weight_err <= 1e-4

    detail = (
        f"{len(cases)} randomized op shapes, worst |err| {worst_op:.2e} (<= 1e-10); "
        f"full-model gradients: input {input_err:.2e}, sampled weights "
        f"{weight_err:.2e} (<= 1e-4)"
    )
    assert _verdict(4, ops_ok and grad_ok, detail), detail


# ---------------------------------------------------------------------------
# 5. block identities
# ---------------------------------------------------------------------------

def _zeroed(layer):
    for p in layer.parameters():
        p.value = T.zeros(p.value.shape, dtype=p.value.dtype)


def test_criterion_5_block_identities():
    rng = np.random.default_rng(505)
    x = T.Tensor(rng.uniform(-1.0, 1.0, (1, 48, 8, 8)))

    block = FreqSplitBlock("b", 48, np.random.default_rng(1))
    _zeroed(block.fuse)
    block_identity = np.array_equal(block.forward(EVAL, x).data, x.data)

    group = BlockGroup("g", 48, 5, np.random.default_rng(2))
    _zeroed(group.fuse)
    group_identity = np.array_equal(group.forward(EVAL, x).data, x.data)

    a, b = T.channel_split(x, 24)
    round_trip = np.array_equal(T.channel_concat([a, b]).data, x.data)

    # The two-frequency decomposition: the detail map is defined as
    # source - smooth, so that direction is checked to the bit; the summed
    # reconstruction re-rounds once and is checked at float resolution.
    probe = FreqSplitBlock("p", 48, np.random.default_rng(3))
    record = {}
    probe.forward(EVAL, x, record=record)
    source = record["source"].data
    detail_exact = np.array_equal(record["high"].data, source - record["low"].data)
    recon = float(
        np.abs((record["low"].data + record["high"].data) - source).max()
    ) / max(1.0, float(np.abs(source).max()))
    recon_ok = recon <= 1e-11

    ok = block_identity and group_identity and round_trip and detail_exact and recon_ok
    detail = (
        f"zero-fuse block identity {'bitwise' if block_identity else 'BROKEN'}, "
        f"zero-fuse group identity {'bitwise' if group_identity else 'BROKEN'}, "
        f"split/concat round-trip {'bitwise' if round_trip else 'BROKEN'}; "
        f"high == source - low {'bitwise' if detail_exact else 'BROKEN'}, "
        f"summed reconstruction {recon:.1e} rel (exact in real arithmetic, "
        f"one rounding in floats)"
    )
    assert _verdict(5, ok, detail), detail


# ---------------------------------------------------------------------------
# 6. metrics oracle
# ---------------------------------------------------------------------------

def test_criterion_6_metrics_oracle():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(606)

    # closed forms
    img = I.Image(rng.uniform(0, 1, (1, 16, 16)), "Y")
    inf_ok = I.psnr(img, img) == math.inf and I.ssim(img, img) == 1.0
    shift = 10.0 / 255.0
    shift_psnr = I.psnr(I.Image(np.full((1, 16, 16), 0.5), "Y"),
                        I.Image(np.full((1, 16, 16), 0.5 + shift), "Y"))
    shift_err = abs(shift_psnr - 10.0 * math.log10(1.0 / shift**2))

    # independent reference implementation
    a = rng.uniform(0.0, 1.0, (24, 26))
    b = np.clip(a + rng.normal(0.0, 0.04, a.shape), 0.0, 1.0)
    ia, ib = I.Image(a[None], "Y"), I.Image(b[None], "Y")
    psnr_err = abs(I.psnr(ia, ib) - skm.peak_signal_noise_ratio(a, b, data_range=1.0))
    ssim_err = abs(
        I.ssim(ia, ib)
        - skm.structural_similarity(
            a, b, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0,
        )
    )

    # monotonicity in noise
    base = rng.uniform(0.3, 0.7, (1, 14, 14))
    noise = rng.normal(0.0, 1.0, base.shape)
    series = [
        I.psnr(I.Image(base, "Y"), I.Image(base + eps * noise, "Y"))
        for eps in (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
    ]
    monotone = all(p > q for p, q in zip(series, series[1:]))

    ok = (
        inf_ok and shift_err <= 1e-4 and psnr_err <= 1e-4
        and ssim_err <= 1e-4 and monotone
    )
    detail = (
        f"identical pair -> (inf, 1.0): {inf_ok}; shift closed form err "
        f"{shift_err:.1e}; vs reference psnr {psnr_err:.1e} / ssim {ssim_err:.1e} "
        f"(<= 1e-4); noise monotonicity over 5 levels: {monotone}"
    )
    assert _verdict(6, ok, detail), detail


# ---------------------------------------------------------------------------
# 7. toy training
# ---------------------------------------------------------------------------

def test_criterion_7_toy_training():
    # halving: 500 steps, batch 4, 8 synthetic pairs, x2
    rng = np.random.default_rng(1234)
    pairs = [
        I.make_pair(smooth_image(rng, 96, 96), 2, name=f"synth{i}") for i in range(8)
    ]
    model = build(ModelConfig(scale=2, channels=16, n_groups=1, m_blocks=2), seed=0)
    curve = train_toy(model, pairs, TrainConfig(steps=500, batch=4, patch=32, seed=0))
    sm = smoothed(curve, window=25)
    ratio = sm[-1] / sm[0]

    # single-image overfit: 2000 steps, PSNR on the training patch
    pair = I.make_pair(smooth_image(np.random.default_rng(42), 64, 64), 2, name="one")
    over = build(ModelConfig(scale=2, channels=16, n_groups=1, m_blocks=1), seed=0)

    def train_psnr(m):
        sr = m.forward(I.to_tensor(pair.lr, dtype=m.dtype))
        return I.psnr(I.from_tensor(sr), pair.hr, shave=2)

    before = train_psnr(over)
    train_toy(over, [pair], TrainConfig(steps=2000, batch=4, patch=32, seed=0))
    gain = train_psnr(over) - before

    ok = ratio <= 0.5 and gain >= 5.0
    detail = (
        f"500-step smoothed loss ratio {ratio:.3f} (<= 0.5); 2000-step overfit "
        f"gain {gain:+.1f} dB (>= +5 dB)"
    )
    assert _verdict(7, ok, detail), detail


# ---------------------------------------------------------------------------
# 8. ablation configurations build and run
# ---------------------------------------------------------------------------

def test_criterion_8_ablation_builds():
    flags = ["hfe_enabled", "lfde_enabled", "groups_enabled", "dsconv_enabled", "cca_enabled"]
    x = T.Tensor(np.random.default_rng(808).uniform(0, 1, (1, 3, 16, 16)))
    outcomes = []
    for flag in flags:
        model = build(ModelConfig(**{flag: False}), seed=0)
        out = model.forward(x)
        outcomes.append(out.shape == (1, 3, 64, 64) and bool(np.isfinite(out.data).all()))
    ok = all(outcomes)
    detail = (
        f"{len(flags)} single-switch ablations of the full-size model "
        f"constructed and ran forward ({sum(outcomes)}/{len(flags)} clean)"
    )
    assert _verdict(8, ok, detail), detail


# ---------------------------------------------------------------------------
# 9. end-to-end pipeline determinism
# ---------------------------------------------------------------------------

def test_criterion_9_end_to_end(tmp_path, capsys):
    hr_dir = tmp_path / "fixtures"
    hr_dir.mkdir()
    pngs = write_pngs(np.random.default_rng(909), hr_dir, 4, 20, 20)

    tiny = [
        "--scale", "2", "--channels", "8", "--n-groups", "1",
        "--m-blocks", "1", "--cca-reduction", "2",
    ]

    def pipeline(tag):
        weights = tmp_path / f"{tag}.hffn"
        curve = tmp_path / f"{tag}.csv"
        sr_png = tmp_path / f"{tag}_sr.png"
        report = tmp_path / f"{tag}.json"
        rcs = [
            main([
                "train-toy", *tiny, "--data-dir", str(hr_dir),
                "--out-weights", str(weights), "--steps", "5", "--batch", "2",
                "--patch", "8", "--seed", "1", "--curve", str(curve),
            ]),
            main([
                "sr", "--weights", str(weights),
                "--input", str(pngs[0]), "--output", str(sr_png),
            ]),
            main([
                "eval", "--hr-dir", str(hr_dir), "--scale", "2",
                "--weights", str(weights), "--report", str(report),
            ]),
        ]
        return rcs, [p.read_bytes() for p in (weights, curve, sr_png, report)]

    rcs_a, blobs_a = pipeline("run1")
    rcs_b, blobs_b = pipeline("run2")
    capsys.readouterr()  # drop the pipelines' own chatter

    clean = rcs_a == [0, 0, 0] and rcs_b == [0, 0, 0]
    identical = blobs_a == blobs_b
    loadable = load_weights(tmp_path / "run1.hffn").config.channels == 8

    # the eval report must carry real metrics for every fixture
    doc = json.loads(blobs_a[3].decode())
    report_ok = len(doc["per_image"]) == 4 and all(
        isinstance(e["psnr"], float) for e in doc["per_image"]
    )

    ok = clean and identical and loadable and report_ok
    detail = (
        f"train-toy -> sr -> eval on 4 fixtures: exit codes {rcs_a} / {rcs_b}; "
        f"weights, curve, SR image and report byte-identical across runs: "
        f"{identical}; report carries 4 per-image metric rows: {report_ok}"
    )
    assert _verdict(9, ok, detail), detail
