"""Acceptance suite: one check per criterion, each reporting a PASS/FAIL line.

Run on its own with ``python tests/test_acceptance.py`` or as part of
``pytest``; the summary lines are repeated at the end of the session.
The training criteria use the desk-width preset (same topology, narrower
layers) so that they run on one CPU core.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ornet import fd, freq, rfa  # noqa: E402
from ornet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: E402
from ornet.data import synthesize_degradation, synthetic_pairs, upsample_lr  # noqa: E402
from ornet.gradcheck import check_gradients, directional_check, relative_error  # noqa: E402
from ornet.metrics import PSNR_CAP, psnr, ssim  # noqa: E402
from ornet.model import ModelConfig, ORNet, desk_config, l1_loss  # noqa: E402
from ornet.tensor import Conv2dParams, Tensor, absolute, bilinear_upsample, conv2d, mul, sigmoid, sum_all  # noqa: E402
from ornet.train import TrainConfig, evaluate, train_loop  # noqa: E402

from test_data import brute_ssim  # noqa: E402
from test_fd import make_feu, random_stems, randomize_biases  # noqa: E402
from test_rfa import basis_conv, make_pool  # noqa: E402
from test_tensor import OP_CASES  # noqa: E402

RESULTS: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)


# -- 1 --------------------------------------------------------------------------

def test_c1_decomposition_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        b = fd.decompose(Tensor(rng.uniform(size=(1, 3, 16, 16))), random_stems(rng, width=int(rng.integers(2, 9))))
        worst = max(worst,
                    np.abs(b.f_h.data - (b.stem_full.data - bilinear_upsample(b.stem_half, 2).data)).max(),
                    np.abs(b.f_m.data - (b.stem_half.data - bilinear_upsample(b.stem_quarter, 2).data)).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 10
    report(1, ok, f"max identity error {worst:.2e} over 50 seeds (< 1e-9), {elapsed:.2f} s (< 10 s)")
    assert ok


# -- 2 --------------------------------------------------------------------------

def _composite_cases():
    def dynamic(rng):
        pool = make_pool(rng, m=3, cin=3)
        omni = Tensor(rng.normal(size=(1, 3, 4, 4)), True)
        probe = Tensor(rng.normal(size=(1, 3, 4, 4)))
        return (lambda: sum_all(mul(rfa.aggregate(rfa.attention_map(omni, pool), omni), probe))), \
            [omni] + pool.tensors()

    def feu(rng):
        p = make_feu(rng)
        randomize_biases(p, rng)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)), True)
        probe = Tensor(rng.normal(size=(1, 4, 4, 4)))
        return (lambda: sum_all(mul(fd.feu_forward(x, p), probe))), [x] + p.tensors()

    def decompose(rng):
        stems = random_stems(rng, width=2)
        x = Tensor(rng.uniform(size=(1, 3, 8, 8)), True)
        probes = [Tensor(rng.normal(size=s)) for s in ((1, 2, 2, 2), (1, 2, 4, 4), (1, 2, 8, 8))]

        def f():
            bands = fd.decompose(x, stems).bands
            total = sum_all(mul(bands[0], probes[0]))
            for band, pr in zip(bands[1:], probes[1:]):
                total = total + sum_all(mul(band, pr))
            return total
        return f, [x] + [t for s in stems for t in s.tensors()]

    def l1(rng):
        sr = Tensor(rng.normal(size=(1, 3, 4, 4)), True)
        hr = Tensor(rng.normal(size=(1, 3, 4, 4)))
        return (lambda: l1_loss(sr, hr)), [sr]

    def absval(rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)), True)
        probe = Tensor(rng.normal(size=(1, 3, 4, 4)))
        return (lambda: sum_all(mul(absolute(x), probe))), [x]

    return {"dynamic_conv+aggregate": dynamic, "feu": feu, "decompose": decompose, "l1_loss": l1, "abs": absval}


def test_c2_gradient_suite():
    t0 = time.perf_counter()
    cases = dict(OP_CASES, **_composite_cases())
    op_worst, op_name = 0.0, ""
    for name, make in sorted(cases.items()):
        for seed in range(5):
            err = check_gradients(*make(np.random.default_rng(seed)))
            if err > op_worst:
                op_worst, op_name = err, name

    net = ORNet(ModelConfig(), seed=0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    hr = Tensor(np.clip(x.data + 0.05 * rng.normal(size=x.shape), 0, 1))
    loss = lambda: l1_loss(net(x), hr)
    net.zero_grad()
    loss().backward()
    model_worst, model_name = 0.0, ""
    for name, t in net.named_parameters():
        a, n = directional_check(loss, t, t.grad, rng)
        err = relative_error(a, n)
        if err > model_worst:
            model_worst, model_name = err, name
    elapsed = time.perf_counter() - t0
    ok = op_worst < 1e-6 and model_worst < 1e-4 and elapsed < 300
    report(2, ok, f"{len(cases)} ops worst rel err {op_worst:.1e} ({op_name}, < 1e-6); full default model "
                  f"{len(net.params)} tensors worst {model_worst:.1e} ({model_name}, < 1e-4); {elapsed:.0f} s")
    assert ok


# -- 3 --------------------------------------------------------------------------

def test_c3_dynamic_kernel_equivalence():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pool = make_pool(rng, m=5, cin=4)
        omni = Tensor(rng.normal(size=(1, 4, 6, 6)))
        worst = max(worst, np.abs(rfa.attention_map(omni, pool).A.data - rfa.attention_map_positionwise(omni, pool)).max())

    rng = np.random.default_rng(99)
    pool = make_pool(rng, m=5, cin=4)
    pool.bias.data[:] = 0
    omni = Tensor(rng.normal(size=(1, 4, 6, 6)))
    one_hot = True
    for n in range(5):
        alpha = np.zeros((1, 5, 6, 6))
        alpha[:, n] = 1
        one_hot &= np.array_equal(rfa.dynamic_conv(omni, Tensor(alpha), pool).data, basis_conv(omni, pool, n))

    single = make_pool(rng, m=1, cin=4)
    w = single.basis.data[0].transpose(1, 0, 2, 3)
    sa = sigmoid(conv2d(omni, Conv2dParams(Tensor(w), Tensor(single.bias.data)))).data
    op_bitwise = np.array_equal(rfa.attention_map(omni, single).A.data, sa)
    xin = Tensor(np.random.default_rng(1).uniform(size=(1, 3, 16, 16)))
    net_sa = ORNet(desk_config(rfa_mode="plain_spatial_attention"), seed=5)
    net_m1 = ORNet(desk_config(rfa_mode="dynamic", basis_kernels=1), seed=5)
    model_bitwise = np.array_equal(net_sa(xin).data, net_m1(xin).data)
    ok = worst < 1e-9 and one_hot and op_bitwise and model_bitwise
    report(3, ok, f"positionwise vs blended max diff {worst:.1e} on 20 inputs (< 1e-9); one-hot exact={one_hot}; "
                  f"m=1 vs spatial attention bitwise: op={op_bitwise} model={model_bitwise}")
    assert ok


# -- 4 --------------------------------------------------------------------------

def test_c4_haar_suite():
    rec = energy = 0.0
    for seed in range(20):
        x = np.random.default_rng(seed).normal(size=(32, 32))
        p = freq.haar_dwt2(x, 4)
        rec = max(rec, np.abs(freq.haar_idwt2(p) - x).max())
        e = sum(float(np.sum(c * c)) for _, _, c in p.bands())
        energy = max(energy, abs(e - float(np.sum(x * x))) / float(np.sum(x * x)))
    shares = [freq.feature_band_profile(np.random.default_rng(s).normal(size=(1, 64, 64)), 4, reduce="mean").fine_share()
              for s in range(20)]
    share_ok = all(abs(s - 0.75) <= 0.075 for s in shares)
    ok = rec < 1e-10 and energy < 1e-10 and share_ok
    report(4, ok, f"reconstruction {rec:.1e}, relative energy error {energy:.1e} (< 1e-10); white-noise level-1 "
                  f"share in [{min(shares):.3f}, {max(shares):.3f}] (0.75 +- 10%)")
    assert ok


# -- 5 --------------------------------------------------------------------------

def test_c5_degradation_profiles(natural_images):
    lines, ok = [], True
    for i, (name, hr) in enumerate(sorted(natural_images.items())):
        bic = synthesize_degradation(hr, "bicubic", 2, np.random.default_rng(i))
        bn = synthesize_degradation(hr, "blur_noise", 2, np.random.default_rng(i))
        pb = freq.degradation_profile(upsample_lr(bic), hr, 4)
        pn = freq.degradation_profile(upsample_lr(bn), hr, 4)
        good = pb.fine_share() > pb.coarse_share() and pn.coarse_share() > pb.coarse_share()
        ok &= good
        lines.append(f"{name} fine {pb.fine_share():.2f} coarse {pb.coarse_share():.2f}/{pn.coarse_share():.2f}")
    report(5, ok and len(natural_images) >= 5,
           f"{len(natural_images)} images, bicubic level-1 > coarse and blur+noise coarse > bicubic coarse: "
           + "; ".join(lines))
    assert ok


# -- 6 and 8 --------------------------------------------------------------------

OVERFIT_STEPS = 500


@pytest.fixture(scope="module")
def overfit_run():
    pairs = synthetic_pairs(4, 96, 2, "bicubic", seed=0)
    tcfg = TrainConfig(lr0=1e-4, lr_decay=1.0, batch_size=4, crop=0, flip=False, rotation=False,
                       max_epochs=OVERFIT_STEPS, eval_every=0, checkpoint_every=0, seed=0)
    t0 = time.perf_counter()
    result = train_loop(tcfg, desk_config(scale=2), pairs)
    return pairs, result, time.perf_counter() - t0


def test_c6_overfit(overfit_run):
    pairs, result, elapsed = overfit_run
    losses = result.losses
    m = evaluate(result.model, pairs)
    ratio = m["l1"] / losses[0]
    gain = m["psnr"] - m["psnr_bicubic"]
    windows_ok = all(losses[t + 100] <= losses[t] for t in range(100, len(losses) - 100))
    ok = len(losses) == OVERFIT_STEPS and ratio < 0.25 and gain >= 2.0 and windows_ok
    report(6, ok, f"L1 {losses[0]:.4f} -> {m['l1']:.4f} (ratio {ratio:.3f} < 0.25); PSNR {m['psnr']:.2f} dB vs "
                  f"bicubic {m['psnr_bicubic']:.2f} dB (gain {gain:+.2f} >= 2); 100-step windows non-increasing="
                  f"{windows_ok}; {elapsed / 60:.1f} min on the desk preset")
    assert ok


def test_c8_feature_specialization(overfit_run):
    pairs, result, _ = overfit_run
    model = result.model
    rows, ok = [], True
    for pair in pairs:
        tr = model.trace(Tensor(upsample_lr(pair)[None]))
        (la, lb), (ha, hb) = tr.band_slices[0], tr.band_slices[-1]
        low = freq.feature_band_profile(tr.omni.data[0, la:lb], 4).mean_level()
        high = freq.feature_band_profile(tr.omni.data[0, ha:hb], 4).mean_level()
        ok &= low > high
        rows.append(f"{low:.2f}>{high:.2f}")
    report(8, ok, "mean Haar level of enhanced f_l vs f_h per training patch: " + ", ".join(rows))
    assert ok


# -- 7 --------------------------------------------------------------------------

ABLATION_SEEDS = (0, 1, 2)


def test_c7_ablation_direction():
    pairs = synthetic_pairs(32, 32, 2, "blur_noise", seed=7)
    tcfg = dict(lr0=5e-4, lr_decay=1.0, batch_size=8, crop=0, max_epochs=75, eval_every=0, checkpoint_every=0)
    t0 = time.perf_counter()
    variants = {"bran.=3": desk_config(scale=2), "bran.=1": desk_config(scale=2, branch_count=1),
                "FEU-att off": desk_config(scale=2, feu_attention=False)}
    psnrs = {}
    for name, mcfg in variants.items():
        psnrs[name] = [evaluate(train_loop(TrainConfig(seed=s, **tcfg), mcfg, pairs).model, pairs)["psnr"]
                       for s in ABLATION_SEEDS]
    med = {k: float(np.median(v)) for k, v in psnrs.items()}
    bicubic = evaluate(ORNet(desk_config(scale=2, output_init_scale=0.0)), pairs)["psnr"]
    branches_ok = med["bran.=3"] >= med["bran.=1"]
    attention_ok = med["bran.=3"] >= med["FEU-att off"]
    elapsed = time.perf_counter() - t0
    report(7, branches_ok and attention_ok,
           f"median train PSNR over seeds {ABLATION_SEEDS}: bran.=3 {med['bran.=3']:.3f} vs bran.=1 "
           f"{med['bran.=1']:.3f} ({'ok' if branches_ok else 'reversed'}); FEU attention on {med['bran.=3']:.3f} vs "
           f"off {med['FEU-att off']:.3f} ({'ok' if attention_ok else 'reversed'}); bicubic {bicubic:.3f}; {elapsed / 60:.1f} min")
    assert branches_ok and attention_ok


# -- 9 --------------------------------------------------------------------------

def test_c9_metric_oracles(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 0.9, size=(3, 16, 16))
    psnr_ok = psnr(a, a) == PSNR_CAP and abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    b = rng.uniform(size=(3, 16, 16))
    ssim_err = abs(ssim(a, b) - brute_ssim(a, b))

    net = ORNet(desk_config(), seed=3)
    path = tmp_path / "c.ornt"
    save_checkpoint(Checkpoint(model_config=net.cfg.to_dict(), params=net.state_dict()), path)
    x = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    ckpt_ok = np.array_equal(load_checkpoint(path).build_model()(x).data, net(x).data)

    pairs = synthetic_pairs(4, 16, 2, "bicubic", seed=1)
    tiny = ModelConfig(stem_channels=3, branch_channels=(3, 3, 2), feu_counts=(1, 1, 1), feu_stages=1,
                       feu_growth=2, head_channels=3, attention_reduction=2, basis_kernels=2, scale=2)
    runs = [train_loop(TrainConfig(batch_size=2, crop=8, max_epochs=2, seed=4), tiny, pairs) for _ in range(2)]
    train_ok = runs[0].losses == runs[1].losses and all(
        np.array_equal(v, runs[1].model.params[k].data) for k, v in runs[0].model.state_dict().items())
    ok = psnr_ok and ssim_err < 1e-9 and ckpt_ok and train_ok
    report(9, ok, f"PSNR closed forms exact={psnr_ok}; SSIM vs brute force {ssim_err:.1e} (< 1e-9); "
                  f"checkpoint round trip bitwise={ckpt_ok}; same-seed training bitwise={train_ok}")
    assert ok


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"])
    print("\n".join(RESULTS))
    sys.exit(code)
