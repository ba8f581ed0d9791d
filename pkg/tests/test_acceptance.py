"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The desk-scale experiments (criteria 7, 8, 9, 12) share one session fixture
that trains both network variants; expect roughly ten minutes on a laptop CPU.
Run only this file with ``pytest tests/test_acceptance.py -v``.
"""
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from flimflan.baselines import PhasorPoint, angular_frequency, phasor_transform
from flimflan.binning import LogBinSpec, compress_counts
from flimflan.cli import main as cli_main
from flimflan.decay import (DatasetSpec, DecayParams, InstrumentConfig, gen_dataset, gen_pdf, stack,
                            synthesize_decay, tau_labels)
from flimflan.evaluation import GtImageSpec, bench, evaluate_image, gen_gt_image, model_method, nlsf_method
from flimflan.network import (AdderConvLayer, BnParams, adder_conv_backward, adder_conv_batch, adder_conv_forward,
                              build_flan, fold_bn, forward_batch, forward_fixed_batch)
from flimflan.quantize import QFormat, decode, encode, quantize_model
from flimflan.training import TrainConfig, _Tape, evaluate_loss, loss_and_grads, mse_loss, train

from helpers import ACCEPTANCE_LINES, adder_oracle, fd_rel_err, micro_model

CFG = InstrumentConfig()


@contextmanager
def criterion(number, title):
    """Record PASS/FAIL for one criterion; details appended to the yielded list are shown."""
    details = []
    try:
        yield details
    except BaseException as exc:
        msg = "; ".join(details + [f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"])
        line = f"criterion {number}: FAIL {title} ({msg})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"criterion {number}: PASS {title}" + (f" ({'; '.join(details)})" if details else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


# --------------------------------------------------------------------------
# desk-scale experiment shared by criteria 7, 8, 9 and 12
# --------------------------------------------------------------------------

DESK_EPOCHS = {"flan": 60, "flan-ls": 150}


@pytest.fixture(scope="session")
def desk():
    edges = LogBinSpec().edges
    tr = stack(gen_dataset(DatasetSpec(5000, seed=1)))
    va = stack(gen_dataset(DatasetSpec(1000, seed=2)))
    te = stack(gen_dataset(DatasetSpec(1000, seed=3, peak_counts=(1000.0, 5000.0))))
    out = {"test_raw": te[0], "test_labels": te[1], "models": {}, "train_seconds": {}}
    for variant, epochs in DESK_EPOCHS.items():
        prep = (lambda c: c) if variant == "flan" else (lambda c: compress_counts(c, edges))
        t0 = time.perf_counter()
        model, _ = train(build_flan(variant, seed=0), (prep(tr[0]), tr[1]), (prep(va[0]), va[1]),
                         TrainConfig(max_epochs=epochs, patience=20, seed=0))
        out["train_seconds"][variant] = time.perf_counter() - t0
        out["models"][variant] = model
        out[f"test_{variant}"] = prep(te[0])
    return out


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------

def test_01_adder_oracle_equivalence():
    with criterion(1, "adder convolution matches nested-loop oracle") as info:
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        for _ in range(1000):
            k, ci, co, stride = (int(v) for v in rng.integers(1, 5, 4))
            wi = int(rng.integers(k, k + 12))
            x = rng.normal(0, 2, (ci, wi))
            w = rng.normal(0, 2, (k, ci, co))
            layer = AdderConvLayer(w, stride, np.ones(co), np.zeros(co), relu=False)
            np.testing.assert_array_equal(adder_conv_forward(x, layer),
                                          np.array(adder_oracle(x.tolist(), w.tolist(), stride)))
            xq = rng.integers(-2**31, 2**31, (1, wi, ci))
            wq = rng.integers(-2**19, 2**19, (k, ci, co))
            got = adder_conv_batch(xq, wq, stride)[0].T
            want = adder_oracle([[int(v) for v in row] for row in xq[0].T], wq.tolist(), stride)
            assert got.tolist() == want
        elapsed = time.perf_counter() - t0
        info.append(f"{elapsed:.2f} s for 1000 float + 1000 fixed cases")
        assert elapsed < 10.0


def test_02_batch_norm_fold():
    with criterion(2, "folded affine equals batch norm") as info:
        rng = np.random.default_rng(102)
        n = 10_000
        bn = BnParams(rng.normal(0, 2, n), rng.normal(0, 2, n), rng.normal(0, 10, n), rng.uniform(1e-3, 50, n))
        x = rng.normal(0, 20, n)
        ref = bn.apply(x)
        scale, shift = fold_bn(bn)
        rel = np.abs(scale * x + shift - ref) / np.maximum(np.abs(ref), 1e-300)
        # an output that is zero to rounding has no meaningful relative error
        rel = np.where(np.abs(ref) < 1e-9, np.abs(scale * x + shift - ref), rel)
        info.append(f"max relative error {rel.max():.2e}")
        assert rel.max() <= 1e-6


def test_03_log_binning_conservation():
    with criterion(3, "log-scale compression conserves photons") as info:
        spec = LogBinSpec(256, 80)
        edges = spec.edges
        info.append(f"r = {spec.ratio:.6f}")
        assert abs(spec.ratio - 1.0256) < 5e-5
        assert edges[0] == 0 and edges[-1] == 256 and np.all(np.diff(edges) > 0)
        assert len(edges) == 81 and int(np.diff(edges).sum()) == 256
        rng = np.random.default_rng(103)
        counts = rng.integers(0, 5000, (10_000, 256))
        counts[rng.random(counts.shape) < 0.3] = 0
        compressed = compress_counts(counts, edges)
        assert compressed.shape == (10_000, 80)
        np.testing.assert_array_equal(compressed.sum(axis=1), counts.sum(axis=1))


@pytest.mark.parametrize("frac", [10, 16])
def test_04_quantization_bound(frac):
    with criterion(4, f"round-trip error within half an LSB at F={frac}") as info:
        fmt = QFormat(16 if frac == 16 else 10, frac)
        rng = np.random.default_rng(104 + frac)
        lo, hi = fmt.min_word * fmt.resolution, fmt.max_word * fmt.resolution
        x = rng.uniform(lo, hi, 1_000_000)
        err = np.abs(decode(encode(x, fmt), fmt) - x)
        info.append(f"max error {err.max():.3e} vs bound {2.0 ** -(frac + 1):.3e}")
        assert err.max() <= 2.0 ** -(frac + 1)


def test_05_gradient_checks():
    with criterion(5, "finite-difference and surrogate-sign gradient checks") as info:
        h = 1e-6
        worst = 0.0
        for seed in range(3):
            model = micro_model(500 + seed)
            rng = np.random.default_rng(seed)
            x = rng.uniform(0, 1, (5, 24, 1))
            y = rng.uniform(0.2, 3.0, (5, 2))
            loss, grads = loss_and_grads(model, x, y, exact=True)
            floor = 1e3 * np.finfo(float).eps * max(abs(loss), 1.0) / h
            for layer in model.layers():
                _, dgamma, dbeta = grads[id(layer)]
                for vec, g in ((layer.bn.gamma, dgamma), (layer.bn.beta, dbeta)):
                    for j in range(vec.size):
                        old = vec[j]
                        vec[j] = old + h
                        up = loss_and_grads(model, x, y, exact=True)[0]
                        vec[j] = old - h
                        down = loss_and_grads(model, x, y, exact=True)[0]
                        vec[j] = old
                        worst = max(worst, fd_rel_err((up - down) / (2 * h), g[j], floor))
            # gradient reaching the input crosses ReLU, residual add, BN and the loss
            tape = _Tape(model, update_stats=False)
            pred = tape.forward(x)
            _, gx = tape.backward(2.0 * (pred - y) / len(y), exact=True)
            for pos in [(0, 2, 0), (2, 11, 0), (4, 23, 0)]:
                xp, xm = x.copy(), x.copy()
                xp[pos] += h
                xm[pos] -= h
                fd = (mse_loss(_Tape(model, False).forward(xp), y) - mse_loss(_Tape(model, False).forward(xm), y))
                worst = max(worst, fd_rel_err(fd / (2 * h), gx[pos], floor))
        info.append(f"worst FD relative error {worst:.2e}")
        assert worst <= 1e-5

        rng = np.random.default_rng(105)
        checked = 0
        for _ in range(500):
            k, ci, co = (int(v) for v in rng.integers(1, 5, 3))
            x = rng.normal(size=(2, k + 3, ci))
            w = rng.normal(size=(k, ci, co))
            gy = rng.normal(size=(2, 4, co))
            gw_s, gx_s = adder_conv_backward(x, w, 1, gy)
            gw_e, gx_e = adder_conv_backward(x, w, 1, gy, exact=True)
            # compare per-term signs: one output position, one channel
            for b in range(2):
                for wo in range(4):
                    for c in range(co):
                        g1 = np.zeros_like(gy)
                        g1[b, wo, c] = 1.0
                        ws, xs = adder_conv_backward(x[b:b + 1], w, 1, g1[b:b + 1])
                        we, xe = adder_conv_backward(x[b:b + 1], w, 1, g1[b:b + 1], exact=True)
                        diff = np.abs(x[b, wo:wo + k, :] - w[:, :, c])
                        mask = diff > 1e-6
                        assert np.all(np.sign(ws[:, :, c][mask]) == np.sign(we[:, :, c][mask]))
                        assert np.all(np.sign(xs[0, wo:wo + k, :][mask]) == np.sign(xe[0, wo:wo + k, :][mask]))
                        checked += int(mask.sum())
            if checked > 20_000:
                break
        info.append(f"{checked} surrogate terms sign-consistent")


def test_06_overfit_single_decay():
    with criterion(6, "overfit one repeated decay") as info:
        params = DecayParams.bi(0.4, 0.3, 2.5, 3000)
        counts = synthesize_decay(params, CFG, 7).counts[None].repeat(128, axis=0)
        lab = tau_labels(params)
        labels = np.tile([lab.tau_a, lab.tau_i], (128, 1))
        t0 = time.perf_counter()
        model, report = train(build_flan("flan", seed=0), (counts, labels), (counts[:1], labels[:1]),
                              TrainConfig(max_epochs=200, patience=200, batch_size=16, seed=0))
        elapsed = time.perf_counter() - t0
        loss = evaluate_loss(model, counts[:1], labels[:1])[0]
        reached = next((i for i, v in enumerate(report.val_loss, 1) if v < 1e-3), None)
        info.append(f"loss {loss:.2e}, below 1e-3 at epoch {reached}, {elapsed:.0f} s")
        assert loss < 1e-3 and reached is not None and reached <= 200
        assert elapsed < 120


@pytest.mark.slow
def test_07_desk_scale_accuracy(desk):
    with criterion(7, "desk-scale RMSE <= 0.3 ns for both variants") as info:
        for variant, model in desk["models"].items():
            pred = forward_batch(model, desk[f"test_{variant}"])
            rmse = np.sqrt(np.mean((pred - desk["test_labels"]) ** 2, axis=0))
            info.append(f"{variant} RMSE tau_a={rmse[0]:.3f} tau_i={rmse[1]:.3f} "
                        f"({desk['train_seconds'][variant]:.0f} s training)")
            assert np.all(rmse <= 0.3)
        assert sum(desk["train_seconds"].values()) < 1800


@pytest.mark.slow
def test_08_ground_truth_image(desk):
    with criterion(8, "64x64 ramp image: networks (high counts) beat NLSF (low counts)") as info:
        high = gen_gt_image(GtImageSpec(64, 64, regime="high"), seed=11)
        low = gen_gt_image(GtImageSpec(64, 64, regime="low"), seed=12)
        for img in (high, low):
            assert np.all(img.labels[..., 1] >= img.labels[..., 0])
        [nlsf] = evaluate_image(low, {"nlsf": nlsf_method(CFG)})
        info.append(f"NLSF low MSE {nlsf.mse[0]:.4f}/{nlsf.mse[1]:.4f} ({nlsf.n_failed} refused)")
        for variant, model in desk["models"].items():
            [res] = evaluate_image(high, {variant: model_method(model)})
            info.append(f"{variant} high MSE {res.mse[0]:.4f}/{res.mse[1]:.4f}")
            assert res.mse[0] < nlsf.mse[0] and res.mse[1] < nlsf.mse[1]


@pytest.mark.slow
def test_09_quantized_vs_float(desk):
    with criterion(9, "Q16.16/Q10.10 outputs track float") as info:
        gt = desk["test_labels"]
        for variant, model in desk["models"].items():
            x = desk[f"test_{variant}"]
            q = quantize_model(model)
            pf = forward_batch(model, x)
            pq = forward_fixed_batch(q, x)
            within = np.mean(np.abs(pq - pf) <= 0.05, axis=0)
            mse_f = np.mean((pf - gt) ** 2, axis=0)
            mse_q = np.mean((pq - gt) ** 2, axis=0)
            added = (mse_q - mse_f) / mse_f
            info.append(f"{variant} within 0.05 ns {within[0]:.1%}/{within[1]:.1%}, "
                        f"added MSE {added[0]:+.1%}/{added[1]:+.1%}")
            assert np.all(within >= 0.95) and np.all(added <= 0.20)


def test_10_parameter_budgets():
    with criterion(10, "parameter budgets") as info:
        full, small = build_flan("flan").n_params(), build_flan("flan-ls").n_params()
        info.append(f"flan {full}, flan-ls {small}")
        assert abs(full - 23_003) <= 0.15 * 23_003
        assert abs(small - 4_058) <= 0.20 * 4_058


def test_11_phasor_semicircle():
    with criterion(11, "phasor semicircle and uniform histogram at origin") as info:
        worst = 0.0
        for tau in np.geomspace(0.05, 20, 60):
            p = phasor_transform(gen_pdf(DecayParams.mono(float(tau)), CFG), CFG)
            worst = max(worst, abs(math.hypot(p.g - 0.5, p.s) - 0.5))
        u = phasor_transform(np.full(CFG.num_bins, 123.0), CFG)
        info.append(f"worst semicircle distance {worst:.2e}, uniform at ({u.g:.1e}, {u.s:.1e})")
        assert worst <= 0.01
        assert abs(u.g) < 1e-9 and abs(u.s) < 1e-9
        assert isinstance(u, PhasorPoint) and angular_frequency(CFG) > 0


@pytest.mark.slow
def test_12_throughput_ordering(desk):
    with criterion(12, "FLAN+LS outpaces FLAN; bench self-consistent") as info:
        counts = desk["test_raw"]
        for mode in ("float", "fixed"):
            rows = {}
            for variant, model in desk["models"].items():
                m = quantize_model(model) if mode == "fixed" else model
                rows[variant] = bench(model_method(m, mode), counts, (1, 32, 256), repetitions=3)
                for r in rows[variant]:
                    assert r.throughput * r.latency_ms == pytest.approx(r.batch_size, rel=0.05)
            for a, b in zip(rows["flan"], rows["flan-ls"]):
                info.append(f"{mode} b={a.batch_size}: {a.throughput:.1f} vs {b.throughput:.1f} px/ms")
                assert b.throughput > a.throughput


def test_13_determinism(tmp_path):
    with criterion(13, "synth/train/infer/quantize byte-identical across runs") as info:
        def run(*argv):
            assert cli_main([str(a) for a in argv]) == 0

        outputs = []
        for rep in ("a", "b"):
            d = tmp_path / rep
            run("synth", "--size", 96, "--seed", 5, "--out", d / "train.flds")
            run("synth", "--size", 32, "--seed", 6, "--out", d / "val.flds")
            run("train", "--variant", "flan", "--train", d / "train.flds", "--val", d / "val.flds",
                "--epochs", 3, "--batch-size", 32, "--seed", 5, "--out", d / "m.flnm")
            run("quantize", "--model", d / "m.flnm", "--out", d / "q.flnm")
            run("infer", "--model", d / "q.flnm", "--data", d / "val.flds", "--workers", 4, "--out", d / "f.csv")
            run("infer", "--model", d / "q.flnm", "--data", d / "val.flds", "--mode", "fixed", "--workers", 4,
                "--out", d / "x.csv")
            outputs.append(d)
        names = ["train.flds", "val.flds", "m.flnm", "m.flnm.loss.csv", "q.flnm", "f.csv", "x.csv"]
        for name in names:
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes(), name
        info.append(f"{len(names)} artefacts compared")
