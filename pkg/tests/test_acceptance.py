"""Acceptance gates; each test records one PASS/FAIL line in the terminal summary."""
import os
import time
from pathlib import Path

import numpy as np
import pytest
from helpers import exact_batch, sample_cov

from batchortho.data import load_idx
from batchortho.gradcheck import check_layer, fd_gradient
from batchortho.layers import LayerParams, LayerState, bn_forward, layer_backward, layer_forward
from batchortho.linalg import build_F, cayley, chol_unit_ldl, pivoted_ldl, sym_eig
from batchortho.nn import (
    TrainConfig,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    gap_backward,
    gap_forward,
    relu_backward,
    relu_forward,
    softmax_xent_backward,
    softmax_xent_forward,
    train,
)
from batchortho.nn.blocks import ConvBlockSpec, GlobalAvgPool, Linear, Net, conv_block
from batchortho.spec import parse_spec

AUDIT_SPECS = ("BN", "BN->W", "BN->W->G", "ZCA", "ZCAM", "ZCAE", "ZCAcorr", "ZCAcorr->W",
               "ZCAcorr->W->G", "LDL", "LDLcorr", "PLDLP")
CLAMPED_SPECS = ("ZCAM", "ZCAE")
SCALED_SPECS = ("BN", "BN->W->G", "ZCA", "ZCAM", "ZCAE", "ZCAcorr", "ZCAcorr->W->G",
                "LDL", "LDLcorr", "PLDLP")
MNIST_DIR = Path(os.environ.get("BATCHORTHO_DATA", "/root/data/mnist"))


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def test_gradient_audit(criterion):
    t0 = time.perf_counter()
    reports = []
    for text in AUDIT_SPECS:
        for n in (3, 5, 8):
            for m in (16, 32):
                for seed in range(20):
                    reports.extend(check_layer(text, n, m, seed, tol=1e-5))
    for text in CLAMPED_SPECS:
        for n in (3, 5, 8):
            for m in (16, 32):
                for seed in range(20):
                    reports.extend(check_layer(text, n, m, seed, tol=1e-5, clamped=True))
    elapsed = time.perf_counter() - t0
    failed = [r for r in reports if not r.passed]
    worst = max((r for r in reports if not r.note.startswith("excluded")),
                key=lambda r: r.max_rel_err)
    ok = not failed and elapsed <= 300
    criterion("gradient audit", ok,
              f"{len(reports) - len(failed)}/{len(reports)} group checks within 1e-5, "
              f"worst {worst.max_rel_err:.2e} ({worst.spec} {worst.group}), {elapsed:.0f} s")
    assert not failed, failed[:5]
    assert elapsed <= 300


def _invariant_instance(text, rng):
    spec = parse_spec(text, eps=0.0)
    n = int(rng.integers(2, 17))
    m = int(rng.integers(10 * n, 20 * n))
    if spec.whitener == "BN":
        # standardization whitens exactly when the channels are uncorrelated
        x = exact_batch(np.diag(rng.uniform(0.2, 5.0, n)), m, rng)
    elif spec.conditioning == "entropy":
        # a flat spectrum keeps the effective rank at n, so nothing is clamped
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        x = exact_batch((q * rng.uniform(1.0, 1.05, n)) @ q.T, m, rng)
    else:
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        mix = q * np.sqrt(rng.uniform(0.5, 3.0, n))
        x = mix @ rng.standard_normal((n, m)) + rng.normal(0, 3, (n, 1))
    params = LayerParams.init(spec, n)
    params.gamma = rng.uniform(0.3, 3.0, n)
    params.bias = rng.standard_normal(n)
    if params.skew_upper is not None:
        params.skew_upper = rng.standard_normal(params.skew_upper.size)
    return spec, x, params


def test_whitening_invariant(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for text in SCALED_SPECS:
        for _ in range(50):
            spec, x, params = _invariant_instance(text, rng)
            z, cache = layer_forward(spec, x, params, LayerState())
            mask = getattr(getattr(cache.whiten, "cond", None), "mask", None)
            assert mask is None or not mask.any(), f"{text}: instance clamps"
            target = np.diag(params.gamma**2)
            err = np.linalg.norm(sample_cov(z) - target) / np.linalg.norm(target)
            worst = max(worst, err)
    ok = worst <= 1e-8
    criterion("whitening invariant", ok,
              f"{len(SCALED_SPECS)} specs x 50 instances, worst Frobenius-relative {worst:.2e}")
    assert ok


def test_factorization_reconstructions(criterion):
    rng = np.random.default_rng(7)
    worst = {"ldl": 0.0, "pldlp": 0.0, "eig": 0.0, "cayley": 0.0}
    for i in range(100):
        n = int(rng.integers(1, 65)) if i < 99 else 64
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        s = (q * np.geomspace(1.0, 10.0 ** rng.uniform(0, 6), n)) @ q.T
        s = 0.5 * (s + s.T)
        norm = np.linalg.norm(s)
        f = chol_unit_ldl(s)
        worst["ldl"] = max(worst["ldl"], np.linalg.norm((f.L * f.d) @ f.L.T - s) / norm)
        g = pivoted_ldl(s, eps=0.0)
        ps = s[np.ix_(g.p, g.p)]
        worst["pldlp"] = max(worst["pldlp"], np.linalg.norm((g.L * g.d) @ g.L.T - ps) / norm)
        U, lam = sym_eig(s)
        worst["eig"] = max(worst["eig"], np.linalg.norm((U * lam) @ U.T - s) / norm)
        a = rng.standard_normal((n, n)) * rng.uniform(0.1, 3.0)
        W = cayley(a - a.T)
        worst["cayley"] = max(worst["cayley"], np.abs(W @ W.T - np.eye(n)).max())
    ok = max(worst["ldl"], worst["pldlp"], worst["eig"]) <= 1e-10 and worst["cayley"] <= 1e-12
    criterion("factorization reconstructions", ok,
              "100 instances n<=64: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_conditioning_behavior(criterion):
    spec = parse_spec("ZCAM(1e-5,1e12,0.01)")
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    x = exact_batch((q * np.array([1.0, 1e-8])) @ q.T, 64, rng)
    params = LayerParams.init(spec, 2)
    z, cache = layer_forward(spec, x, params, LayerState())
    cond = cache.whiten.cond
    # the floor is c * lambda_max of the eps-ridged covariance, 1e-2 up to the ridge
    clamp_ok = (cond.mask.tolist() == [False, True] and cond.lam[1] == spec.c * cond.lam_raw[0]
                and abs(cond.lam[1] - 1e-2) <= 1e-2 * 2 * spec.eps)
    grads = layer_backward(spec, cache, rng.standard_normal(z.shape))
    finite_ok = all(np.all(np.isfinite(g)) for g in (grads.grad_x, grads.grad_gamma, grads.grad_bias))
    # |F| = 1/0.99 stays below K; a K under that must cap every off-diagonal entry
    lam = cond.lam
    F = build_F(lam, spec.K)
    free_ok = F[0, 1] == 1.0 / (lam[1] - lam[0])
    Fc = build_F(lam, 0.5)
    cap_ok = bool(np.array_equal(Fc, [[0.0, -0.5], [0.5, 0.0]]))
    Fr = build_F(cond.lam_raw, 1e6)
    raw_ok = abs(Fr[0, 1]) <= 1e6 and abs(abs(Fr[0, 1]) - 1 / (1 - 1e-8)) < 1e-9
    ok = clamp_ok and finite_ok and free_ok and cap_ok and raw_ok
    criterion("conditioning behavior", ok,
              f"lambda2 -> {cond.lam[1]:.3e} (masked={cond.mask[1]}), finite grads={finite_ok}, "
              f"F unclipped at K=1e12={free_ok}, F capped at K=0.5={cap_ok}")
    assert ok


def _train(spec, tr, te):
    return train(TrainConfig(db="mnist", spec=spec, epochs=5, seed=0), tr, te)


def _epochs_to(history, target):
    for r in history:
        if r["phase"] == "val" and r["error_rate"] <= target:
            return r["epoch"]
    return None


@pytest.mark.slow
@pytest.mark.skipif(not (MNIST_DIR / "train-images-idx3-ubyte").exists(),
                    reason="MNIST IDX files not found (set BATCHORTHO_DATA)")
def test_desk_scale_training(criterion):
    t0 = time.perf_counter()
    tr = load_idx(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte")
    te = load_idx(MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte")
    tr, te = tr.subset(10000), te.subset(2000)
    bn = _train("BN", tr, te)
    zca = _train("ZCA(0,inf)", tr, te)
    rerun = _train("BN", tr, te)
    elapsed = time.perf_counter() - t0
    bn_err = bn.final("val")["error_rate"]
    zca_err = zca.final("val")["error_rate"]
    bn_epochs = _epochs_to(bn.history, bn_err)
    zca_epochs = _epochs_to(zca.history, bn_err)
    identical = rerun.metrics_csv() == bn.metrics_csv()
    ok = (bn_err <= 0.05 and zca_err <= 0.05 and zca_epochs is not None
          and zca_epochs <= bn_epochs and identical and elapsed <= 1800)
    criterion("desk-scale training", ok,
              f"epoch-5 test error BN {100 * bn_err:.2f}%, ZCA(0,inf) {100 * zca_err:.2f}%; "
              f"epochs to BN's error: BN {bn_epochs}, ZCA {zca_epochs}; "
              f"rerun identical={identical}; {elapsed / 60:.1f} min")
    assert ok


def test_composition_equivalences(criterion):
    rng = np.random.default_rng(11)
    worst_corr = 0.0
    bn_exact = True
    worst_pivot = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(3 * n, 8 * n))
        x = exact_batch(np.diag(rng.uniform(0.2, 5.0, n)), m, rng)
        g = rng.standard_normal((n, m))
        for corr, plain in (("ZCAcorr(0,inf)", "ZCA(0,inf)"), ("LDLcorr(0)", "LDL(0)")):
            params = LayerParams.init(parse_spec(plain), n)
            params.gamma = rng.uniform(0.5, 2.0, n)
            params.bias = rng.standard_normal(n)
            za, ca = layer_forward(corr, x, params, LayerState())
            zb, cb = layer_forward(plain, x, params, LayerState())
            ga = layer_backward(ca.spec, ca, g)
            gb = layer_backward(cb.spec, cb, g)
            for a, b in ((za, zb), (ga.grad_gamma, gb.grad_gamma), (ga.grad_bias, gb.grad_bias)):
                worst_corr = max(worst_corr, rel_err(a, b).max())

        spec = parse_spec("BN->W")
        params = LayerParams.init(spec, n)
        params.bias = rng.standard_normal(n)
        xr = rng.standard_normal((n, m)) * rng.uniform(0.5, 2.0, (n, 1))
        z, _ = layer_forward(spec, xr, params, LayerState())
        bn_exact &= bool(np.array_equal(z, bn_forward(xr, spec.eps)[0] + params.bias[:, None]))

        # strongly decreasing pivots with weak coupling keep the natural order
        L = np.tril(0.1 * rng.standard_normal((n, n)), -1) + np.eye(n)
        d = 10.0 ** -np.arange(n) * rng.uniform(1.0, 2.0, n)
        xs = exact_batch((L * d) @ L.T, m, rng)
        params = LayerParams.init(parse_spec("LDL(0)"), n)
        params.gamma = rng.uniform(0.5, 2.0, n)
        params.bias = rng.standard_normal(n)
        za, ca = layer_forward("PLDLP(0)", xs, params, LayerState())
        assert np.array_equal(ca.whiten.p, np.arange(n))
        zb, cb = layer_forward("LDL(0)", xs, params, LayerState())
        ga = layer_backward(ca.spec, ca, g)
        gb = layer_backward(cb.spec, cb, g)
        for a, b in ((za, zb), (ga.grad_x, gb.grad_x), (ga.grad_gamma, gb.grad_gamma)):
            worst_pivot = max(worst_pivot, np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))
    ok = worst_corr <= 1e-8 and bn_exact and worst_pivot <= 1e-8
    criterion("composition equivalences", ok,
              f"20 instances: corr vs plain {worst_corr:.1e}, BN->W at S=0 exact={bn_exact}, "
              f"PLDLP vs LDL {worst_pivot:.1e}")
    assert ok


def _tiny_net(rng):
    spec = parse_spec("ZCAcorr->W->G")
    modules = conv_block(ConvBlockSpec(3, 1, 2, 3, spec), rng, "b1")
    modules += conv_block(ConvBlockSpec(2, 2, 3, 3, parse_spec("BN")), rng, "b2")
    modules += [GlobalAvgPool(), Linear(3, 4, rng)]
    return Net(modules)


def test_nn_blocks(criterion):
    rng = np.random.default_rng(5)
    errs = {}

    x = rng.standard_normal((2, 8, 8, 2))
    for stride, fov in ((1, 3), (2, 4)):
        w = rng.standard_normal((fov, fov, 2, 3))
        b = rng.standard_normal(3)
        out, cache = conv2d_forward(x, w, b, stride)
        g = rng.standard_normal(out.shape)
        gx, gw, gb = conv2d_backward(cache, g)
        num = [fd_gradient(lambda v: float(np.sum(g * conv2d_forward(v, w, b, stride)[0])), x),
               fd_gradient(lambda v: float(np.sum(g * conv2d_forward(x, v, b, stride)[0])), w),
               fd_gradient(lambda v: float(np.sum(g * conv2d_forward(x, w, v, stride)[0])), b)]
        errs[f"conv s{stride}"] = max(rel_err(a, n).max() for a, n in zip((gx, gw, gb), num))

    v = rng.standard_normal((4, 6))
    v[np.abs(v) < 1e-3] = 0.5
    y, mask = relu_forward(v)
    g = rng.standard_normal(y.shape)
    errs["relu"] = rel_err(relu_backward(mask, g),
                           fd_gradient(lambda t: float(np.sum(g * relu_forward(t)[0])), v)).max()

    w = rng.standard_normal((6, 5))
    b = rng.standard_normal(5)
    out, cx = fc_forward(v, w, b)
    g = rng.standard_normal(out.shape)
    gx, gw, gb = fc_backward(cx, w, g)
    errs["fc"] = max(
        rel_err(gx, fd_gradient(lambda t: float(np.sum(g * fc_forward(t, w, b)[0])), v)).max(),
        rel_err(gw, fd_gradient(lambda t: float(np.sum(g * fc_forward(v, t, b)[0])), w)).max(),
        rel_err(gb, fd_gradient(lambda t: float(np.sum(g * fc_forward(v, w, t)[0])), b)).max())

    pooled, shape = gap_forward(x)
    g = rng.standard_normal(pooled.shape)
    errs["gap"] = rel_err(gap_backward(shape, g),
                          fd_gradient(lambda t: float(np.sum(g * gap_forward(t)[0])), x)).max()

    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    _, probs = softmax_xent_forward(logits, labels)
    errs["softmax-xent"] = rel_err(softmax_xent_backward(probs, labels),
                                   fd_gradient(lambda t: softmax_xent_forward(t, labels)[0], logits)).max()

    net = _tiny_net(rng)
    xi = rng.standard_normal((3, 7, 7, 2))
    lab = np.array([0, 3, 1])
    _, probs = softmax_xent_forward(net.forward(xi), lab)
    gx = net.backward(softmax_xent_backward(probs, lab))
    e = rel_err(gx, fd_gradient(lambda t: softmax_xent_forward(net.forward(t), lab)[0], xi)).max()
    for _, module, key, p in net.named_params():
        analytic = module.grads[key].copy()

        def loss(t, p=p):
            saved = p.copy()
            p[...] = t
            out = softmax_xent_forward(net.forward(xi), lab)[0]
            p[...] = saved
            return out
        e = max(e, rel_err(analytic, fd_gradient(loss, p.copy())).max())
    errs["net with norm layers"] = e

    ln2, _ = softmax_xent_forward(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
    ln2_err = abs(ln2 - np.log(2.0))
    ok = max(errs.values()) <= 1e-5 and ln2_err <= 1e-12
    criterion("nn-kit blocks", ok,
              ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; |loss - ln 2| {ln2_err:.1e}")
    assert ok
