"""Acceptance gate: ten criteria, one test and one pass/fail line each.

Each test prints `criterion NN: PASS/FAIL: detail` and enforces its own
wall-clock budget.  Budgets are generous on purpose; they catch pathological
slowdowns, not normal variance.
"""

import time

import numpy as np
import pytest
import torch
from scipy import stats

from chimera.analysis import cka
from chimera.clip_adapter import (load_weight_bundle, make_mini_clip,
                                  save_weight_bundle)
from chimera.config import TrainConfig
from chimera.data import load_dataset, make_toy_dataset
from chimera.pseudo_supervision import compute_prototypes, sam_loss
from chimera.selective_distillation import (DecaySchedule, aggregate_global,
                                            decayed_k, gumbel_topk,
                                            sgd_loss, similarity_scores)
from chimera.semantic_head import head_fingerprint_from_bundle
from chimera.train import (evaluate, load_checkpoint, predict_maps,
                           restore_models, save_checkpoint, train)
from chimera.zss_objective import harmonic_iou, pixel_logits, seg_loss, total_loss


def _line(n: int, verdict: str, detail: str) -> None:
    print(f"criterion {n:02d}: {verdict}: {detail}")


class _Budget:
    def __init__(self, n: int, seconds: float):
        self.n, self.seconds = n, seconds
        self.t0 = time.monotonic()

    def check(self):
        elapsed = time.monotonic() - self.t0
        assert elapsed < self.seconds, (
            f"criterion {self.n:02d}: budget exceeded "
            f"({elapsed:.1f}s >= {self.seconds}s)")
        return elapsed


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    """4-image 32x32 dataset and a matching bundle for fast runs."""
    root = tmp_path_factory.mktemp("acc_small")
    make_toy_dataset(seed=3, n_images=4, image_size=32, n_seen=3, n_unseen=2,
                     out_dir=root / "data")
    ds = load_dataset(root / "data")
    bundle = make_mini_clip(seed=7, d_vis=24, d_emb=12, patch_size=8,
                            class_names=ds.manifest.split.names)
    save_weight_bundle(bundle, root / "bundle")
    return root


def small_config(small, out_name, **overrides) -> TrainConfig:
    kwargs = dict(data_manifest=str(small / "data"),
                  clip_bundle=str(small / "bundle"),
                  out_dir=str(small / out_name),
                  iterations=50, batch_size=2, checkpoint_every=50,
                  seed=11, sgd_k0=20, sgd_rate=0.2)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


_overfit_cache: dict = {}


def overfit_run(tmp_path_factory):
    """8-image 64x64 dataset, 4 seen + 2 unseen, trained 500 iterations."""
    if "result" not in _overfit_cache:
        root = tmp_path_factory.mktemp("acc_overfit")
        make_toy_dataset(seed=0, n_images=8, image_size=64, n_seen=4,
                         n_unseen=2, out_dir=root / "data")
        ds = load_dataset(root / "data")
        bundle = make_mini_clip(seed=0, d_vis=32, d_emb=16, patch_size=8,
                                class_names=ds.manifest.split.names)
        save_weight_bundle(bundle, root / "bundle")
        cfg = TrainConfig(data_manifest=str(root / "data"),
                          clip_bundle=str(root / "bundle"),
                          out_dir=str(root / "run"), iterations=500,
                          batch_size=8, lr=3e-3, seed=0,
                          checkpoint_every=250, sgd_k0=200)
        t0 = time.monotonic()
        result = train(cfg)
        _overfit_cache["result"] = result
        _overfit_cache["train_seconds"] = time.monotonic() - t0
        _overfit_cache["root"] = root
    return _overfit_cache


def test_criterion_01_reference_arithmetic():
    budget = _Budget(1, 1.0)
    rows = [((43.1, 46.5), 44.8), ((52.7, 67.5), 59.2), ((32.5, 35.2), 33.8)]
    failures = []
    for (s, u), want in rows:
        got = harmonic_iou(s, u)
        if abs(got - want) > 0.05:
            failures.append(f"harmonic mean of {(s, u)} is {got:.4f}, "
                            f"outside {want}+-0.05")
    budget.check()
    if failures:
        _line(1, "FAIL", "; ".join(failures))
    else:
        _line(1, "PASS", "all three reference rows within +-0.05")
    assert not failures, (
        "criterion 01: " + "; ".join(failures)
        + "; the stated band is not attainable by the harmonic mean")


def test_criterion_02_keep_count_schedule():
    budget = _Budget(2, 1.0)
    sched = DecaySchedule()
    cap = 10**6
    assert decayed_k(0, sched, cap) == 9000
    assert decayed_k(10, sched, cap) == 8999
    assert decayed_k(80000, sched, cap) == 1000
    assert decayed_k(0, sched, 500) == 500
    prev = decayed_k(0, sched, cap)
    for t in range(1, 100_001):
        k = decayed_k(t, sched, cap)
        assert k <= prev, f"not monotone at t={t}: {k} > {prev}"
        prev = k
    elapsed = budget.check()
    _line(2, "PASS", f"anchors, capacity clamp, monotone over [0,1e5] "
                     f"({elapsed:.2f}s)")


def _fd_worst_rel_err(make_loss, leaf, n_params=8, eps=1e-5):
    # central differences in float64; probes n_params evenly spaced entries
    leaf = leaf.detach().clone().requires_grad_(True)
    make_loss(leaf).backward()
    grad = leaf.grad.detach().reshape(-1)
    flat = leaf.detach().reshape(-1)
    idx = np.linspace(0, flat.numel() - 1, n_params).astype(int)
    worst = 0.0
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = make_loss(leaf.detach()).item()
        flat[i] = orig - eps
        lo = make_loss(leaf.detach()).item()
        flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        g = grad[i].item()
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-12))
    return worst


def test_criterion_03_gradients_match_finite_differences():
    budget = _Budget(3, 60.0)
    rng = np.random.default_rng(0)
    t64 = lambda a: torch.tensor(a, dtype=torch.float64)
    worst = {}

    f_g = t64(rng.standard_normal((4, 6)) * 0.3)
    c_g = t64(rng.standard_normal((4, 6)) * 0.3)
    worst["sgd"] = _fd_worst_rel_err(lambda x: sgd_loss(x, c_g, 0.07), f_g)

    # scales keep both softmaxes away from saturation at the tiny
    # text-side temperature
    f_l = t64(rng.standard_normal((3, 6)) * 0.01)
    a_s = t64(rng.standard_normal((3, 6)) * 0.002)
    cgv = t64(rng.standard_normal(6) * 0.01)
    worst["sam"] = _fd_worst_rel_err(
        lambda x: sam_loss(x, a_s, cgv, 0.07, 0.01), f_l)

    logits = t64(rng.standard_normal((2, 3, 3, 5)))
    labels = rng.integers(0, 5, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    labels_t = torch.tensor(labels)
    worst["seg"] = _fd_worst_rel_err(lambda x: seg_loss(x, labels_t), logits)

    mask = rng.integers(0, 3, size=(4, 4)).astype(np.int64)
    mask[0, 0] = 255
    a_pres = t64(rng.standard_normal((3, 6)) * 0.002)
    sel = torch.tensor([1, 5, 9, 12])
    cls_tok = t64(rng.standard_normal((2, 6)) * 0.3)
    f_c0 = t64(rng.standard_normal((4, 4, 6)) * 0.01)

    def composite(f_c):
        protos = compute_prototypes(f_c, mask, 3)
        l_sam = sam_loss(protos.seen, a_pres, cgv, 0.07, 0.01)
        classifier = torch.cat([protos.seen, protos.latent]) \
            if protos.latent.numel() else protos.seen
        l_seg = seg_loss(pixel_logits(f_c, classifier)[None],
                         torch.tensor(mask)[None])
        f_k = f_c.reshape(-1, 6)[sel]
        _, f_gl = aggregate_global(f_k, cls_tok[0])
        l_sgd = sgd_loss(torch.stack([f_gl, cls_tok[1]]), cls_tok, 0.07)
        return total_loss(l_seg, l_sgd, l_sam, 0.5)

    worst["total"] = _fd_worst_rel_err(composite, f_c0)

    budget.check()
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    _line(3, "FAIL" if bad else "PASS", f"worst rel err {detail}")
    assert not bad, f"criterion 03: rel err above 1e-4: {bad}"


def test_criterion_04_selection_statistics():
    budget = _Budget(4, 30.0)
    scores = np.array([0.5, -0.3, 1.2, 0.1])
    tau = 0.7
    z = scores / tau
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    rng = np.random.default_rng(0)
    n = 100_000
    counts = np.zeros(4, dtype=np.int64)
    for _ in range(n):
        counts[gumbel_topk(scores, 1, tau, rng=rng)[0]] += 1
    p_value = stats.chisquare(counts, f_exp=probs * n).pvalue
    assert p_value > 0.01, (
        f"criterion 04: selection frequencies {counts / n} deviate from "
        f"softmax(scores/tau) {probs} (chi-square p={p_value:.4f})")

    rng2 = np.random.default_rng(1)
    for _ in range(100):
        m = int(rng2.integers(5, 50))
        s = rng2.standard_normal(m)
        k = int(rng2.integers(1, m + 1))
        got = gumbel_topk(s, k, tau, noise=False)
        want = np.argsort(-s, kind="stable")[:k]
        assert np.array_equal(got, want), \
            f"criterion 04: noise-free selection disagrees with sort oracle"
    elapsed = budget.check()
    _line(4, "PASS", f"chi-square p={p_value:.3f}; 100/100 sort-oracle "
                     f"matches ({elapsed:.1f}s)")


def test_criterion_05_frozen_weights_invariant(small):
    budget = _Budget(5, 120.0)
    bundle = load_weight_bundle(small / "bundle")
    before = head_fingerprint_from_bundle(bundle)
    cfg = small_config(small, "frozen_run", iterations=100, checkpoint_every=50)
    result = train(cfg)

    final = load_checkpoint(result.checkpoint_path)
    assert final["bundle_fingerprint"] == before
    _, head, _ = restore_models(final, bundle)
    assert head.frozen_fingerprint() == before

    early = load_checkpoint(small / "frozen_run" / "checkpoint_000050.pt")
    for key in final["frozen_keys"]:
        name = key.removeprefix("head.")
        assert torch.equal(early["head_state"][name],
                           final["head_state"][name]), \
            f"criterion 05: frozen tensor {key} changed"
    changed = []
    for key in final["trainable_keys"]:
        scope, name = key.split(".", 1)
        state = "backbone_state" if scope == "backbone" else "head_state"
        if not torch.equal(early[state][name], final[state][name]):
            changed.append(key)
    assert changed, "criterion 05: no trainable tensor changed"
    elapsed = budget.check()
    _line(5, "PASS", f"fingerprint {before[:12]} stable over 100 "
                     f"iterations; {len(changed)} trainables moved "
                     f"({elapsed:.1f}s)")


def test_criterion_06_vectorized_paths_match_loop_oracles():
    budget = _Budget(6, 30.0)
    rng = np.random.default_rng(123)
    checks = 0

    for _ in range(20):
        h, w, d = (int(rng.integers(2, 6)) for _ in range(3))
        d = max(d, 2)
        m = int(rng.integers(2, 5))
        f_c = torch.tensor(rng.standard_normal((h, w, d)))
        mask = rng.integers(0, m, size=(h, w)).astype(np.int64)
        mask[0, 0] = 255
        protos = compute_prototypes(f_c, mask, m)
        for row, cid in zip(protos.seen, protos.seen_ids):
            acc, cnt = np.zeros(d), 0
            for i in range(h):
                for j in range(w):
                    if mask[i, j] == cid:
                        acc += f_c[i, j].numpy()
                        cnt += 1
            assert cnt > 0
            np.testing.assert_allclose(row.numpy(), acc / cnt, atol=1e-10)
        checks += 1

    for _ in range(20):
        n, d = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        f = rng.standard_normal((n, d))
        c = rng.standard_normal(d)
        got = similarity_scores(f, c)
        want = np.array([float(f[i] @ c) / np.sqrt(d) for i in range(n)])
        np.testing.assert_allclose(got, want, atol=1e-12)
        checks += 1

    for _ in range(20):
        h, w, d, m = (int(rng.integers(2, 6)) for _ in range(4))
        d, m = max(d, 2), max(m, 2)
        f_c = rng.standard_normal((h, w, d))
        cls = rng.standard_normal((m, d))
        got = pixel_logits(f_c, cls)
        want = np.array([[[float(f_c[i, j] @ cls[c]) for c in range(m)]
                          for j in range(w)] for i in range(h)])
        np.testing.assert_allclose(got, want, atol=1e-12)
        checks += 1

    for _ in range(20):
        b, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        f_g = torch.tensor(rng.standard_normal((b, d)))
        c_g = torch.tensor(rng.standard_normal((b, d)))
        tau = 0.07
        got = sgd_loss(f_g, c_g, tau).item()
        total = 0.0
        for i in range(b):
            logits = np.array([float(f_g[i] @ c_g[j]) / tau
                               for j in range(b)])
            total += -(logits[i] - np.log(np.sum(np.exp(logits - logits.max())))
                       - logits.max())
        np.testing.assert_allclose(got, total / b, atol=1e-9)
        checks += 1

    for _ in range(20):
        p_n, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        f = torch.tensor(rng.standard_normal((p_n, d)) * 0.05)
        a = torch.tensor(rng.standard_normal((p_n, d)) * 0.01)
        c = torch.tensor(rng.standard_normal(d) * 0.05)
        got = sam_loss(f, a, c, 0.07, 0.01).item()
        lp = (f @ c / 0.07).numpy()
        lq = (a @ c / 0.01).numpy()
        lp = lp - lp.max() - np.log(np.sum(np.exp(lp - lp.max())))
        lq = lq - lq.max() - np.log(np.sum(np.exp(lq - lq.max())))
        want = float(np.sum(np.exp(lp) * (lp - lq)))
        np.testing.assert_allclose(got, want, atol=1e-9)
        checks += 1

    for _ in range(20):
        n = int(rng.integers(4, 20))
        x = rng.standard_normal((n, int(rng.integers(2, 7))))
        y = rng.standard_normal((n, int(rng.integers(2, 7))))
        hmat = np.eye(n) - np.ones((n, n)) / n
        k = hmat @ (x @ x.T) @ hmat
        l = hmat @ (y @ y.T) @ hmat
        den = np.sqrt(np.trace(k @ k) * np.trace(l @ l))
        want = 0.0 if den == 0.0 else np.trace(k @ l) / den
        np.testing.assert_allclose(cka(x, y), want, atol=1e-8)
        checks += 1

    elapsed = budget.check()
    _line(6, "PASS", f"{checks} oracle instances across six paths "
                     f"({elapsed:.1f}s)")


def test_criterion_07_overfits_toy_dataset(tmp_path_factory):
    budget = _Budget(7, 600.0)
    cache = overfit_run(tmp_path_factory)
    result = cache["result"]
    assert all(np.isfinite(v) for v in result.final_losses.values()), \
        f"criterion 07: non-finite final losses {result.final_losses}"
    report = evaluate(result.checkpoint_path, gamma=0.0)
    budget.check()
    verdict = "PASS" if report.s_iou >= 0.9 else "FAIL"
    _line(7, verdict, f"seen mIoU {report.s_iou:.4f} after 500 iterations "
                      f"({cache['train_seconds']:.0f}s train)")
    assert report.s_iou >= 0.9, \
        f"criterion 07: seen mIoU {report.s_iou:.4f} < 0.9"


def test_criterion_08_calibration_monotone(tmp_path_factory):
    budget = _Budget(8, 60.0)
    cache = overfit_run(tmp_path_factory)
    checkpoint = cache["result"].checkpoint_path
    counts = []
    for gamma in (0.0, 0.25, 0.5, 1.0):
        preds, ds = predict_maps(checkpoint, gamma=gamma)
        unseen = list(ds.manifest.split.unseen_ids)
        counts.append(sum(int(np.isin(p, unseen).sum()) for p in preds))
    assert all(a <= b for a, b in zip(counts, counts[1:])), \
        f"criterion 08: unseen-pixel counts not monotone: {counts}"
    elapsed = budget.check()
    _line(8, "PASS", f"unseen pixels {counts} non-decreasing over "
                     f"gamma 0 to 1 ({elapsed:.1f}s)")


def test_criterion_09_determinism_and_round_trips(small, tmp_path):
    budget = _Budget(9, 120.0)
    train(small_config(small, "det_a", iterations=50, seed=21))
    train(small_config(small, "det_b", iterations=50, seed=21))
    log_a = (small / "det_a" / "loss_log.csv").read_bytes()
    log_b = (small / "det_b" / "loss_log.csv").read_bytes()
    assert log_a == log_b, "criterion 09: fixed-seed loss logs differ"

    ckpt = small / "det_a" / "checkpoint_final.pt"
    payload = load_checkpoint(ckpt)
    bundle = load_weight_bundle(small / "bundle")
    backbone, head, cfg = restore_models(payload, bundle)
    resaved = tmp_path / "resaved.pt"
    save_checkpoint(resaved, payload["iteration"], backbone, head, cfg,
                    payload["rng_states"], payload["bundle_fingerprint"])
    payload2 = load_checkpoint(resaved)
    for state in ("backbone_state", "head_state"):
        assert payload[state].keys() == payload2[state].keys()
        for name in payload[state]:
            assert torch.equal(payload[state][name], payload2[state][name]), \
                f"criterion 09: {state}['{name}'] not bit-identical"

    save_weight_bundle(bundle, tmp_path / "bundle_copy")
    for f in sorted((small / "bundle").iterdir()):
        assert (tmp_path / "bundle_copy" / f.name).read_bytes() == \
            f.read_bytes(), f"criterion 09: bundle file {f.name} differs"
    elapsed = budget.check()
    _line(9, "PASS", f"identical logs, bit-exact checkpoint and bundle "
                     f"round-trips ({elapsed:.1f}s)")


def test_criterion_10_ablation_grid_runs(small):
    budget = _Budget(10, 600.0)
    runs = []
    for norm in ("bn", "gn", "ln-frozen", "ln-learn", "none"):
        runs.append((f"abl_norm_{norm}", dict(csh_norm=norm)))
    for blocks in (0, 1, 2, 3):
        runs.append((f"abl_blocks_{blocks}", dict(csh_blocks=blocks)))
    for mode in ("decrease", "increase", "none"):
        runs.append((f"abl_decay_{mode}", dict(sgd_mode=mode)))
    for out_name, overrides in runs:
        result = train(small_config(small, out_name, iterations=50,
                                    **overrides))
        assert all(np.isfinite(v) for v in result.final_losses.values()), \
            f"criterion 10: non-finite losses in {out_name}"
    elapsed = budget.check()
    _line(10, "PASS", f"{len(runs)} fifty-iteration ablation runs all "
                      f"finite ({elapsed:.1f}s)")
