"""Acceptance criteria 1-10, one test each, with one PASS/FAIL line per criterion.

The reference experiments (full FT, MWA, sweep points, ablation rows) run
once per session on the default config and seed and are shared by the
criteria that need them.
"""
import math
import time

import numpy as np
import pytest

from mwadapter import AdapterConfig, BackboneConfig, Modality, MultiWayModel, encode
from mwadapter import adapters as ad
from mwadapter import checkpoint as ck
from mwadapter import cli
from mwadapter import config as C
from mwadapter import data as D
from mwadapter import experiments as E
from mwadapter import report as R
from mwadapter.retrieval import TrainHyper, info_nce_loss, recall_at_k, train
from mwadapter.tensor import Tensor


def record(log, n, ok, detail):
    log[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ------------------------------------------------------- shared reference runs


@pytest.fixture(scope="session")
def cfg():
    return C.loads("", env={})


@pytest.fixture(scope="session")
def split(cfg):
    return E.dataset(cfg)


@pytest.fixture(scope="session")
def full_run(cfg, split):
    return E.run_training(cfg, "full", split)


@pytest.fixture(scope="session")
def mwa_run(cfg, split):
    return E.run_training(cfg, "mwa", split)


@pytest.fixture(scope="session")
def sweep_runs(cfg, split, mwa_run):
    """IR@1 on eval for mids 0, 1, 8, 16; mid 8 is the default MWA run."""
    assert E.sweep_adapter(cfg, 8) == cfg.adapter
    out = {8: mwa_run.result.final("eval").ir[1]}
    for p in E.run_sweep(cfg, [0, 1, 16], split):
        assert p["status"] == "ok", p
        out[p["mid"]] = p["ir1"]
    return out


@pytest.fixture(scope="session")
def ablation_runs(cfg, split, full_run, mwa_run):
    adapters = E.ablation_adapters(cfg)
    assert adapters["KE + AE"] == cfg.adapter
    return {
        "full": full_run,
        "ke": E.run_training(cfg, "mwa", split, adapters["KE only"]),
        "ae": E.run_training(cfg, "mwa", split, adapters["AE only"]),
        "both": mwa_run,
    }


# ------------------------------------------------------------------ criteria


def test_criterion_01_gradcheck(acceptance_log):
    t0 = time.perf_counter()
    res = E.run_gradcheck()
    seconds = time.perf_counter() - t0
    ok = res.max_rel_error <= 1e-5 and seconds < 60 and res.checked > 0
    record(acceptance_log, 1, ok,
           f"max rel error {res.max_rel_error:.2e} (<= 1e-5) over {res.checked} coords, {seconds:.1f} s (< 60 s)")


def test_criterion_02_freezing(acceptance_log, cfg, split):
    model, names = E.build_model(cfg, "mwa")
    snapshot = {n: p.tensor.data.copy() for n, p in model.params.items() if p.frozen}
    res = train(model, split, TrainHyper(max_steps=50, seed=cfg.seed), eval_parts=())
    unchanged = all(model.params[n].tensor.data.tobytes() == a.tobytes() for n, a in snapshot.items())
    moved = any(model.params[n].tensor.data.any() for n in names if n.endswith("w_up"))
    ok = res.steps == 50 and unchanged and res.update_set == names and moved
    record(acceptance_log, 2, ok,
           f"{res.steps} steps; {len(snapshot)} frozen tensors bitwise unchanged={unchanged}; "
           f"update set == freeze list ({len(names)} names)={res.update_set == names}")


def test_criterion_03_identity_start(acceptance_log):
    bcfg = BackboneConfig()
    rng = np.random.default_rng(2024)
    imgs = rng.normal(size=(100, 16, bcfg.patch_input_dim))
    txts = rng.integers(0, bcfg.vocab_size, size=(100, 8))
    base = MultiWayModel(bcfg, seed=0)
    ref = [encode(imgs, Modality.VISION, base).data, encode(txts, Modality.LANGUAGE, base).data]

    zero_init = MultiWayModel(bcfg, seed=0)
    ad.attach_adapters(zero_init, AdapterConfig(), seed=1)
    alpha0 = MultiWayModel(bcfg, seed=0)
    ad.attach_adapters(alpha0, AdapterConfig(alpha=0.0), seed=1)
    r = np.random.default_rng(5)
    for n, p in alpha0.params.items():
        if ad.is_adapter_param(n):
            p.tensor.data[...] = r.normal(0, 0.5, size=p.shape)

    def same(m):
        return all(a.tobytes() == b.tobytes() for a, b in zip(
            ref, [encode(imgs, Modality.VISION, m).data, encode(txts, Modality.LANGUAGE, m).data]))

    ok_zero, ok_alpha = same(zero_init), same(alpha0)
    record(acceptance_log, 3, ok_zero and ok_alpha,
           f"100 inputs x 2 modalities bitwise equal: W_up=0 {ok_zero}, alpha=0 {ok_alpha}")


def test_criterion_04_parameter_accounting(acceptance_log):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(20):
        heads = int(rng.integers(1, 5))
        d = heads * int(rng.integers(2, 17))
        layers = int(rng.integers(1, 5))
        ke, ae = (int(v) for v in rng.integers(0, d, size=2))
        bcfg = BackboneConfig(d=d, layers=layers, heads=heads, ffn_hidden=2 * d, vocab_size=30,
                              patch_input_dim=7, max_tokens=6, embed_dim_out=5)
        m = MultiWayModel(bcfg, seed=0)
        ad.attach_adapters(m, AdapterConfig(ke_mid=ke, ae_mid=ae))
        ad.freeze_backbone(m)
        mismatches += ad.count_params(m).trainable != ad.adapter_param_formula(d, layers, ke, ae)
    pc, _ = E.check_count(C.loads("", env={}))
    ok = mismatches == 0 and 0.02 <= pc.fraction <= 0.04
    record(acceptance_log, 4, ok,
           f"20 random configs, {mismatches} mismatches; toy default {pc.trainable:,}/{pc.total:,} "
           f"= {pc.fraction:.4f} in [0.02, 0.04]")


def test_criterion_05_finetune_gap(acceptance_log, full_run, mwa_run):
    full = full_run.result.final("eval").ir[1]
    mwa = mwa_run.result.final("eval").ir[1]
    seconds = full_run.seconds + mwa_run.seconds
    ok = full >= 0.90 and mwa >= full - 0.05 and seconds < 600
    record(acceptance_log, 5, ok,
           f"eval IR@1 full {full:.3f} (>= 0.90), MWA {mwa:.3f} (>= {full - 0.05:.3f}); both runs {seconds:.0f} s")


def test_criterion_06_sweep_shape(acceptance_log, sweep_runs):
    s = sweep_runs
    ok = s[8] - s[0] >= 0.05 and s[1] < s[8] and s[16] >= s[8] - 0.03
    record(acceptance_log, 6, ok,
           "IR@1 by mid: " + ", ".join(f"{k}:{v:.3f}" for k, v in sorted(s.items())))


def test_criterion_07_ablation(acceptance_log, ablation_runs, mwa_run):
    ir = {k: v.result.final("eval").ir[1] for k, v in ablation_runs.items()}
    zero_shot = mwa_run.result.history[0].metrics["eval"].ir[1]
    ok = ir["both"] >= max(ir["ke"], ir["ae"]) and ir["ke"] > zero_shot and ir["ae"] > zero_shot
    record(acceptance_log, 7, ok,
           f"IR@1 KE+AE {ir['both']:.3f}, KE {ir['ke']:.3f}, AE {ir['ae']:.3f}, zero-shot {zero_shot:.3f}")


def test_criterion_08_drift(acceptance_log, cfg, split, full_run, mwa_run, tmp_path):
    res = E.run_drift(cfg, split, full=full_run, mwa=mwa_run)
    body = cli.drift_body(res)
    text = R.report_text("drift check", [("Held-out concepts", body)])
    in_report = all(f"{res.drift[m]:.6f}" in text and f"{res.heldout[m].ir[1]:.4f}" in text for m in ("full", "mwa"))
    ok = res.drift["mwa"] <= res.drift["full"] and in_report
    record(acceptance_log, 8, ok,
           f"held-out drift MWA {res.drift['mwa']:.4f} <= full {res.drift['full']:.4f}; held-out IR@1 "
           f"MWA {res.heldout['mwa'].ir[1]:.3f}, full {res.heldout['full'].ir[1]:.3f}")


def _sort_oracle(sim, k):
    n = sim.shape[0]

    def hits(mat):
        return sum(sorted(range(n), key=lambda j: (-mat[i, j], j)).index(i) < k for i in range(n)) / n

    return {"tr": hits(sim), "ir": hits(sim.T)}


def test_criterion_09_metric_oracles(acceptance_log):
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 17))
        sim = rng.integers(-2, 3, size=(n, n)).astype(float) if seed % 2 else rng.normal(size=(n, n))
        for k in range(1, n + 1):
            bad += recall_at_k(sim, k) != _sort_oracle(sim, k)
    worst = 0.0
    for b in (2, 8, 32):
        e = Tensor(np.tile(np.array([[0.28, -0.96]]), (b, 1)))
        worst = max(worst, abs(float(info_nce_loss(e, e, 0.07).data) - math.log(b)))
    ok = bad == 0 and worst <= 1e-6
    record(acceptance_log, 9, ok, f"recall vs sort oracle: {bad} mismatches over 100 seeds; "
                                  f"|InfoNCE - ln B| max {worst:.1e}")


def test_criterion_10_determinism_and_formats(acceptance_log, mwa_run, split, tmp_path):
    out = tmp_path / "run"
    code = cli.main(["train", "--mode", "mwa", "--out", str(out)])
    csv_same = code == 0 and (out / "metrics.csv").read_text() == R.metrics_csv(mwa_run.result.history)

    ck.save(mwa_run.model, tmp_path / "m.mwck")
    restored, _ = E.build_model(C.loads("", env={}), "mwa")
    ck.load_into(restored, tmp_path / "m.mwck")
    ck_same = all(restored.params[n].tensor.data.tobytes() == p.tensor.data.tobytes()
                  and restored.params[n].frozen == p.frozen for n, p in mwa_run.model.params.items())
    ck_same = ck_same and ck.dumps(restored.parameters()) == (tmp_path / "m.mwck").read_bytes()
    ck_same = ck_same and (out / "checkpoint.mwck").read_bytes() == (tmp_path / "m.mwck").read_bytes()

    D.save(split, tmp_path / "d.mwad")
    data_same = D.load(tmp_path / "d.mwad") == split and D.dumps(D.load(tmp_path / "d.mwad")) == D.dumps(split)
    ok = csv_same and ck_same and data_same
    record(acceptance_log, 10, ok,
           f"metrics.csv byte-identical {csv_same}; .mwck round trip {ck_same}; MWADATA1 round trip {data_same}")
