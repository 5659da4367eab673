"""Acceptance gate: the headline properties of the system, one line each.

Run `pytest tests/test_acceptance.py -v -s` to see one [PASS]/[FAIL] line
per criterion.  The benchmark criteria share two session-scoped caches of
short runs (about forty in total), so the whole file takes a few minutes
on a laptop CPU; everything else is seconds.
"""

import threading
import time
from dataclasses import replace
from statistics import median

import numpy as np
import pytest

from test_uncertainty import oracle_v_unc
from test_wire import random_downlink, random_uplink

from cloudadapt.cli import (
    _gradcheck_classifier,
    _gradcheck_prompt,
    _gradcheck_teacher,
)
from cloudadapt.config import (
    CloudSideConfig,
    ExperimentConfig,
    ModelConfig,
    apply_preset,
)
from cloudadapt.device import Device
from cloudadapt.harness import (
    build_device,
    build_device_model,
    build_task_and_source,
    build_trainer,
    calibrate_threshold,
    emit_csv,
    forgetting_metric,
    run_experiment,
)
from cloudadapt.models import MLPSpec, build_network, mc_predict, predict
from cloudadapt.numcore import RngState
from cloudadapt.prompt import Prompt, apply, beta, u_ema_update, zero_prompt
from cloudadapt.stream import DomainSpec, DomainStream, StreamConfig, TaskConfig
from cloudadapt.uncertainty import batch_v_unc, v_unc
from cloudadapt.wire import (
    ByteCounter,
    DecodeError,
    decode,
    encode,
    inproc_pair,
    tcp_accept,
    tcp_connect,
    tcp_listen,
)

PRESET_CHAIN = ("source_only", "pseudo_label", "pseudo_label_vpa", "full")


def report(criterion: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared benchmark runs


@pytest.fixture(scope="session")
def bench_cfg():
    # the published operating point: 5 domains x 10 rounds, batch size 8
    return ExperimentConfig()


@pytest.fixture(scope="session")
def ablation_runs(bench_cfg):
    t0 = time.perf_counter()
    runs = {
        preset: [run_experiment(apply_preset(bench_cfg, preset), seed=s)
                 for s in bench_cfg.seeds]
        for preset in PRESET_CHAIN
    }
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def selection_runs(bench_cfg):
    """UGS calibrated to ~50% uplink, plus the three comparison selectors."""
    cfg = bench_cfg
    runs = {"ugs": [], "random": [], "confidence": [], "all_uplink": []}
    for s in cfg.seeds:
        t = calibrate_threshold(cfg, s, target_frac=0.5)
        ugs_cfg = apply_preset(cfg, "full")
        ugs_cfg = replace(ugs_cfg, uncertainty=replace(ugs_cfg.uncertainty, threshold=t))
        runs["ugs"].append(run_experiment(ugs_cfg, seed=s))
        for name in ("random", "confidence", "all_uplink"):
            pcfg = apply_preset(cfg, name)
            pcfg = replace(pcfg, uncertainty=replace(pcfg.uncertainty, frac=0.5))
            runs[name].append(run_experiment(pcfg, seed=s))
    return runs


def _median_acc(results) -> float:
    return median(r.mean_accuracy for r in results)


# ---------------------------------------------------------------------------
# criteria


def test_gradient_correctness():
    t0 = time.perf_counter()
    rng = RngState(4242)
    suites = (("student", _gradcheck_classifier),
              ("teacher_adversarial", _gradcheck_teacher),
              ("prompt", _gradcheck_prompt))
    worst = {}
    for idx, (name, fn) in enumerate(suites):
        base = rng.fork(1000 + idx)
        worst[name] = max(fn(base.fork(i)) for i in range(20))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 30.0
    report("gradient correctness", ok,
           "max_rel_err " + " ".join(f"{k}={v:.2e}" for k, v in worst.items())
           + f" (tol 1e-5), {elapsed:.1f}s")


def test_uncertainty_oracle_equivalence():
    t0 = time.perf_counter()
    rng = RngState(777)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        c = int(rng.integers(2, 9))
        raw = rng.random((n, c)) + 1e-3
        runs = raw / raw.sum(axis=1, keepdims=True)
        agg = "predicted_class" if rng.random(None) < 0.7 else "class_mean"
        worst = max(worst, abs(v_unc(runs, agg) - oracle_v_unc(runs, agg)))

    # no dropout means no spread at all, bit for bit
    zero_ok = True
    for widths, seed in (((5, 9, 4), 3), ((16, 32, 32, 4), 4), ((8, 12, 12, 3), 5)):
        net = build_network(MLPSpec(widths, 0.0), RngState(seed))
        x = RngState(seed + 100).normal(0.0, 1.0, (16, widths[0]))
        scores = batch_v_unc(mc_predict(net, x, 10, RngState(1)))
        zero_ok = zero_ok and bool(np.all(scores == 0.0))
    dev = Device(net, zero_prompt(widths[0]), RngState(6), threshold=0.0)
    res = dev.step(x)
    zero_ok = zero_ok and bool(np.all(res.scores == 0.0)) and res.uplink is None

    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and zero_ok and elapsed < 5.0
    report("uncertainty oracle equivalence", ok,
           f"1000 cases max|diff|={worst:.2e} (tol 1e-12), "
           f"dropout-0 exact zeros={zero_ok}, {elapsed:.2f}s")


def test_uema_blend_arithmetic():
    prev = Prompt(np.array([1.0]), "full_vector", 1, alpha=0.999)
    cand = Prompt(np.array([0.0]), "full_vector", 1, alpha=0.999)
    errs = [
        abs(u_ema_update(prev, cand, 0.0).values[0] - 0.999),
        abs(u_ema_update(prev, cand, 0.1).values[0] - 0.899),
        abs(u_ema_update(prev, cand, 0.5).values[0] - 0.499),
    ]
    clamp_ok = (beta(2.0, 0.999) == 0.0
                and beta(0.0, 0.999) == 0.999
                and np.array_equal(u_ema_update(prev, cand, 1.5).values, cand.values))

    # paired monotonicity: a noisier batch always lands closer to the candidate
    rng = RngState(11)
    prev2 = Prompt(rng.normal(0.0, 1.0, 8), "full_vector", 8, alpha=0.999)
    cand2 = Prompt(rng.normal(0.0, 1.0, 8), "full_vector", 8, alpha=0.999)
    dists = [
        float(np.linalg.norm(u_ema_update(prev2, cand2, float(v)).values - cand2.values))
        for v in np.linspace(0.0, 0.5, 26)
    ]
    mono_ok = all(b < a for a, b in zip(dists, dists[1:]))

    ok = max(errs) <= 1e-12 and clamp_ok and mono_ok
    report("u-ema blend arithmetic", ok,
           f"hand blends max|diff|={max(errs):.2e} (tol 1e-12), "
           f"clamp={clamp_ok}, monotone={mono_ok}")


def test_wire_round_trip_and_transports():
    t0 = time.perf_counter()
    rng = RngState(2024)
    mismatches = 0
    for i in range(10_000):
        if i % 2 == 0:
            msg = random_uplink(rng, int(rng.integers(0, 5)), int(rng.integers(1, 9)))
        else:
            msg = random_downlink(rng)
        if decode(encode(msg)) != msg:
            mismatches += 1

    # same scripted exchange over both transports, same byte counters
    script_rng = RngState(31)
    ups = [random_uplink(script_rng, 3, 6) for _ in range(5)]
    downs = [random_downlink(script_rng, version=k + 1) for k in range(3)]

    def run_script(dev_end, cloud_end):
        for k, up in enumerate(ups):
            dev_end.send(up)
            assert cloud_end.recv(timeout=5.0) == up
            if k < len(downs):
                cloud_end.send(downs[k])
                assert dev_end.recv(timeout=5.0) == downs[k]

    c_in = ByteCounter()
    a, b = inproc_pair(c_in)
    run_script(a, b)
    a.close()
    b.close()

    c_tcp = ByteCounter()
    server = tcp_listen()
    port = server.getsockname()[1]
    ends = {}
    accept = threading.Thread(target=lambda: ends.update(srv=tcp_accept(server, c_tcp)))
    accept.start()
    cli = tcp_connect("127.0.0.1", port, c_tcp)
    accept.join()
    run_script(cli, ends["srv"])
    cli.close()
    ends["srv"].close()
    server.close()
    counters_ok = (c_in.uplink_bytes > 0
                   and c_in.uplink_bytes == c_tcp.uplink_bytes
                   and c_in.downlink_bytes == c_tcp.downlink_bytes)

    # corrupted bytes must surface as DecodeError, never anything else
    fuzz = RngState(99)
    originals = [random_uplink(fuzz, 3, 6), random_downlink(fuzz, version=7)]
    for _ in range(2000):
        raw = bytearray(encode(originals[int(fuzz.integers(0, 2))]))
        raw[int(fuzz.integers(0, len(raw)))] ^= 1 << int(fuzz.integers(0, 8))
        if fuzz.random(None) < 0.25:
            raw = raw[: int(fuzz.integers(0, len(raw)))]
        try:
            decode(bytes(raw))
        except DecodeError:
            pass

    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and counters_ok and elapsed < 30.0
    report("wire round-trip and transports", ok,
           f"10^4 round-trips mismatches={mismatches}, "
           f"counters inproc==tcp={counters_ok}, 2000 corruptions clean, {elapsed:.1f}s")


def test_cross_role_consistency_after_downlink():
    cfg = ExperimentConfig(
        task=TaskConfig(dim=8, classes=4),
        stream=StreamConfig(
            domains=(DomainSpec("bias", 3.0), DomainSpec("rotate", 2.5)),
            rounds=3, batches_per_domain=4, batch_size=8, seed=0,
        ),
        model=ModelConfig(student_widths=(8, 16, 4), teacher_widths=(8, 32, 16, 4),
                          disc_widths=(16, 8, 2)),
        cloud=CloudSideConfig(sync_interval=2, source_size=128, pretrain_epochs=5,
                              pretrain_lr=0.05),
    )
    cfg = apply_preset(cfg, "all_uplink")  # an uplink every batch, regular downlinks

    task, sx, sy = build_task_and_source(cfg)
    net = build_device_model(cfg, 0, sx, sy)
    device = build_device(cfg, 0, net)
    trainer = build_trainer(cfg, 0, net, sx, sy)
    probe = RngState(123).normal(0.0, 1.0, (16, cfg.task.dim))

    n_down = 0
    mismatches = 0
    for batch in DomainStream(task, cfg.stream):
        result = device.step(batch.inputs)
        if result.uplink is None:
            continue
        down = trainer.update(result.uplink)
        if down is None:
            continue
        device.apply_downlink(down)
        n_down += 1
        device_pred = predict(device.net, apply(probe, device.prompt))
        cloud_pred = predict(trainer.student, apply(probe, trainer.prompt))
        if not np.array_equal(device_pred, cloud_pred):
            mismatches += 1

    ok = n_down >= 5 and mismatches == 0
    report("cross-role consistency", ok,
           f"{n_down} downlinks applied, {mismatches} probe-prediction mismatches "
           "(bit-exact required)")


def test_ablation_ordering(ablation_runs):
    runs, elapsed = ablation_runs
    med = {p: _median_acc(runs[p]) for p in PRESET_CHAIN}
    ok = (med["pseudo_label"] - med["source_only"] >= 0.01
          and med["pseudo_label_vpa"] - med["pseudo_label"] >= 0.01
          and med["full"] >= med["pseudo_label_vpa"]
          and elapsed < 600.0)
    report("ablation ordering", ok,
           " < ".join(f"{p}={med[p]:.4f}" for p in PRESET_CHAIN)
           + f" (gaps >= 0.01, 0.01, 0), 20 runs in {elapsed:.0f}s")


def test_selection_strategy_ordering(selection_runs):
    med = {k: _median_acc(v) for k, v in selection_runs.items()}
    frac = median(r.mean_uplink_frac for r in selection_runs["ugs"])
    ok = med["ugs"] >= med["random"] and med["ugs"] >= med["confidence"]
    report("selection-strategy ordering", ok,
           f"ugs={med['ugs']:.4f} >= random={med['random']:.4f}, "
           f"confidence={med['confidence']:.4f} "
           f"(threshold calibrated to 50% warm-up uplink; realized {frac:.0%})")


def test_partial_uplink_efficiency(selection_runs):
    med_ugs = _median_acc(selection_runs["ugs"])
    med_all = _median_acc(selection_runs["all_uplink"])
    ratios = [u.counter.uplink_bytes / a.counter.uplink_bytes
              for u, a in zip(selection_runs["ugs"], selection_runs["all_uplink"])]
    ratio = median(ratios)
    ok = med_ugs >= med_all - 0.01 and ratio <= 0.55
    report("partial-uplink efficiency", ok,
           f"ugs={med_ugs:.4f} vs all={med_all:.4f} (floor all-0.01), "
           f"byte ratio={ratio:.3f} (<= 0.55)")


def test_anti_forgetting(ablation_runs):
    runs, _ = ablation_runs
    domains = range(len(runs["full"][0].config.stream.domains))

    def med_forget(preset, d):
        return median(forgetting_metric(r.records, d) for r in runs[preset])

    full_worst = min(med_forget("full", d) for d in domains)
    src_drift = max(abs(med_forget("source_only", d)) for d in domains)
    ok = full_worst >= -0.02 and src_drift <= 0.02
    report("anti-forgetting trend", ok,
           f"full worst-domain median forgetting={full_worst:+.4f} (>= -0.02), "
           f"source_only max |drift|={src_drift:.4f} (<= 0.02)")


def test_lockstep_determinism(bench_cfg, ablation_runs):
    runs, _ = ablation_runs
    again = run_experiment(apply_preset(bench_cfg, "full"), seed=bench_cfg.seeds[0])
    same = emit_csv(again.records) == emit_csv(runs["full"][0].records)
    report("determinism", same,
           "two lockstep runs with identical config+seed emit bit-identical CSVs")
