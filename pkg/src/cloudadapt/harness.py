"""Experiment orchestration, metrics, calibration, and preset suites.

The default mode runs device and cloud in lockstep inside one process:
the device predicts and uplinks, the cloud immediately consumes the queue,
and downlinks apply at the next batch boundary.  That makes a run a pure
function of (config, seed).  TCP mode runs the two roles in concurrent
threads over a real socket with identical message semantics but no
determinism guarantee.

Per-batch metrics go to CSV or JSON with the fixed header

    round,domain,batch,accuracy,v_unc_mean,uplink_frac,up_bytes,down_bytes,version
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, replace

import numpy as np

from .cloud import CloudTrainer, CloudUpdateRecord
from .config import ConfigError, ExperimentConfig, apply_preset
from .device import Device, SelectionStrategy
from .models import (
    MLPSpec,
    Network,
    backward_pass,
    build_network,
    clone_params,
    forward_pass,
    param_count,
)
from .numcore import (
    Array,
    RngState,
    derive_seed,
    sgd_step,
    softmax_cross_entropy_backward,
)
from .prompt import zero_prompt
from .stream import BaseTask, DomainStream, gen_source, make_task
from .wire import ByteCounter, ChannelClosed, inproc_pair, tcp_accept, tcp_connect, tcp_listen

CSV_HEADER = "round,domain,batch,accuracy,v_unc_mean,uplink_frac,up_bytes,down_bytes,version"

# seed namespace tags
_TAG_STUDENT_INIT = 21
_TAG_TEACHER_INIT = 22
_TAG_DISC_INIT = 23
_TAG_DEVICE_RNG = 24
_TAG_CLOUD_RNG = 25
_TAG_PRETRAIN_STUDENT = 26
_TAG_PRETRAIN_TEACHER = 27
_TAG_WARMUP_STREAM = 28


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    domain: int
    batch: int
    accuracy: float
    v_unc_mean: float
    uplink_frac: float
    up_bytes: int
    down_bytes: int
    version: int


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    records: list[MetricsRecord]
    cloud_records: list[CloudUpdateRecord]
    counter: ByteCounter
    prompt_fraction: float
    device: Device
    trainer: CloudTrainer | None

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.records]))

    @property
    def mean_uplink_frac(self) -> float:
        return float(np.mean([r.uplink_frac for r in self.records]))


# ---------------------------------------------------------------------------
# construction


def pretrain(net: Network, x: Array, y: Array, epochs: int, batch_size: int,
             lr: float, rng: RngState, aug_noise: float = 0.0):
    """Minibatch SGD on the labeled source set, in place."""
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = x[idx]
            if aug_noise > 0.0:
                xb = xb + rng.normal(0.0, aug_noise, xb.shape)
            cache = forward_pass(net, xb)
            dlogits = softmax_cross_entropy_backward(cache.probs, y[idx])
            gw, gb, _ = backward_pass(net, cache, dlogits)
            net.weights = sgd_step(net.weights, gw, lr)
            net.biases = sgd_step(net.biases, gb, lr)


def _check_widths(cfg: ExperimentConfig):
    dim, classes = cfg.task.dim, cfg.task.classes
    m = cfg.model
    if m.student_widths[0] != dim or m.student_widths[-1] != classes:
        raise ConfigError(f"student widths {m.student_widths} do not bracket task {dim}->{classes}")
    if m.teacher_widths[0] != dim or m.teacher_widths[-1] != classes:
        raise ConfigError(f"teacher widths {m.teacher_widths} do not bracket task {dim}->{classes}")
    if m.disc_widths[0] != m.teacher_widths[-2]:
        raise ConfigError(
            f"discriminator input {m.disc_widths[0]} does not match teacher feature width "
            f"{m.teacher_widths[-2]}"
        )
    if cfg.prompt.layout == "prefix" and cfg.prompt.prefix_k > dim:
        raise ConfigError(f"prompt prefix {cfg.prompt.prefix_k} exceeds input width {dim}")


def build_task_and_source(cfg: ExperimentConfig):
    task = make_task(cfg.task, cfg.stream.seed)
    source_x, source_y = gen_source(task, cfg.cloud.source_size, cfg.stream.seed)
    return task, source_x, source_y


def build_device_model(cfg: ExperimentConfig, seed: int, source_x: Array, source_y: Array) -> Network:
    """Source-pretrained copy of the on-device network."""
    spec = MLPSpec(cfg.model.student_widths, cfg.model.dropout_rate)
    net = build_network(spec, RngState(derive_seed(seed, _TAG_STUDENT_INIT)))
    pretrain(net, source_x, source_y, cfg.cloud.pretrain_epochs, cfg.cloud.pretrain_batch,
             cfg.cloud.pretrain_lr, RngState(derive_seed(seed, _TAG_PRETRAIN_STUDENT)))
    return net


def build_device(cfg: ExperimentConfig, seed: int, net: Network) -> Device:
    prompt = zero_prompt(cfg.task.dim, cfg.prompt.layout, cfg.prompt.prefix_k, cfg.prompt.alpha)
    return Device(
        net,
        prompt,
        RngState(derive_seed(seed, _TAG_DEVICE_RNG)),
        threshold=cfg.uncertainty.threshold,
        strategy=SelectionStrategy(cfg.uncertainty.strategy, cfg.uncertainty.frac),
        n_passes=cfg.uncertainty.n_passes,
        aggregate=cfg.uncertainty.aggregate,
    )


def build_trainer(cfg: ExperimentConfig, seed: int, device_net: Network,
                  source_x: Array, source_y: Array, sink=None) -> CloudTrainer:
    """Teacher pretrained on source; student cloned from the device model.

    The teacher sees light input-noise augmentation during pretraining so
    the larger network starts with the broader decision regions the
    collaboration premise assumes.
    """
    spec_t = MLPSpec(cfg.model.teacher_widths, cfg.model.dropout_rate)
    teacher = build_network(spec_t, RngState(derive_seed(seed, _TAG_TEACHER_INIT)))
    pretrain(teacher, source_x, source_y, cfg.cloud.pretrain_epochs, cfg.cloud.pretrain_batch,
             cfg.cloud.pretrain_lr, RngState(derive_seed(seed, _TAG_PRETRAIN_TEACHER)),
             aug_noise=cfg.cloud.teacher_aug_noise)
    student = clone_params(device_net)
    spec_d = MLPSpec(cfg.model.disc_widths, 0.0)
    disc = build_network(spec_d, RngState(derive_seed(seed, _TAG_DISC_INIT)))
    prompt = zero_prompt(cfg.task.dim, cfg.prompt.layout, cfg.prompt.prefix_k, cfg.prompt.alpha)
    return CloudTrainer(
        teacher,
        student,
        disc,
        prompt,
        source_x,
        source_y,
        RngState(derive_seed(seed, _TAG_CLOUD_RNG)),
        lr_teacher=cfg.cloud.lr_teacher if cfg.cloud.lr_teacher > 0 else 0.0,
        lr_student=cfg.cloud.lr_student,
        lr_prompt=cfg.prompt.lr,
        lambda_align=cfg.cloud.lambda_align,
        lambda_grl=cfg.cloud.lambda_grl,
        pl_threshold=cfg.cloud.pl_threshold,
        sync_interval=cfg.cloud.sync_interval,
        u_ema=cfg.prompt.u_ema,
        on_update=sink,
    )


# ---------------------------------------------------------------------------
# running


def run_experiment(cfg: ExperimentConfig, seed: int | None = None,
                   transport: str | None = None) -> RunResult:
    """One full pass over the stream under the configured preset."""
    _check_widths(cfg)
    seed = cfg.seeds[0] if seed is None else seed
    transport = cfg.transport if transport is None else transport
    if transport not in ("inproc", "tcp"):
        raise ConfigError(f"unknown transport {transport!r}")

    task, source_x, source_y = build_task_and_source(cfg)
    device_net = build_device_model(cfg, seed, source_x, source_y)
    device = build_device(cfg, seed, device_net)

    cloud_records: list[CloudUpdateRecord] = []
    counter = ByteCounter()
    collaborating = cfg.preset != "source_only"
    trainer = None
    if collaborating:
        trainer = build_trainer(cfg, seed, device_net, source_x, source_y,
                                sink=cloud_records.append)

    stream = DomainStream(task, cfg.stream)
    if transport == "inproc":
        records = _run_lockstep(cfg, stream, device, trainer, counter)
    else:
        records = _run_tcp(cfg, stream, device, trainer, counter)

    prompt_fraction = device.prompt.n_values / param_count(device.net)
    return RunResult(cfg, seed, records, cloud_records, counter, prompt_fraction,
                     device, trainer)


def _batch_record(batch, device, result, counter) -> MetricsRecord:
    acc = float(np.mean(result.predictions.argmax(axis=1) == batch.labels))
    return MetricsRecord(
        round=batch.round_idx,
        domain=batch.domain_id,
        batch=batch.index,
        accuracy=acc,
        v_unc_mean=float(result.scores.mean()),
        uplink_frac=len(result.selected) / len(batch.labels),
        up_bytes=counter.uplink_bytes,
        down_bytes=counter.downlink_bytes,
        version=device.model_version,
    )


def _run_lockstep(cfg, stream, device, trainer, counter) -> list[MetricsRecord]:
    dev_end, cloud_end = inproc_pair(counter)
    records = []
    for batch in stream:
        # downlinks land between batches
        while (msg := dev_end.try_recv()) is not None:
            device.apply_downlink(msg)
        result = device.step(batch.inputs)
        if result.uplink is not None and trainer is not None:
            dev_end.send(result.uplink)
            while (up := cloud_end.try_recv()) is not None:
                down = trainer.update(up)
                if down is not None:
                    cloud_end.send(down)
        records.append(_batch_record(batch, device, result, counter))
    # a downlink sent during the last batch is still in the pipe
    while (msg := dev_end.try_recv()) is not None:
        device.apply_downlink(msg)
    dev_end.close()
    return records


def _run_tcp(cfg, stream, device, trainer, counter) -> list[MetricsRecord]:
    if trainer is None:
        # nothing to talk to; degrade to the local loop without a peer
        return _run_lockstep(cfg, stream, device, None, counter)

    server = tcp_listen(cfg.tcp_host, cfg.tcp_port)
    host, port = server.getsockname()
    cloud_ready = threading.Event()
    cloud_err: list[BaseException] = []

    def cloud_main():
        try:
            end = tcp_accept(server, counter)
            cloud_ready.set()
            try:
                while True:
                    try:
                        up = end.recv(timeout=30.0)
                    except ChannelClosed:
                        break
                    down = trainer.update(up)
                    if down is not None:
                        try:
                            end.send(down)
                        except ChannelClosed:
                            # device hung up mid-backlog; the run is over
                            break
            finally:
                end.close()
        except BaseException as exc:  # surfaced after join
            cloud_err.append(exc)
            cloud_ready.set()

    thread = threading.Thread(target=cloud_main, name="cloud", daemon=True)
    thread.start()
    dev_end = tcp_connect(host, port, counter)
    records = []
    try:
        for batch in stream:
            while True:
                try:
                    msg = dev_end.try_recv()
                except ChannelClosed:
                    msg = None
                if msg is None:
                    break
                device.apply_downlink(msg)
            result = device.step(batch.inputs)
            if result.uplink is not None:
                dev_end.send(result.uplink)
            records.append(_batch_record(batch, device, result, counter))
        # no more uplinks; keep applying the cloud's backlog until it hangs up
        dev_end.close_write()
        while True:
            try:
                msg = dev_end.try_recv()
            except ChannelClosed:
                break
            if msg is None:
                time.sleep(0.01)
            else:
                device.apply_downlink(msg)
    finally:
        dev_end.close()
        thread.join(timeout=60.0)
        server.close()
    if cloud_err:
        raise cloud_err[0]
    return records


# ---------------------------------------------------------------------------
# metrics


def mean_accuracy(records: list[MetricsRecord]) -> float:
    return float(np.mean([r.accuracy for r in records]))


def domain_round_accuracy(records: list[MetricsRecord]) -> dict[tuple[int, int], float]:
    """(domain, round) -> mean batch accuracy."""
    sums: dict[tuple[int, int], list[float]] = {}
    for r in records:
        sums.setdefault((r.domain, r.round), []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in sums.items()}


def forgetting_metric(records: list[MetricsRecord], domain: int) -> float:
    """Accuracy on a domain in the last round minus the first round."""
    table = domain_round_accuracy(records)
    rounds = sorted({r for (d, r) in table if d == domain})
    if len(rounds) < 2:
        raise ConfigError(f"domain {domain} needs at least two rounds, found {rounds}")
    return table[(domain, rounds[-1])] - table[(domain, rounds[0])]


def per_domain_mean_accuracy(records: list[MetricsRecord]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for r in records:
        sums.setdefault(r.domain, []).append(r.accuracy)
    return {d: float(np.mean(v)) for d, v in sums.items()}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(records: list[MetricsRecord], path: str | None = None) -> str:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(",".join(_fmt(v) for v in (
            r.round, r.domain, r.batch, r.accuracy, r.v_unc_mean, r.uplink_frac,
            r.up_bytes, r.down_bytes, r.version,
        )))
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def parse_csv(text: str) -> list[MetricsRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigError(f"bad metrics header: {lines[0] if lines else '(empty)'}")
    out = []
    for ln in lines[1:]:
        f = ln.split(",")
        out.append(MetricsRecord(
            round=int(f[0]), domain=int(f[1]), batch=int(f[2]),
            accuracy=float(f[3]), v_unc_mean=float(f[4]), uplink_frac=float(f[5]),
            up_bytes=int(f[6]), down_bytes=int(f[7]), version=int(f[8]),
        ))
    return out


def emit_json(records: list[MetricsRecord], path: str | None = None) -> str:
    rows = [{
        "round": r.round, "domain": r.domain, "batch": r.batch,
        "accuracy": r.accuracy, "v_unc_mean": r.v_unc_mean,
        "uplink_frac": r.uplink_frac, "up_bytes": r.up_bytes,
        "down_bytes": r.down_bytes, "version": r.version,
    } for r in records]
    text = json.dumps(rows, indent=1)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def parse_json(text: str) -> list[MetricsRecord]:
    return [MetricsRecord(**row) for row in json.loads(text)]


# ---------------------------------------------------------------------------
# threshold calibration


def collect_warmup_scores(cfg: ExperimentConfig, seed: int, batches: int = 200) -> Array:
    """Per-sample uncertainty of the source-pretrained device model on a
    warm-up stream that mirrors the target distribution (fresh seed)."""
    task, source_x, source_y = build_task_and_source(cfg)
    net = build_device_model(cfg, seed, source_x, source_y)
    device = build_device(cfg, seed, net)
    n_domains = len(cfg.stream.domains)
    warm_cfg = replace(
        cfg.stream,
        rounds=1,
        batches_per_domain=max(1, -(-batches // n_domains)),
        seed=derive_seed(cfg.stream.seed, _TAG_WARMUP_STREAM),
    )
    scores = []
    for batch in DomainStream(task, warm_cfg):
        scores.append(device.step(batch.inputs).scores)
    return np.concatenate(scores)


def bisect_threshold(scores: Array, target_frac: float, tol: float = 0.01,
                     max_iter: int = 60) -> float:
    """Threshold t with mean(scores > t) within tol of target_frac, by
    bisection over the score bound [0, 0.5]."""
    if not 0.0 < target_frac < 1.0:
        raise ConfigError(f"target fraction must be in (0, 1), got {target_frac}")

    def frac_at(t: float) -> float:
        return float(np.mean(scores > t))

    lo, hi = 0.0, 0.5
    if frac_at(lo) <= target_frac:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = frac_at(mid)
        if abs(f - target_frac) <= tol:
            return mid
        if f > target_frac:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_threshold(cfg: ExperimentConfig, seed: int, target_frac: float,
                        batches: int = 200, tol: float = 0.01, max_iter: int = 60) -> float:
    """Bisect an uplink threshold so score > t selects ~target_frac of the
    warm-up samples."""
    scores = collect_warmup_scores(cfg, seed, batches)
    return bisect_threshold(scores, target_frac, tol, max_iter)


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteRow:
    label: str
    preset: str
    target_frac: float | None
    # fraction the calibrated threshold selects on the warm-up stream; the
    # realized run fraction drifts below it as the model adapts
    calibrated_frac: float | None
    median_mean_acc: float
    median_uplink_frac: float
    median_up_bytes: float
    median_down_bytes: float
    domain_acc: tuple[float, ...]
    forgetting: tuple[float, ...]


@dataclass
class SuiteResult:
    rows: list[SuiteRow]
    runs: dict[tuple[str, int], RunResult]
    seeds: tuple[int, ...]


def _aggregate(label: str, preset: str, target: float | None,
               results: list[RunResult],
               calibrated: float | None = None) -> SuiteRow:
    n_domains = len(results[0].config.stream.domains)
    accs = [r.mean_accuracy for r in results]
    fracs = [r.mean_uplink_frac for r in results]
    ups = [r.counter.uplink_bytes for r in results]
    downs = [r.counter.downlink_bytes for r in results]
    per_domain = []
    forgets = []
    for d in range(n_domains):
        per_domain.append(float(np.median([per_domain_mean_accuracy(r.records)[d] for r in results])))
        forgets.append(float(np.median([forgetting_metric(r.records, d) for r in results])))
    return SuiteRow(
        label=label,
        preset=preset,
        target_frac=target,
        calibrated_frac=calibrated,
        median_mean_acc=float(np.median(accs)),
        median_uplink_frac=float(np.median(fracs)),
        median_up_bytes=float(np.median(ups)),
        median_down_bytes=float(np.median(downs)),
        domain_acc=tuple(per_domain),
        forgetting=tuple(forgets),
    )


def run_suite(cfg: ExperimentConfig, presets: list[str], seeds: list[int] | None = None,
              sweep_fractions: tuple[float, ...] = ()) -> SuiteResult:
    """Run each preset over the seed list with a shared stream seed.

    The stream seed stays fixed across presets and seeds (paired
    comparison); the run seed varies model init and every live rng.  Sweep
    fractions add UGS and random rows recalibrated per seed to hit each
    target uplink fraction.
    """
    seeds = list(cfg.seeds) if seeds is None else list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    rows: list[SuiteRow] = []
    runs: dict[tuple[str, int], RunResult] = {}

    for name in presets:
        pcfg = apply_preset(cfg, name)
        results = []
        for s in seeds:
            res = run_experiment(pcfg, seed=s)
            runs[(name, s)] = res
            results.append(res)
        rows.append(_aggregate(name, name, None, results))

    for frac in sweep_fractions:
        for kind in ("ugs", "random"):
            label = f"{kind}@{frac:g}"
            results = []
            cal_fracs = []
            for s in seeds:
                if kind == "ugs":
                    scores = collect_warmup_scores(cfg, s)
                    t = bisect_threshold(scores, frac)
                    cal_fracs.append(float(np.mean(scores > t)))
                    pcfg = apply_preset(cfg, "full")
                    pcfg = replace(pcfg, uncertainty=replace(pcfg.uncertainty, threshold=t))
                else:
                    cal_fracs.append(frac)
                    pcfg = apply_preset(cfg, "random")
                    pcfg = replace(pcfg, uncertainty=replace(pcfg.uncertainty, frac=frac))
                res = run_experiment(pcfg, seed=s)
                runs[(label, s)] = res
                results.append(res)
            rows.append(_aggregate(label, kind, frac, results,
                                   calibrated=float(np.median(cal_fracs))))

    return SuiteResult(rows, runs, tuple(seeds))


def suite_csv(result: SuiteResult, path: str | None = None) -> str:
    n_domains = len(result.rows[0].domain_acc) if result.rows else 0
    header = ["label", "preset", "target_frac", "calibrated_frac", "mean_acc",
              "uplink_frac", "up_bytes", "down_bytes"]
    header += [f"acc_domain_{d}" for d in range(n_domains)]
    header += [f"forget_domain_{d}" for d in range(n_domains)]
    lines = [",".join(header)]
    for row in result.rows:
        cells = [row.label, row.preset,
                 "" if row.target_frac is None else repr(row.target_frac),
                 "" if row.calibrated_frac is None else repr(row.calibrated_frac),
                 repr(row.median_mean_acc), repr(row.median_uplink_frac),
                 repr(row.median_up_bytes), repr(row.median_down_bytes)]
        cells += [repr(a) for a in row.domain_acc]
        cells += [repr(f) for f in row.forgetting]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
