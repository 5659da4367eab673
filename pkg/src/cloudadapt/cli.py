"""Command line front end.

    cloudadapt run       one experiment, metrics to CSV/JSON
    cloudadapt suite     preset table over several seeds
    cloudadapt gradcheck finite-difference audit of every training path
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness
from .cloud import teacher_objective
from .config import (
    ConfigError,
    ExperimentConfig,
    PRESETS,
    apply_preset,
    load,
    save,
)
from .models import (
    MLPSpec,
    backward_pass,
    build_network,
    forward_pass,
    grad_check_against,
    network_grad_check,
)
from .numcore import (
    RngState,
    cross_entropy,
    fd_gradient,
    max_relative_error,
    softmax_cross_entropy_backward,
)
from .prompt import apply as apply_prompt, input_grad_to_prompt, zero_prompt


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load(path)


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    transport = args.transport or cfg.transport
    result = harness.run_experiment(cfg, seed=seed, transport=transport)
    if args.out:
        harness.emit_csv(result.records, args.out)
    if args.json:
        harness.emit_json(result.records, args.json)
    if not args.out and not args.json:
        sys.stdout.write(harness.emit_csv(result.records))
    c = result.counter
    print(f"# preset={cfg.preset} seed={seed} transport={transport}", file=sys.stderr)
    print(f"# mean_accuracy={result.mean_accuracy:.4f} "
          f"uplink_frac={result.mean_uplink_frac:.4f} "
          f"up_bytes={c.uplink_bytes} down_bytes={c.downlink_bytes} "
          f"prompt_fraction={result.prompt_fraction:.6f}", file=sys.stderr)
    return 0


def cmd_suite(args) -> int:
    cfg = _load_config(args.config)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    for p in presets:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}; choices: {', '.join(PRESETS)}")
    if args.seeds is not None:
        seeds = list(range(args.seeds))
    else:
        seeds = list(cfg.seeds)
    sweep = tuple(float(f) for f in args.sweep.split(",")) if args.sweep else ()
    result = harness.run_suite(cfg, presets, seeds, sweep_fractions=sweep)
    text = harness.suite_csv(result, args.out)
    if not args.out:
        sys.stdout.write(text)
    else:
        print(f"# wrote {args.out} ({len(result.rows)} rows, seeds={seeds})", file=sys.stderr)
    return 0


def _debias(net, rng: RngState):
    # fresh nets have zero biases, which can park whole layers exactly on the
    # relu kink (dead sample -> pre-activations identically 0) where central
    # differences and the subgradient convention legitimately disagree
    net.biases = [rng.normal(0.0, 0.1, b.shape) for b in net.biases]


def _kink_margin(net, x) -> float:
    cache = forward_pass(net, x)
    return min(float(np.min(np.abs(z))) for z in cache.pre)


def _draw_clear_of_kinks(net, rng: RngState, shape, margin: float = 1e-4):
    for _ in range(50):
        x = rng.normal(0.0, 1.0, shape)
        if _kink_margin(net, x) > margin:
            return x
    raise ValueError("could not draw inputs clear of relu kinks")


def _gradcheck_classifier(rng: RngState) -> float:
    widths = (3, 6, 5, 4)
    net = build_network(MLPSpec(widths, 0.0), rng.fork(1))
    _debias(net, rng)
    x = _draw_clear_of_kinks(net, rng, (4, widths[0]))
    y = rng.integers(0, widths[-1], 4)
    return network_grad_check(net, x, y)


def _gradcheck_teacher(rng: RngState) -> float:
    """Adversarial objective wrt teacher weights: supervised loss minus the
    scaled alignment term (reversal semantics)."""
    from .cloud import CloudTrainer
    from .models import clone_params, param_count

    t_spec = MLPSpec((3, 10, 8, 6, 4), 0.0)
    s_spec = MLPSpec((3, 5, 5, 4), 0.0)
    d_spec = MLPSpec((6, 5, 2), 0.0)
    teacher = build_network(t_spec, rng.fork(1))
    student = build_network(s_spec, rng.fork(2))
    disc = build_network(d_spec, rng.fork(3))
    _debias(teacher, rng)
    _debias(disc, rng)
    prompt = zero_prompt(3)
    prompt.values[:] = rng.normal(0.0, 0.1, 3)

    # every forward path of the objective must clear the relu kinks: teacher
    # on both prompted batches, discriminator on the stacked features
    for _ in range(50):
        sx = rng.normal(0.0, 1.0, (6, 3))
        sy = rng.integers(0, 4, 6)
        x_t = rng.normal(0.0, 1.0, (5, 3))
        cs = forward_pass(teacher, apply_prompt(sx[:5], prompt))
        ct = forward_pass(teacher, apply_prompt(x_t, prompt))
        feats = np.vstack([cs.feature, ct.feature])
        margins = [_kink_margin(teacher, apply_prompt(sx[:5], prompt)),
                   _kink_margin(teacher, apply_prompt(x_t, prompt)),
                   _kink_margin(disc, feats)]
        if min(margins) > 1e-4:
            break
    else:
        raise ValueError("could not draw a kink-free adversarial configuration")

    trainer = CloudTrainer(teacher, student, disc, prompt, sx, sy, rng.fork(4),
                           lr_teacher=0.0, lr_student=0.0, lr_prompt=0.0,
                           lambda_align=0.3, lambda_grl=0.7)
    x_s = sx[:5]
    y_s = sy[:5]

    # analytic grads through the same path teacher_step uses, lr zero so
    # nothing moves
    from .models import discriminator_grads
    from .numcore import grl_backward

    xs_p = apply_prompt(x_s, trainer.prompt)
    xt_p = apply_prompt(x_t, trainer.prompt)
    cache_s = forward_pass(teacher, xs_p)
    cache_t = forward_pass(teacher, xt_p)
    dlogits = softmax_cross_entropy_backward(cache_s.probs, y_s)
    _, _, _, dfeat_s, dfeat_t = discriminator_grads(disc, cache_s.feature, cache_t.feature)
    rev = trainer.lambda_align * trainer.lambda_grl
    gw_s, gb_s, _ = backward_pass(teacher, cache_s, dlogits, dfeature=grl_backward(dfeat_s, rev))
    gw_t, gb_t, _ = backward_pass(teacher, cache_t, None, dfeature=grl_backward(dfeat_t, rev))
    gw = [a + b for a, b in zip(gw_s, gw_t)]
    gb = [a + b for a, b in zip(gb_s, gb_t)]

    def loss():
        return teacher_objective(trainer, x_s, y_s, x_t)

    return grad_check_against(teacher, gw, gb, loss)


def _gradcheck_prompt(rng: RngState) -> float:
    widths = (4, 7, 5, 3)
    net = build_network(MLPSpec(widths, 0.0), rng.fork(1))
    _debias(net, rng)
    prompt = zero_prompt(4, layout="prefix", prefix_k=2)
    prompt.values[:] = rng.normal(0.0, 0.1, 2)
    # margin measured on the prompted inputs, the point FD perturbs around
    for _ in range(50):
        x = rng.normal(0.0, 1.0, (5, 4))
        if _kink_margin(net, apply_prompt(x, prompt)) > 1e-4:
            break
    else:
        raise ValueError("could not draw inputs clear of relu kinks")
    y = rng.integers(0, 3, 5)

    cache = forward_pass(net, apply_prompt(x, prompt))
    _, _, dx = backward_pass(net, cache, softmax_cross_entropy_backward(cache.probs, y))
    analytic = input_grad_to_prompt(dx, prompt)

    vals = prompt.values.copy()

    def loss():
        shifted = x + np.concatenate([vals, np.zeros(2)])
        return cross_entropy(forward_pass(net, shifted).probs, y)

    fd = fd_gradient(loss, vals)
    return max_relative_error(analytic, fd)


def cmd_gradcheck(args) -> int:
    rng = RngState(args.seed)
    suites = (
        ("classifier", _gradcheck_classifier),
        ("teacher_adversarial", _gradcheck_teacher),
        ("prompt", _gradcheck_prompt),
    )
    worst = 0.0
    ok = True
    for suite_idx, (name, fn) in enumerate(suites):
        base = rng.fork(1000 + suite_idx)
        errs = [fn(base.fork(i)) for i in range(args.trials)]
        emax = max(errs)
        worst = max(worst, emax)
        status = "ok" if emax < args.tol else "FAIL"
        print(f"gradcheck {name:<22} trials={args.trials} max_rel_err={emax:.3e} {status}")
        ok = ok and emax < args.tol
    print(f"gradcheck overall max_rel_err={worst:.3e} tol={args.tol:.0e} "
          f"{'ok' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_init_config(args) -> int:
    save(ExperimentConfig(), args.out)
    print(f"# wrote {args.out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cloudadapt",
                                description="device-cloud collaborative adaptation runner")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="config file (defaults built in)")
    r.add_argument("--preset", choices=PRESETS, help="ablation preset to apply")
    r.add_argument("--seed", type=int, help="run seed (default: first configured seed)")
    r.add_argument("--transport", choices=("inproc", "tcp"))
    r.add_argument("--out", help="write per-batch metrics CSV here")
    r.add_argument("--json", help="write per-batch metrics JSON here")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("suite", help="preset comparison table")
    s.add_argument("--config")
    s.add_argument("--presets", default="source_only,pseudo_label,pseudo_label_vpa,full")
    s.add_argument("--seeds", type=int, help="use seeds 0..N-1 (default: configured list)")
    s.add_argument("--sweep", help="comma list of target uplink fractions, e.g. 0.25,0.5,0.75")
    s.add_argument("--out", help="write the table CSV here")
    s.set_defaults(fn=cmd_suite)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-5)
    g.set_defaults(fn=cmd_gradcheck)

    c = sub.add_parser("init-config", help="write the default config file")
    c.add_argument("--out", default="default.cfg")
    c.set_defaults(fn=cmd_init_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
