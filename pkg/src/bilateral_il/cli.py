"""Command-line front end: collect | train | eval | protractor | plotdata | selftest."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .dataset import CorruptFile, FormatVersionMismatch, NormRanges, export_csv, read_records, write_records
from .deploy import EpisodeReport, evaluate, protractor_episode, protractor_world, table_v, write_reports_csv, \
    write_rows_csv
from .operator import DEMO_CHANNELS, DemoRejected, Demonstration, collect_corpus
from .rnn import DivergedLoss, NetworkParams, VariantMismatch, load_params, save_params, train

log = logging.getLogger("bilateral_il")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_FORMAT = 5
EXIT_DEMO_REJECTED = 6
EXIT_DIVERGED = 7
EXIT_SELFTEST = 8


def _net_path(out: Path, model: int) -> Path:
    return out / f"model{model}.net"


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def build_config(args) -> cfgmod.RunConfig:
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        over["jobs"] = args.jobs
    if getattr(args, "out", None) is not None:
        over["out"] = args.out
    if getattr(args, "inclinations", None) is not None:
        key = "collect.inclinations" if args.command == "collect" else "evaluation.inclinations"
        over[key] = args.inclinations
    if getattr(args, "seeds", None) is not None:
        over["evaluation.seeds"] = args.seeds
    if getattr(args, "iterations", None) is not None:
        over["train.iterations"] = args.iterations
    return cfgmod.load_config(args.config, over)


def _world_kw(cfg: cfgmod.RunConfig) -> dict:
    return cfgmod.dataclasses.asdict(cfg.world)


# ---------------------------------------------------------------------------


def cmd_collect(cfg: cfgmod.RunConfig, out: Path) -> int:
    sc = cfg.script
    script_kw = dict(hand_stiffness=sc.hand_stiffness, hand_damping=sc.hand_damping, press_force=sc.press_force,
                     aim_depth=sc.aim_depth, durations=tuple(sc.durations), start_jitter=sc.start_jitter)
    results = collect_corpus(cfg.collect.inclinations, cfg.collect.per_inclination, cfg.seed, cfg.gains,
                             cfg.manipulator, cfg.layout, script_kw, _world_kw(cfg), cfg.collect.retries)
    demos, summary = [], []
    for i, res in enumerate(results):
        meta = res.demo.meta
        demos.append(res.demo)
        summary.append({"inclination_deg": meta["inclination_deg"], "seed": meta["seed"],
                        "drawn_length": res.drawn_length, "duration": res.demo.duration})
        print(f"demo {i + 1:2d}: inclination {meta['inclination_deg']:5.1f} deg  seed {meta['seed']:6d}  "
              f"drawn {100 * res.drawn_length:5.2f} cm  duration {res.demo.duration:4.2f} s")
    write_records(out / cfg.collect.corpus, demos, cfg.provenance())
    write_rows_csv(out / "collect_summary.csv", summary)
    return EXIT_OK


def _load_corpus(cfg, out: Path) -> list[Demonstration]:
    path = out / cfg.collect.corpus
    if not path.exists():
        raise FileNotFoundError(f"corpus {path} not found; run 'collect' first")
    return read_records(path)[0]


def norm_for(cfg, corpus, variant: str) -> NormRanges:
    if cfg.normalization.source == "table":
        return NormRanges.table(variant)
    return NormRanges.from_corpus(corpus, variant, cfg.normalization.margin)


def _demo_medians(corpus) -> dict:
    return {"ruler_force_median": float(np.median([d.meta["ruler_force_median"] for d in corpus])),
            "press_force_median": float(np.median([d.meta["press_force_median"] for d in corpus]))}


def cmd_train(cfg: cfgmod.RunConfig, out: Path, model: int) -> int:
    variant = f"M{model}"
    corpus = _load_corpus(cfg, out)
    norm = norm_for(cfg, corpus, variant)
    hyper = cfg.train
    t0 = time.perf_counter()
    params, losses = train(corpus, variant, hyper, norm=norm,
                           progress=lambda it, l: log.info("%s iteration %d: mean loss %.3g", variant, it, l))
    params.meta.update(_demo_medians(corpus))
    params.meta["config"] = cfg.provenance()
    save_params(_net_path(out, model), params)
    with open(out / f"model{model}_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    tail = losses[-max(1, len(losses) // 10):].mean()
    print(f"{variant}: final loss {losses[-1]:.4g} (last-10% mean {tail:.4g}) in {time.perf_counter() - t0:.0f} s")
    return EXIT_OK


def untrained_network(variant: str, norm: NormRanges, seed: int, medians: dict) -> NetworkParams:
    net = NetworkParams.init(variant, np.random.default_rng(seed + 991), norm=norm)
    net.meta.update(medians)
    net.meta["label"] = f"{variant}-untrained"
    return net


def cmd_eval(cfg: cfgmod.RunConfig, out: Path) -> int:
    nets = [load_params(_net_path(out, 1), "M1"), load_params(_net_path(out, 2), "M2")]
    ev = cfg.evaluation
    incs = tuple(ev.inclinations)
    common = dict(seeds=ev.seeds, layout=cfg.layout, gains=cfg.gains, params=cfg.manipulator,
                  world_kw=_world_kw(cfg), jobs=cfg.jobs)
    rows, reports = evaluate(nets, incs, cfg=cfg.episode, **common)
    if ev.m1_unclamped:
        free = load_params(_net_path(out, 1), "M1")
        free.meta["label"] = "M1-unclamped"
        unclamped = cfgmod.dataclasses.replace(cfg.episode, m1_clamp=False)
        r2, rep2 = evaluate([free], tuple(i for i in incs if i not in (0.0, 30.0, 60.0)) or incs,
                            cfg=unclamped, **common)
        rows += r2
        reports += rep2
    if ev.baseline:
        base = untrained_network("M2", nets[1].norm, cfg.seed, {k: nets[1].meta.get(k) for k in
                                                                ("ruler_force_median", "press_force_median")})
        r3, rep3 = evaluate([base], tuple(i for i in incs if i in (0.0, 30.0, 60.0)) or incs,
                            cfg=cfg.episode, **common)
        rows += r3
        reports += rep3
    write_rows_csv(out / "eval_summary.csv", rows)
    write_rows_csv(out / "table_v.csv", table_v(rows))
    write_reports_csv(out / "eval_episodes.csv", reports)
    (out / "eval_config.json").write_text(json.dumps(cfg.provenance(), sort_keys=True) + "\n")
    print(_format_rows(rows))
    print()
    for r in table_v(rows):
        print(f"model {r['model']}  {r['inclination']:>10}  {r['success_rate']:>5}")
    return EXIT_OK


def _format_rows(rows) -> str:
    lines = [f"{'network':<14}{'incl':>6}{'success':>9}  failures"]
    for r in rows:
        fails = ", ".join(f"{m}={r[m]}" for m in ("torque_divergence", "contact_loss", "stuck_against_ruler",
                                                    "timeout") if r[m])
        lines.append(f"{r['label']:<14}{r['inclination_deg']:>6g}{100 * r['success_rate']:>8.0f}%  {fails}")
    return "\n".join(lines)


def cmd_protractor(cfg: cfgmod.RunConfig, out: Path) -> int:
    net = load_params(_net_path(out, 2), "M2")
    ev = cfg.evaluation
    world = protractor_world(cfg.layout, ev.protractor_radius, ev.protractor_reference_inclination,
                             **_world_kw(cfg))
    rows, logs = [], []
    for seed in range(ev.seeds):
        rep, dec = protractor_episode(net, seed, world, cfg.layout, ev.protractor_reference_inclination,
                                      cfg.gains, cfg.manipulator, cfg.episode)
        f_ang, p_ang = dec.mean_angles()
        rows.append({**rep.row(), "contact_samples": len(dec.t), "force_command_angle_deg": f_ang,
                     "position_displacement_angle_deg": p_ang})
        dec.write_csv(out / f"protractor_decomposition_seed{seed}.csv")
        logs.append(_episode_log(rep))
        print(f"seed {seed:2d}: arc {100 * rep.drawn_length:5.2f} cm  {rep.failure_mode:<20} "
              f"force-cmd angle {f_ang:5.1f} deg  position-cmd angle {p_ang:5.1f} deg")
    write_rows_csv(out / "protractor_summary.csv", rows)
    write_records(out / "protractor_logs.demo", logs, cfg.provenance())
    return EXIT_OK


EPISODE_CHANNELS = ["theta_s1", "theta_s2", "theta_s3", "dtheta_s1", "dtheta_s2", "dtheta_s3",
                    "tau_res_s1", "tau_res_s2", "tau_res_s3", "tip_x", "tip_y", "tip_z"]


def _episode_log(rep: EpisodeReport) -> Demonstration:
    lg = rep.log
    out_names = [f"out{i + 1}" for i in range(lg["output"].shape[1])]
    data = np.hstack([lg["theta"], lg["velocity"], lg["tau_res"], lg["tip"], lg["output"], lg["tau_ref"]])
    channels = EPISODE_CHANNELS + out_names + ["tau_ref_s1", "tau_ref_s2", "tau_ref_s3"]
    rate = 1.0 / (lg["t"][1] - lg["t"][0]) if len(lg["t"]) > 1 else 50.0
    return Demonstration(rate=round(rate, 9), data=data, channels=channels,
                         meta={"model": rep.model, "seed": rep.seed, "protractor": rep.protractor,
                               "success": rep.success, "failure_mode": rep.failure_mode,
                               "ink": rep.ink.as_array().tolist()})


# ---------------------------------------------------------------------------


def cmd_plotdata(inputs: list[str], out: Path) -> int:
    """Tidy CSV series for external plotting; one file per record, plus ink polylines when present."""
    for name in inputs:
        path = Path(name)
        records, _ = read_records(path)
        for i, rec in enumerate(records):
            stem = out / f"{path.stem}_{i:03d}"
            export_csv(f"{stem}.csv", rec)
            if set(DEMO_CHANNELS) <= set(rec.channels):
                _bilateral_series(f"{stem}_bilateral.csv", rec)
            if "ink" in rec.meta:
                with open(f"{stem}_ink.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["t", "x", "y", "on_guide"])
                    for row in rec.meta["ink"]:
                        w.writerow([repr(float(v)) for v in row[:3]] + [int(row[3])])
    return EXIT_OK


def _bilateral_series(path, demo: Demonstration) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["t"] + [f"theta_err{j}" for j in (1, 2, 3)] + [f"tau_sum{j}" for j in (1, 2, 3)]
        w.writerow(head)
        err = demo.block(["theta_m1", "theta_m2", "theta_m3"]) - demo.block(["theta_s1", "theta_s2", "theta_s3"])
        tsum = demo.block(["tau_res_m1", "tau_res_m2", "tau_res_m3"]) + \
            demo.block(["tau_res_s1", "tau_res_s2", "tau_res_s3"])
        for i in range(len(demo.data)):
            w.writerow([repr(i / demo.rate)] + [repr(float(v)) for v in err[i]] + [repr(float(v)) for v in tsum[i]])


def cmd_selftest() -> int:
    from .selftest import run_all
    ok = True
    for name, passed, detail in run_all():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if ok else EXIT_SELFTEST


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON or YAML run configuration")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--jobs", type=int, help="worker processes for the evaluation grid")
    common.add_argument("--out", metavar="DIR", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bilateral-il", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("collect", parents=[common], help="collect the demonstration corpus")
    c.add_argument("--inclinations", type=_floats, help="comma-separated ruler inclinations, deg")
    t = sub.add_parser("train", parents=[common], help="train one network variant")
    t.add_argument("--model", type=int, choices=(1, 2), required=True)
    t.add_argument("--iterations", type=int)
    e = sub.add_parser("eval", parents=[common], help="run the evaluation grid")
    e.add_argument("--inclinations", type=_floats)
    e.add_argument("--seeds", type=int)
    r = sub.add_parser("protractor", parents=[common], help="run model 2 against a protractor")
    r.add_argument("--seeds", type=int)
    d = sub.add_parser("plotdata", parents=[common], help="export logs as tidy CSV")
    d.add_argument("inputs", nargs="+", help=".demo files (corpus or episode logs)")
    sub.add_parser("selftest", parents=[common], help="run the oracle checks")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest()
        cfg = build_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "collect":
            return cmd_collect(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.model)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "protractor":
            return cmd_protractor(cfg, out)
        if args.command == "plotdata":
            return cmd_plotdata(args.inputs, out)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorruptFile, FormatVersionMismatch, VariantMismatch, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DemoRejected as exc:
        print(f"demonstration rejected: {exc.reason}", file=sys.stderr)
        return EXIT_DEMO_REJECTED
    except DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
