"""Pilot measurements used to fix evaluation thresholds and the guidance window.

    python pilot/run_pilot.py CKPT [CKPT ...] --out pilot/results

For each checkpoint: eyebrow probe accuracy on edits and controls, and the
per-step guidance objective with and without the guided update.
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from faceinpaint import evaluate as ev
from faceinpaint.checkpoint import load_checkpoint
from faceinpaint.config import RunConfig
from faceinpaint.pipeline import EditTrace, Variant, build_schedule, edit_batch
from faceinpaint.probe import ProbeModel, train_brow_probe


def guidance_trace(model, schedule, n, seed, variant):
    reqs = ev.attribute_requests(ev.eval_faces(n, seed + 2), seed)
    trace = EditTrace()
    for i in range(0, n, ev.BATCH):
        part = EditTrace()
        edit_batch(reqs[i:i + ev.BATCH], model, schedule, variant, trace=part)
        if not trace.timesteps:
            trace.timesteps = part.timesteps
            trace.g_plain = [list(v) for v in part.g_plain]
            trace.g_guided = [list(v) for v in part.g_guided]
            trace.idx_size = [list(v) for v in part.idx_size]
        else:
            for k in range(len(part.timesteps)):
                trace.g_plain[k] += part.g_plain[k]
                trace.g_guided[k] += part.g_guided[k]
                trace.idx_size[k] += part.idx_size[k]
    return trace


def main():
    p = argparse.ArgumentParser()
    p.add_argument("ckpts", nargs="+")
    p.add_argument("--out", default="pilot/results")
    p.add_argument("--n-probe", type=int, default=30)
    p.add_argument("--n-trace", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--t-max", type=int, help="guidance window upper bound (default: package default)")
    p.add_argument("--all-t", action="store_true", help="guide at every step (no window)")
    p.add_argument("--no-stfg", action="store_true", help="probe edits without guidance")
    args = p.parse_args()
    t_max = None if args.all_t else (Variant().t_max if args.t_max is None else args.t_max)
    for k, v in ev.VARIANTS.items():
        ev.VARIANTS[k] = replace(v, t_max=t_max)
    tag = ("_nostfg" if args.no_stfg else "") + ("_allt" if t_max is None else f"_tmax{t_max}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe_path = out / "probe.ckpt"
    probe = ProbeModel.load(probe_path) if probe_path.exists() else train_brow_probe()
    probe.save(probe_path)
    schedule = build_schedule(RunConfig())
    rows = []
    for ck in args.ckpts:
        model, meta = load_checkpoint(ck)
        ctx = ev.Context(model=model, schedule=schedule, out=out, seed=args.seed, probe=probe)
        reqs, targets, outs = ctx.brow_edits(args.n_probe, stfg_enabled=not args.no_stfg)
        creqs, ctargets, couts = ctx.brow_edits(args.n_probe, control=True, stfg_enabled=not args.no_stfg)
        acc = ev.probe_accuracy(probe, outs, reqs, targets)
        cacc = ev.probe_accuracy(probe, couts, creqs, ctargets)
        trace = guidance_trace(model, schedule, args.n_trace, args.seed, Variant(t_max=t_max))
        name = Path(ck).stem + tag
        with (out / f"guidance_{name}.tsv").open("w") as fh:
            fh.write("t\tmean_g_plain\tmean_g_guided\tfrac_runs_lowered\tmean_idx\n")
            for t, gp, gg, sz in zip(trace.timesteps, trace.g_plain, trace.g_guided, trace.idx_size):
                gp, gg = np.array(gp), np.array(gg)
                fh.write(f"{t}\t{gp.mean():.6g}\t{gg.mean():.6g}\t{(gg <= gp).mean():.2f}\t{np.mean(sz):.1f}\n")
        rows.append(f"{name}\t{meta.get('step')}\t{meta.get('loss_ratio', float('nan')):.4f}\t{acc:.3f}\t{cacc:.3f}")
        print(rows[-1], flush=True)
    table = out / "probe_pilot.tsv"
    if not table.exists():
        table.write_text("checkpoint\tstep\tloss_ratio\tprobe_accuracy\tcontrol_accuracy\n")
    with table.open("a") as fh:
        for r in rows:
            fh.write(r + "\n")


if __name__ == "__main__":
    main()
