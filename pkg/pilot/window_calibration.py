"""Per-step guidance efficacy on several request sets, used to pick ``guidance.t_max``.

    python pilot/window_calibration.py checkpoints/reference.ckpt --seeds 7 11 21 22

For each set of 20 attribute edits, guides every step with t <= --t-max and
records the mean change in g caused by the guided update and the fraction of
runs where it did not increase g.
"""
import argparse
from pathlib import Path

import numpy as np

from faceinpaint.checkpoint import load_checkpoint
from faceinpaint.evaluate import attribute_requests, eval_faces
from faceinpaint.pipeline import EditTrace, Variant, checkpoint_schedule, edit_batch


def main():
    p = argparse.ArgumentParser()
    p.add_argument("ckpt")
    p.add_argument("--seeds", type=int, nargs="+", default=[7, 11, 21, 22])
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--t-max", type=int, default=500)
    p.add_argument("--out", default="pilot/results/window_calibration.tsv")
    args = p.parse_args()
    model, meta = load_checkpoint(args.ckpt)
    schedule = checkpoint_schedule(meta)
    rows = {}
    for seed in args.seeds:
        reqs = attribute_requests(eval_faces(args.n, seed=seed), seed=seed)
        trace = EditTrace()
        edit_batch(reqs, model, schedule, Variant(t_max=args.t_max), trace=trace)
        for t, gp, gg in zip(trace.timesteps, trace.g_plain, trace.g_guided):
            if t <= args.t_max:
                gp, gg = np.array(gp), np.array(gg)
                rows.setdefault(t, []).append((gg.mean() - gp.mean(), (gg <= gp).mean()))
    with Path(args.out).open("w") as fh:
        fh.write("t\t" + "\t".join(f"delta_s{s}\tlowered_s{s}" for s in args.seeds) + "\tdelta_pooled\n")
        for t in sorted(rows, reverse=True):
            cells = "\t".join(f"{d:+.3g}\t{f:.2f}" for d, f in rows[t])
            fh.write(f"{t}\t{cells}\t{np.mean([d for d, _ in rows[t]]):+.3g}\n")
    print(Path(args.out).read_text())


if __name__ == "__main__":
    main()
