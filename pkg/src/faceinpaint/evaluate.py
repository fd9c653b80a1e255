"""Evaluation suites and the append-only metric report.

Each suite edits deterministic held-out faces with a trained checkpoint and
appends ``name<TAB>value<TAB>threshold<TAB>pass|fail`` lines to ``report.tsv``
under the output directory. A ``# run`` comment line with a UTC timestamp
precedes every batch of metrics. Thresholds come from
``resources/thresholds.yaml``.
"""
from __future__ import annotations

import datetime as _dt
import logging
import operator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import masks as mt
from . import stfg
from .checkpoint import load_checkpoint
from .dataset import (ATTR_CLASSES, BROW_BUCKETS, GRAMMAR, TONE_WORDS, SyntheticFaceSpec,
                      caption_for, generate_face)
from .errors import ParameterError
from .figures import plot_cad, plot_edit_grid, save_score_maps
from .pipeline import VARIANTS, EditRequest, EditTrace, Variant, checkpoint_schedule, edit_batch
from .probe import ProbeModel, crop_around, eval_brow_mask, train_brow_probe

log = logging.getLogger(__name__)

_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}
DEFAULT_N = {"preserve": 50, "probe": 60, "cad": 20, "ablation": 60}
BATCH = 10


def load_thresholds(path=None) -> dict:
    text = Path(path).read_text() if path else \
        resources.files("faceinpaint").joinpath("resources/thresholds.yaml").read_text()
    data = yaml.safe_load(text)
    return {"version": data["version"], **data["metrics"]}


@dataclass
class Metric:
    name: str
    value: float
    op: str
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and _OPS[self.op](self.value, self.threshold)

    def line(self) -> str:
        return f"{self.name}\t{self.value:.6g}\t{self.op}{self.threshold:g}\t{'pass' if self.passed else 'fail'}"


def metric(name: str, value: float, thresholds: dict | None = None) -> Metric:
    th = (thresholds or load_thresholds())[name]
    return Metric(name, float(value), th["op"], float(th["value"]))


def append_report(path, metrics: list[Metric], header: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    version = load_thresholds()["version"]
    with path.open("a", encoding="utf-8") as fh:
        fh.write(f"# run {stamp} thresholds=v{version} {header}\n")
        for m in metrics:
            fh.write(m.line() + "\n")


# evaluation faces -----------------------------------------------------------

@dataclass
class EvalFace:
    spec: SyntheticFaceSpec
    image: np.ndarray
    seg: np.ndarray


def eval_faces(n: int, seed: int = 0, size: int = 32) -> list[EvalFace]:
    """Held-out faces from a seed stream disjoint in purpose from corpus generation."""
    rng = np.random.default_rng([seed, 0xE7A1])
    out = []
    for _ in range(n):
        spec = SyntheticFaceSpec.sample(int(rng.integers(2 ** 31)), size=size)
        f = generate_face(spec)
        out.append(EvalFace(spec, f.image, f.seg))
    return out


def tone_of(spec: SyntheticFaceSpec) -> str:
    return TONE_WORDS[int(spec.brow_darkness > 0.75)]


def brow_requests(faces: list[EvalFace], seed: int, control: bool = False, steps: int = 50,
                  **kw) -> tuple[list[EditRequest], np.ndarray]:
    """Eyebrow-thickness edits with target bucket ``i % 3``.

    With ``control`` the prompt is a caption of some other attribute drawn at
    random, while the recorded targets stay the same.
    """
    rng = np.random.default_rng([seed, 0xC0])
    others = [(a, v) for a in GRAMMAR if a != "eyebrows" for v in GRAMMAR[a]]
    reqs, targets = [], []
    for i, f in enumerate(faces):
        b = i % 3
        if control:
            a, v = others[rng.integers(len(others))]
            prompt = caption_for(a, v, tone=tone_of(f.spec))
        else:
            prompt = caption_for("eyebrows", BROW_BUCKETS[b], tone=tone_of(f.spec))
        reqs.append(EditRequest(image=f.image, mask=eval_brow_mask(f.spec).astype(np.uint8), caption=prompt,
                                steps=steps, seed=seed * 100003 + i, **kw))
        targets.append(b)
    return reqs, np.array(targets)


def attribute_requests(faces: list[EvalFace], seed: int, steps: int = 50, **kw) -> list[EditRequest]:
    """Edits of a random present attribute with a coarse (augmented) mask and a random target value."""
    rng = np.random.default_rng([seed, 0xA7])
    reqs = []
    for i, f in enumerate(faces):
        names = [a for a in ("eyebrows", "eyes", "mouth") if mt.attr_mask(f.seg, ATTR_CLASSES[a]).any()]
        a = names[rng.integers(len(names))]
        precise = mt.attr_mask(f.seg, ATTR_CLASSES[a])
        coarse = mt.augment_mask(precise, "mixed", rng)
        values = list(GRAMMAR[a])
        prompt = caption_for(a, values[rng.integers(len(values))], tone=tone_of(f.spec))
        reqs.append(EditRequest(image=f.image, mask=coarse.astype(np.uint8), caption=prompt, steps=steps,
                                seed=seed * 100003 + i, **kw))
    return reqs


def run_edits(requests: list[EditRequest], model, schedule, variant: Variant | None = None,
              workers: int = 1, batch: int = BATCH) -> np.ndarray:
    """Edit in fixed chunks of ``batch`` so results do not depend on ``workers``."""
    chunks = [requests[i:i + batch] for i in range(0, len(requests), batch)]
    fn = lambda c: edit_batch(c, model, schedule, variant)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            outs = list(ex.map(fn, chunks))
    else:
        outs = [fn(c) for c in chunks]
    return np.concatenate(outs)


def probe_accuracy(probe: ProbeModel, outputs: np.ndarray, requests: list[EditRequest],
                   targets: np.ndarray) -> float:
    crops = np.stack([crop_around(o, r.mask) for o, r in zip(outputs, requests)])
    return float((probe.predict(crops) == targets).mean())


def ring_error(outputs: np.ndarray, requests: list[EditRequest], width: int = 2) -> float:
    """Mean absolute difference to the original over the ``width``-pixel ring inside each mask."""
    vals = []
    for o, r in zip(outputs, requests):
        ring = mt.boundary_ring(r.mask, width).astype(bool)
        vals.append(np.abs(o - r.image)[:, ring].mean())
    return float(np.mean(vals))


def max_outside(outputs: np.ndarray, requests: list[EditRequest]) -> float:
    return float(max(np.abs(o - r.image)[:, ~r.mask.astype(bool)].max() for o, r in zip(outputs, requests)))


def low_quartile_cad(curve: np.ndarray) -> float:
    """Mean |CAD| over radii in the lowest quarter of the radius range."""
    R = len(curve) - 1
    return float(np.abs(curve[: R // 4 + 1]).mean())


# suites -----------------------------------------------------------------------

@dataclass
class Context:
    model: object
    schedule: object
    out: Path
    seed: int = 0
    workers: int = 1
    probe: ProbeModel | None = None
    cache: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=load_thresholds)

    def get_probe(self) -> ProbeModel:
        if self.probe is None:
            self.probe = train_brow_probe(seed=self.seed)
        return self.probe

    def brow_edits(self, n: int, variant: str = "full", control: bool = False, stfg_enabled: bool = True):
        key = ("brow", n, variant, control, stfg_enabled)
        if key not in self.cache:
            reqs, targets = brow_requests(eval_faces(n, self.seed), self.seed, control=control,
                                          stfg_enabled=stfg_enabled)
            outs = run_edits(reqs, self.model, self.schedule, VARIANTS[variant], self.workers)
            self.cache[key] = (reqs, targets, outs)
        return self.cache[key]


def suite_preserve(ctx: Context, n: int) -> list[Metric]:
    reqs = attribute_requests(eval_faces(n, ctx.seed + 1), ctx.seed)
    outs = run_edits(reqs, ctx.model, ctx.schedule, workers=ctx.workers)
    return [metric("preserve.max_abs_outside", max_outside(outs, reqs), ctx.thresholds)]


def suite_probe(ctx: Context, n: int) -> list[Metric]:
    probe = ctx.get_probe()
    reqs, targets, outs = ctx.brow_edits(n)
    creqs, ctargets, couts = ctx.brow_edits(n, control=True)
    acc = probe_accuracy(probe, outs, reqs, targets)
    cacc = probe_accuracy(probe, couts, creqs, ctargets)
    with (ctx.out / "probe_edits.tsv").open("w") as fh:
        pred = probe.predict(np.stack([crop_around(o, r.mask) for o, r in zip(outs, reqs)]))
        fh.write("index\tprompt\ttarget\tpredicted\n")
        for i, (r, t, p) in enumerate(zip(reqs, targets, pred)):
            fh.write(f"{i}\t{r.caption}\t{BROW_BUCKETS[t]}\t{BROW_BUCKETS[p]}\n")
    plot_edit_grid(np.stack([r.image for r in reqs]), {"edit": outs, "control": couts},
                   ctx.out / "probe_edits.png")
    return [metric("probe.clean_accuracy", probe.accuracy, ctx.thresholds),
            metric("probe.accuracy", acc, ctx.thresholds),
            metric("probe.control_accuracy", cacc, ctx.thresholds)]


def suite_cad(ctx: Context, n: int) -> list[Metric]:
    faces = eval_faces(n, ctx.seed + 2)
    on = attribute_requests(faces, ctx.seed)
    off = [replace(r, stfg_enabled=False) for r in on]
    out_on = run_edits(on, ctx.model, ctx.schedule, workers=ctx.workers)
    out_off = run_edits(off, ctx.model, ctx.schedule, workers=ctx.workers)
    cad_dir = ctx.out / "cad"
    cad_dir.mkdir(parents=True, exist_ok=True)
    curves_on, curves_off = [], []
    for i, r in enumerate(on):
        for out, suffix, acc in ((out_on[i], "stfg", curves_on), (out_off[i], "nostfg", curves_off)):
            radii, curve = stfg.cad(out, r.image, r.mask)
            frac = radii / radii[-1]
            np.savetxt(cad_dir / f"sample{i:03d}.{suffix}", np.column_stack([frac, curve]),
                       fmt="%.6f", delimiter="\t", header="radius_fraction\tcad", comments="")
            acc.append(curve)
    curves_on, curves_off = np.array(curves_on), np.array(curves_off)
    plot_cad(frac, curves_on, curves_off, ctx.out / "cad_curves.png")
    lq_on = np.mean([low_quartile_cad(c) for c in curves_on])
    lq_off = np.mean([low_quartile_cad(c) for c in curves_off])
    with (ctx.out / "cad_summary.tsv").open("w") as fh:
        fh.write(f"low_quartile_abs_cad_stfg\t{lq_on:.6g}\nlow_quartile_abs_cad_nostfg\t{lq_off:.6g}\n")
    trace = EditTrace()
    edit_batch(on[:1], ctx.model, ctx.schedule, trace=trace, record_scores=True)
    keep = sorted({0, len(trace.timesteps) // 2, len(trace.timesteps) - 1})
    save_score_maps([trace.scores[k] for k in keep], [trace.timesteps[k] for k in keep], ctx.out / "scores")
    return [metric("cad.low_quartile_delta", lq_on - lq_off, ctx.thresholds)]


def suite_ablation(ctx: Context, n: int) -> list[Metric]:
    probe = ctx.get_probe()
    rows = {}
    for name, variant, stfg_on in (("full", "full", True), ("no_stfg", "full", False),
                                   ("parallel_injection", "parallel_injection", True),
                                   ("no_ca2", "no_ca2", True)):
        reqs, targets, outs = ctx.brow_edits(n, variant, stfg_enabled=stfg_on)
        rows[name] = (ring_error(outs, reqs), probe_accuracy(probe, outs, reqs, targets), outs)
    with (ctx.out / "ablation.tsv").open("w") as fh:
        fh.write("variant\tring_error\tprobe_accuracy\n")
        for name, (ring, acc, _) in rows.items():
            fh.write(f"{name}\t{ring:.6g}\t{acc:.4f}\n")
    reqs = ctx.brow_edits(n)[0]
    plot_edit_grid(np.stack([r.image for r in reqs]), {k: v[2] for k, v in rows.items()},
                   ctx.out / "ablation_edits.png")
    return [metric("ablation.ring_delta", rows["full"][0] - rows["no_stfg"][0], ctx.thresholds),
            metric("ablation.probe_delta", rows["full"][1] - rows["parallel_injection"][1], ctx.thresholds)]


SUITES = {"preserve": suite_preserve, "probe": suite_probe, "cad": suite_cad, "ablation": suite_ablation}


def run_suite(suite: str, ckpt, out_dir="eval_out", n: int | None = None, seed: int = 0,
              workers: int = 1) -> list[Metric]:
    """Run one suite (or ``all``), append to ``report.tsv`` and return the failing metrics."""
    if suite != "all" and suite not in SUITES:
        raise ParameterError(f"unknown suite {suite!r}")
    model, meta = load_checkpoint(ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(model=model, schedule=checkpoint_schedule(meta), out=out, seed=seed, workers=workers)
    names = list(SUITES) if suite == "all" else [suite]
    metrics = []
    for name in names:
        metrics += SUITES[name](ctx, n or DEFAULT_N[name])
    append_report(out / "report.tsv", metrics, header=f"suite={suite} ckpt={ckpt} seed={seed}")
    for m in metrics:
        print(m.line())
    return [m for m in metrics if not m.passed]
