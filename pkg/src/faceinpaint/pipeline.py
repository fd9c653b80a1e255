"""Training step and guided, blended inpainting sampler."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import diffusion as dc
from . import stfg
from .conditioning import (ImageEncoder, TextCondition, TextEncoder, VisionCondition, Vocabulary,
                           drop_conditions, masked_mean)
from .config import GuidanceSection, ModelConfig, RunConfig, TrainConfig, from_dict
from .checkpoint import save_checkpoint
from .dataset import Sample, load_corpus, vocabulary_words
from .denoiser import AttentionRecord, Denoiser, DenoiserConfig, LayerRecord, downsample_mask_tensor
from .errors import NumericError, RequestError

log = logging.getLogger(__name__)


class EditModel(nn.Module):
    """Text encoder, image encoder and denoiser trained together."""

    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.vocab = vocab or Vocabulary(vocabulary_words())
        self.text_encoder = TextEncoder(self.vocab, dim=cfg.text_dim, max_len=cfg.max_len)
        self.image_encoder = ImageEncoder(channels=3, patch=cfg.patch, dim=cfg.vision_dim)
        self.denoiser = Denoiser(DenoiserConfig(
            widths=tuple(cfg.widths), time_dim=cfg.time_dim, text_dim=cfg.text_dim,
            vision_dim=cfg.vision_dim, attn_dim=cfg.attn_dim, score_hidden=cfg.score_hidden,
            groups=cfg.groups, score_axis=cfg.score_axis))

    def vision_input(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.cfg.vision_source == "original":
            return image
        return image * (1 - mask)

    def attention_sizes(self, size: int) -> list[int]:
        L = len(self.cfg.widths) - 1
        down = [size >> i for i in range(L)]
        return down + [size >> L] + down[::-1]


def collate(samples: list[Sample]) -> dict:
    return {
        "z0": torch.from_numpy(np.stack([s.z0 for s in samples])).float(),
        "mask": torch.from_numpy(np.stack([s.coarse_mask for s in samples])[:, None]).float(),
        "captions": [s.caption for s in samples],
    }


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    # adaptive, no first-moment momentum
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.0, 0.999))


def train_step(batch: dict, model: EditModel, opt: torch.optim.Optimizer, schedule: dc.NoiseSchedule,
               cfg: TrainConfig, rng: np.random.Generator, gen: torch.Generator | None = None,
               eps: torch.Tensor | None = None) -> float:
    """One optimiser update on the noise-prediction loss; returns the batch loss."""
    model.train()
    z0, mask = batch["z0"], batch["mask"]
    B = z0.shape[0]
    t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=B))
    if eps is None:
        eps = torch.randn(z0.shape, generator=gen)
    z_t = dc.q_sample(z0, t, eps, schedule)

    txt = model.text_encoder(batch["captions"])
    vis = model.image_encoder(model.vision_input(z0, mask))
    txt, vis = drop_conditions(txt, vis, cfg.drop_prob, rng, text_null=model.text_encoder.null_condition(1))

    den = model.denoiser
    ref = den.reference_forward(z0 * (1 - mask), mask, z_t, t)
    eps_pred, _ = den(z_t, t, txt, vis, mask, ref)
    loss = ((eps - eps_pred) ** 2).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite training loss (t range {int(t.min())}..{int(t.max())})")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    return float(loss.detach())


@dataclass
class TrainResult:
    losses: list
    seconds: float
    stopped_at: int


def train(model: EditModel, samples: list[Sample], schedule: dc.NoiseSchedule, cfg: TrainConfig,
          stop_when=None, on_log=None, on_step=None) -> TrainResult:
    """Run ``cfg.steps`` updates; ``stop_when(losses)`` may end the run early.

    ``on_log(step, losses)`` fires every ``log_every`` steps and ``on_step(step, losses)``
    after every update.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg.lr)
    data = collate(samples)
    n = len(samples)
    losses, t0 = [], time.time()
    step = 0
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = {"z0": data["z0"][idx], "mask": data["mask"][idx],
                 "captions": [data["captions"][i] for i in idx]}
        losses.append(train_step(batch, model, opt, schedule, cfg, rng, gen))
        if on_log and (step % cfg.log_every == 0 or step == cfg.steps):
            on_log(step, losses)
        if on_step is not None:
            on_step(step, losses)
        if stop_when is not None and stop_when(losses):
            break
    model.eval()
    return TrainResult(losses=losses, seconds=time.time() - t0, stopped_at=step)


@dataclass
class EditRequest:
    image: np.ndarray                  # (3, H, W) in [-1, 1]
    mask: np.ndarray                   # (H, W) coarse edit mask
    caption: str
    guidance_scale: float = 7.5
    lam: float = 1.0
    steps: int = 50
    seed: int = 0
    stfg_enabled: bool = True


@dataclass
class Variant:
    """Ablation switches; the defaults are the full method."""
    score_override: float | None = None   # 0.0 = parallel injection (no suppression)
    no_vision: bool = False               # drop the visual condition entirely
    window: str = "centered"
    stats: str = "masked"
    sign: str = "descent"
    t_min: int = 0
    t_max: int | None = 300               # guidance only for t <= t_max; None = every step

    @classmethod
    def from_section(cls, g: GuidanceSection) -> "Variant":
        return cls(window=g.window, stats=g.stats, sign=g.sign, t_min=g.t_min, t_max=g.t_max)


VARIANTS = {
    "full": Variant(),
    "parallel_injection": Variant(score_override=0.0),
    "no_ca2": Variant(no_vision=True),
}


@dataclass
class EditTrace:
    timesteps: list = field(default_factory=list)
    g_plain: list = field(default_factory=list)     # per step, (B,) g of the unguided clean estimate
    g_guided: list = field(default_factory=list)    # per step, (B,) g after the guided update
    idx_size: list = field(default_factory=list)
    scores: list = field(default_factory=list)      # per step, list of (B, h, w) score maps per layer


def validate_request(req: EditRequest, model: EditModel) -> None:
    m = np.asarray(req.mask)
    if m.shape != tuple(req.image.shape[-2:]):
        raise RequestError(f"mask shape {m.shape} != image {tuple(req.image.shape[-2:])}")
    if not np.all((m == 0) | (m == 1)):
        raise RequestError("mask must be binary")
    if not m.any():
        raise RequestError("mask is empty")
    if req.steps < 1:
        raise RequestError("steps must be >= 1")
    mt = torch.from_numpy(m.astype(np.float32))[None, None]
    sizes = sorted(set(model.attention_sizes(m.shape[-1])))
    if not any(downsample_mask_tensor(mt, s, s).any() for s in sizes):
        raise RequestError("mask vanishes at every attention resolution")


@torch.no_grad()
def edit_batch(requests: list[EditRequest], model: EditModel, schedule: dc.NoiseSchedule,
               variant: Variant | None = None, trace: EditTrace | None = None,
               record_scores: bool = False) -> np.ndarray:
    """Inpaint a batch of requests sharing steps, scale and guidance strength.

    Returns (B, 3, H, W) float32 images in [-1, 1]. Pixels outside each mask
    equal the input exactly.
    """
    variant = variant or Variant()
    r0 = requests[0]
    for r in requests:
        validate_request(r, model)
        if (r.steps, r.guidance_scale, r.lam, r.stfg_enabled) != (r0.steps, r0.guidance_scale, r0.lam, r0.stfg_enabled):
            raise RequestError("batched requests must share steps, guidance scale, lambda and stfg flag")
    model.eval()
    dtype = next(model.parameters()).dtype
    B = len(requests)
    z0 = torch.from_numpy(np.stack([r.image for r in requests])).to(dtype)
    mask = torch.from_numpy(np.stack([r.mask for r in requests])[:, None].astype(np.float32)).to(dtype)
    H, W = z0.shape[-2:]
    gens = [torch.Generator().manual_seed(int(r.seed)) for r in requests]

    def noise():
        return torch.stack([torch.randn(z0.shape[1:], generator=g, dtype=dtype) for g in gens])

    te, ie, den = model.text_encoder, model.image_encoder, model.denoiser
    txt_c = te([r.caption for r in requests])
    txt_u = te.null_condition(B)
    vis_c = ie(model.vision_input(z0, mask))
    vis_u = ie.null_condition(B, vis_c.tokens.shape[1], like=vis_c.tokens)
    if variant.no_vision:
        vis_c = vis_u
    txt = _cat_text(txt_c, txt_u)
    vis = _cat_vision(vis_c, vis_u)
    mask2 = torch.cat([mask, mask])
    masked2 = torch.cat([z0 * (1 - mask)] * 2)

    gcfg = stfg.GuidanceConfig(lam=r0.lam, window=variant.window, stats=variant.stats, sign=variant.sign,
                               t_min=variant.t_min, t_max=variant.t_max)
    window = stfg.fourier_window(H, W, gcfg.window)
    check = gcfg.window == "centered"
    z0_lp = stfg.lowpass(z0, window, check)
    mask_np = np.stack([r.mask for r in requests]).astype(bool)
    scale = r0.guidance_scale

    ts = schedule.inference_timesteps(r0.steps)
    z = dc.blend_latents(noise(), z0, ts[0], mask, noise(), schedule)

    for t, t_prev in zip(ts[:-1], ts[1:]):
        holder = {}

        def eps_fn(z_in):
            z2 = torch.cat([z_in, z_in])
            ref = den.reference_forward(masked2, mask2, z2, t)
            e, rec = den(z2, t, txt, vis, mask2, ref, score_override=variant.score_override, record_t=t)
            holder["rec"] = rec
            e_c, e_u = e[:B], e[B:]
            return dc.cfg_combine(e_u, e_c, scale)

        guided = r0.stfg_enabled and gcfg.active(t)
        if guided:
            with torch.enable_grad():
                zg = z.detach().requires_grad_(True)
                eps = eps_fn(zg)
                idx = _boundary(holder["rec"], B, (H, W), mask_np, gcfg.stats)
                g = stfg.guidance_objective(zg, eps, t, z0_lp, idx, window, schedule, check)
                (grad,) = torch.autograd.grad(g.sum(), zg)
            eps = eps.detach()
            eps_hat = stfg.guided_epsilon(eps, grad, t, gcfg, schedule)
        else:
            eps = eps_fn(z)
            eps_hat = eps
        if trace is not None:
            if not guided:
                idx = _boundary(holder["rec"], B, (H, W), mask_np, gcfg.stats)
            trace.timesteps.append(t)
            trace.idx_size.append(idx.sum((-2, -1)).tolist())
            trace.g_plain.append(stfg.guidance_objective(z, eps, t, z0_lp, idx, window, schedule, check).tolist())
            trace.g_guided.append(stfg.guidance_objective(z, eps_hat, t, z0_lp, idx, window, schedule, check).tolist())
        if record_scores and trace is not None:
            trace.scores.append([lr.score[:B].reshape(B, *lr.hw).clone() for lr in holder["rec"].layers])

        z = dc.ddim_step(z, eps_hat, t, t_prev, schedule)
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite latent at t={t_prev}")
        z = dc.blend_latents(z, z0, t_prev, mask, noise(), schedule)

    out = torch.where(mask.bool(), z.clamp(-1.0, 1.0), z0)
    return out.float().numpy()


def edit(req: EditRequest, model: EditModel, schedule: dc.NoiseSchedule, variant: Variant | None = None,
         trace: EditTrace | None = None, record_scores: bool = False) -> np.ndarray:
    return edit_batch([req], model, schedule, variant, trace, record_scores)[0]


def _boundary(rec, B: int, size, mask_np: np.ndarray, stats: str) -> torch.Tensor:
    cond = AttentionRecord(layers=[LayerRecord(A_txt=lr.A_txt[:B].detach(), score=lr.score[:B], hw=lr.hw,
                                               lengths=lr.lengths[:B], starts=lr.starts[:B])
                                   for lr in rec.layers], t=rec.t)
    A_bar = stfg.mean_text_attention(cond, size).double().numpy()
    idx = np.stack([stfg.boundary_indices(A_bar[b], mask_np[b], stats) for b in range(B)])
    return torch.from_numpy(idx)


def _cat_text(a, b):
    n = max(a.tokens.shape[1], b.tokens.shape[1])
    pad = lambda x: nn.functional.pad(x, (0, 0, 0, n - x.shape[1]))
    tokens = torch.cat([pad(a.tokens), pad(b.tokens)])
    lengths = torch.cat([a.lengths, b.lengths])
    starts = torch.cat([a.content_starts, b.content_starts])
    return TextCondition(tokens=tokens, lengths=lengths, pooled=masked_mean(tokens, lengths, starts),
                         is_null=torch.cat([a.is_null, b.is_null]), starts=starts)


def _cat_vision(a, b):
    return VisionCondition(tokens=torch.cat([a.tokens, b.tokens]), is_null=torch.cat([a.is_null, b.is_null]))


def loss_ratio(losses, window: int = 100) -> float:
    """Mean of the last ``window`` losses over the mean of the first ``window``."""
    if len(losses) < 2 * window:
        raise ValueError(f"need at least {2 * window} losses, got {len(losses)}")
    return float(np.mean(losses[-window:]) / np.mean(losses[:window]))


def train_from_config(cfg: RunConfig, out: str | None = None) -> TrainResult:
    """Train on ``cfg.data.corpus``; write the checkpoint and a ``.losses.tsv`` log next to it."""
    out = Path(out or cfg.train.out)
    samples = load_corpus(Path(cfg.data.corpus) / "manifest.tsv", "train")
    model = EditModel(cfg.model)
    schedule = build_schedule(cfg)
    every = cfg.train.checkpoint_every

    def meta(losses, **extra):
        d = {"step": len(losses), "config": cfg.to_dict(), **extra}
        if len(losses) >= 200:
            d["loss_ratio"] = loss_ratio(losses)
        return d

    def on_log(step, losses):
        log.info("step %d loss %.4f (recent mean %.4f)", step, losses[-1],
                 float(np.mean(losses[-cfg.train.log_every:])))

    def on_step(step, losses):
        if every and step % every == 0 and step != cfg.train.steps:
            save_checkpoint(model, out.with_name(f"{out.stem}.step{step}{out.suffix}"), meta(losses))

    res = train(model, samples, schedule, cfg.train, on_log=on_log, on_step=on_step)
    save_checkpoint(model, out, meta(res.losses, seconds=round(res.seconds, 1)))
    out.with_suffix(".losses.tsv").write_text(
        "step\tloss\n" + "".join(f"{i + 1}\t{v:.6f}\n" for i, v in enumerate(res.losses)))
    return res


def build_schedule(cfg: RunConfig) -> dc.NoiseSchedule:
    s = cfg.schedule
    return dc.make_schedule(s.T, s.beta_min, s.beta_max, s.kind, s.rho)


def checkpoint_schedule(meta: dict) -> dc.NoiseSchedule:
    """The noise schedule a checkpoint was trained with (defaults if unrecorded)."""
    sched = (meta.get("config") or {}).get("schedule")
    return build_schedule(from_dict({"schedule": sched}))
