"""The three pipeline stages: tune the diffusion model on target priors,
sample pseudo-target data, and refine the segmentor with selective
supervision. Plus preparation, metrics and the threshold sweep.

Every stage stamps its artifacts with a hash of the config sections that
determine them and refuses inputs stamped with a different hash.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .. import adapt, metrics as metrics_mod
from ..conditions import (
    LabelMap, build_multiscale_batch, extract_sketch, load_image, load_label,
    load_sketch, resize_image, resize_label, save_sketch,
)
from ..diffusion import (
    ControlledDenoiser, DenoiserConfig, LatentCodec, ddim_sample, make_schedule,
    make_step_schedule, training_loss,
)
from ..prompt import ConstantCaption, HashedTextEmbedder, apply_prompt_dropout, compose_prompt, label_guidance
from ..rcf import RCFConfig, ResidualConditionFusion
from .checkpoints import load_checkpoint, load_module, require_hash, save_checkpoint
from .config import PipelineConfig
from .hashing import HashLog, sha256_file, stable_seed
from .manifest import GenerationManifest, ManifestRecord
from .synthetic import ensure_dataset, list_source, list_target

logger = logging.getLogger(__name__)

SEG_SECTIONS = ("dataset", "classes", "segmentor")
PREP_SECTIONS = ("dataset", "classes", "conditions", "prompt", "segmentor")
DM_SECTIONS = ("dataset", "classes", "conditions", "prompt", "segmentor", "dm")
GEN_SECTIONS = ("dataset", "classes", "conditions", "prompt", "segmentor", "dm", "sampling")

LAMBDA_GRID: tuple[float | None, ...] = (None, 0.65, 0.75, 0.85, 0.95)


class Workspace:
    def __init__(self, config: PipelineConfig):
        self.root = Path(config.output_root)
        self.segmentor_ckpt = self.root / "segmentor" / "pretrained.pt"
        self.prepare_dir = self.root / "prepare"
        self.dm_dir = self.root / "dm"
        self.generated_dir = self.root / "generated"
        self.refine_dir = self.root / "refine"
        self.reports_dir = self.root / "reports"


def _to_tensor_image(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


def _image_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)


def _image_f32(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / 255.0


# --- segmentor pretraining ------------------------------------------------------

def pretrain_segmentor(config: PipelineConfig) -> Path:
    """Train the stand-in for a pretrained UDA segmentor: supervised source
    training plus confidence-thresholded self-training on the raw target set."""
    ws = Workspace(config)
    ensure_dataset(config)
    seg_cfg = config.segmentor
    torch.manual_seed(seg_cfg.seed)
    model = adapt.ToySegmentor(config.num_classes, seg_cfg.width)
    optimizer = torch.optim.AdamW(model.parameters(), lr=seg_cfg.lr, weight_decay=0.0)

    train_res = config.conditions.train_resolution
    source = []
    for item in list_source(config):
        img = resize_image(load_image(item.image_path), train_res)
        lab = resize_label(load_label(item.label_path, config.num_classes), train_res)
        source.append((_image_u8(img), lab.classes))
    target = []
    for item in list_target(config, "train"):
        target.append(_image_u8(resize_image(load_image(item.image_path), train_res)))

    rng = np.random.default_rng(seg_cfg.seed)
    warmup = seg_cfg.pretrain_steps // 2
    for step in range(seg_cfg.pretrain_steps):
        idx = rng.choice(len(source), size=min(seg_cfg.batch, len(source)), replace=False)
        imgs = torch.stack([_to_tensor_image(_image_f32(source[i][0])) for i in idx])
        labs = torch.from_numpy(np.stack([source[i][1] for i in idx]).astype(np.int64))
        if step >= warmup and target:
            tidx = rng.choice(len(target), size=min(seg_cfg.batch, len(target)), replace=False)
            timgs = torch.stack([_to_tensor_image(_image_f32(target[i])) for i in tidx])
        else:
            timgs = torch.zeros((0, 3, train_res[1], train_res[0]))
        loss = adapt.baseline_loss(model, (imgs, labs), timgs)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if (step + 1) % 100 == 0:
            logger.info("segmentor pretrain step %d loss %.4f", step + 1, loss.item())

    meta = {
        "config_hash": config.section_hash(*SEG_SECTIONS),
        "step": seg_cfg.pretrain_steps,
    }
    return save_checkpoint(ws.segmentor_ckpt, {"segmentor": model}, meta)


def load_segmentor(config: PipelineConfig, path: str | Path) -> adapt.ToySegmentor:
    payload = load_checkpoint(path)
    require_hash(payload["meta"], config.section_hash(*SEG_SECTIONS), f"segmentor checkpoint {path}")
    model = adapt.ToySegmentor(config.num_classes, config.segmentor.width)
    load_module(model, payload["params"], "segmentor")
    return model


def evaluate_segmentor(config: PipelineConfig, model: adapt.ToySegmentor) -> float:
    """Percent mIoU on the synthetic target validation split."""
    preds, gts = [], []
    for item in list_target(config, "val"):
        if item.label_path is None:
            continue
        pred, _ = model.predict(load_image(item.image_path))
        preds.append(pred)
        gts.append(load_label(item.label_path, config.num_classes))
    if not preds:
        raise ValueError("target validation split has no labelled images")
    miou, _ = adapt.mean_iou(preds, gts, config.num_classes)
    return 100.0 * miou


# --- stage: prepare ---------------------------------------------------------------

@dataclass
class PrepareResult:
    written: int
    skipped: int
    prepare_dir: Path


def run_prepare(config: PipelineConfig, progress: Callable[[str], None] | None = None) -> PrepareResult:
    """Persist target priors, sketches for both domains, fused source labels
    and per-image captions. Idempotent: items whose recorded hash still
    matches the file on disk are skipped."""
    ws = Workspace(config)
    ensure_dataset(config)
    if not ws.segmentor_ckpt.exists():
        raise FileNotFoundError(
            f"segmentor checkpoint missing at {ws.segmentor_ckpt}; run pretrain-segmentor first"
        )
    segmentor = load_segmentor(config, ws.segmentor_ckpt)
    seg_id = sha256_file(ws.segmentor_ckpt)[:16]

    prep = ws.prepare_dir
    for sub in ("priors", "sketches/source", "sketches/target", "fused"):
        (prep / sub).mkdir(parents=True, exist_ok=True)
    log = HashLog(prep / "hashes.jsonl")
    written = skipped = 0
    caption_provider = ConstantCaption(config.prompt.caption)
    captions: dict[str, str] = {}

    def _tick(name: str):
        if progress is not None:
            progress(name)

    def _fresh(rel: str) -> bool:
        return log.is_current(rel, prep / rel)

    for item in list_target(config, "train"):
        rels = [f"priors/{item.stem}.png", f"priors/{item.stem}.conf.png", f"priors/{item.stem}.json"]
        if all(_fresh(r) for r in rels):
            skipped += 1
        else:
            adapt.generate_target_prior([(item.stem, item.image_path)], segmentor, prep / "priors", seg_id)
            for r in rels:
                log.record(r, prep / r)
            written += 1
        _tick(f"prior:{item.stem}")

        rel = f"sketches/target/{item.stem}.png"
        if _fresh(rel):
            skipped += 1
        else:
            save_sketch(prep / rel, extract_sketch(
                load_image(item.image_path), config.conditions.sketch_soft_scale, config.conditions.sketch_floor))
            log.record(rel, prep / rel)
            written += 1
        captions[f"target/{item.stem}"] = caption_provider(None)
        _tick(f"sketch:{item.stem}")

    for item in list_source(config):
        rel = f"sketches/source/{item.stem}.png"
        if _fresh(rel):
            skipped += 1
        else:
            save_sketch(prep / rel, extract_sketch(
                load_image(item.image_path), config.conditions.sketch_soft_scale, config.conditions.sketch_floor))
            log.record(rel, prep / rel)
            written += 1
        rel = f"fused/{item.stem}.png"
        if _fresh(rel):
            skipped += 1
        else:
            gt = load_label(item.label_path, config.num_classes)
            pred, _ = segmentor.predict(load_image(item.image_path))
            from ..conditions import fuse_labels, save_label
            save_label(prep / rel, fuse_labels(gt, pred))
            log.record(rel, prep / rel)
            written += 1
        captions[f"source/{item.stem}"] = caption_provider(None)
        _tick(f"source:{item.stem}")

    cap_path = prep / "captions.json"
    cap_blob = json.dumps(captions, sort_keys=True, indent=0)
    if not (cap_path.exists() and log.is_current("captions.json", cap_path) and cap_path.read_text() == cap_blob):
        cap_path.write_text(cap_blob)
        log.record("captions.json", cap_path)
        written += 1
    else:
        skipped += 1

    meta_path = prep / "prepare_meta.json"
    meta = {"config_hash": config.section_hash(*PREP_SECTIONS), "segmentor_checkpoint": seg_id}
    meta_blob = json.dumps(meta, sort_keys=True)
    if not (meta_path.exists() and meta_path.read_text() == meta_blob):
        meta_path.write_text(meta_blob)
    return PrepareResult(written=written, skipped=skipped, prepare_dir=prep)


def _require_prepare(config: PipelineConfig) -> Path:
    prep = Workspace(config).prepare_dir
    meta_path = prep / "prepare_meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"prepare stage has not been run (missing {meta_path})")
    require_hash(json.loads(meta_path.read_text()), config.section_hash(*PREP_SECTIONS), "prepare store")
    return prep


# --- stage: diffusion tuning ----------------------------------------------------

def build_dm_modules(config: PipelineConfig) -> tuple[ControlledDenoiser, ResidualConditionFusion]:
    dm = config.dm
    denoiser = ControlledDenoiser(DenoiserConfig(
        latent_channels=dm.latent_channels,
        width=dm.width,
        emb_dim=dm.emb_dim,
        prompt_dim=config.prompt.embed_dim,
        cond_channels=dm.cond_channels,
    ))
    rcf = ResidualConditionFusion(RCFConfig(
        in_channels_semantic=config.num_classes,
        in_channels_structure=1,
        feature_channels=dm.cond_channels,
        spatial_stride=dm.latent_stride,
    ))
    return denoiser, rcf


@dataclass
class TrainDMResult:
    initial_checkpoint: Path
    final_checkpoint: Path
    losses: list[float]
    smoothed: list[float]


def run_train_dm(config: PipelineConfig) -> TrainDMResult:
    """Tune the control branch (and, at a smaller rate, the base decoder) on
    (target image, target prior) pairs with multi-scale batches, fused
    conditions and enhanced prompts under dropout."""
    ws = Workspace(config)
    prep = _require_prepare(config)
    dm = config.dm
    torch.manual_seed(dm.seed)
    denoiser, rcf = build_dm_modules(config)
    codec = LatentCodec(dm.latent_stride, dm.latent_channels)
    schedule = make_schedule(dm.timesteps, dm.beta_start, dm.beta_end, dm.schedule)
    embedder = HashedTextEmbedder(config.prompt.embed_dim)

    for p in denoiser.base_encoder_parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.AdamW([
        {"params": list(denoiser.control_parameters()) + list(rcf.parameters()), "lr": dm.lr_control},
        {"params": list(denoiser.base_decoder_parameters()), "lr": dm.lr_decoder},
    ], weight_decay=0.0)

    items = list_target(config, "train")
    if not items:
        raise ValueError("no target training images")
    cache = []
    for item in items:
        image = load_image(item.image_path)
        prior = load_label(prep / "priors" / f"{item.stem}.png", config.num_classes)
        sketch = load_sketch(prep / "sketches" / "target" / f"{item.stem}.png")
        cache.append((item.subdomain, _image_u8(image), prior.classes,
                      np.clip(sketch * 255.0 + 0.5, 0, 255).astype(np.uint8)))

    caption = config.prompt.caption
    class_names = config.classes.names
    train_res = config.conditions.train_resolution
    frames_per_micro = max(dm.micro_batch // 2, 1)
    data_rng = np.random.default_rng(dm.seed)
    loss_rng = torch.Generator().manual_seed(dm.seed + 1)

    ws.dm_dir.mkdir(parents=True, exist_ok=True)
    log_path = ws.dm_dir / "train_log.jsonl"
    log_fh = open(log_path, "w")
    losses: list[float] = []
    smoothed: list[float] = []
    initial_path = ws.dm_dir / "checkpoint_initial.pt"
    final_path = ws.dm_dir / "checkpoint_final.pt"

    def _meta(step: int, checkpoint_id: str) -> dict:
        return {
            "config_hash": config.section_hash(*DM_SECTIONS),
            "checkpoint_id": checkpoint_id,
            "step": step,
            "prompt_dropout": config.prompt.dropout,
            "accumulation_period": dm.accumulation_period,
            "lr_control": dm.lr_control,
            "lr_decoder": dm.lr_decoder,
        }

    snapshot = None
    try:
        for step in range(1, dm.train_steps + 1):
            snapshot = (
                {k: v.detach().clone() for k, v in denoiser.state_dict().items()},
                {k: v.detach().clone() for k, v in rcf.state_dict().items()},
            )
            optimizer.zero_grad()
            micro_losses = []
            for _ in range(dm.accumulation_period):
                picks = data_rng.choice(len(cache), size=frames_per_micro, replace=False)
                images, one_hots, sketches, embs = [], [], [], []
                for fi in picks:
                    subdomain, img_u8, prior_cls, sk_u8 = cache[fi]
                    batch = build_multiscale_batch(
                        _image_f32(img_u8), LabelMap(prior_cls, config.num_classes),
                        sk_u8.astype(np.float32) / 255.0, train_res, data_rng,
                        aspect_tol=config.conditions.aspect_tolerance,
                    )
                    for view in (batch.global_view, batch.local_view):
                        guidance = label_guidance(view.label, class_names, config.prompt.min_class_fraction)
                        text = compose_prompt(subdomain, caption, guidance)
                        text = apply_prompt_dropout(text, config.prompt.dropout, data_rng)
                        embs.append(embedder.encode(text))
                        images.append(view.image)
                        one_hots.append(view.one_hot)
                        sketches.append(view.sketch[None])
                z0 = codec.encode_batch(images)
                cond = rcf(torch.from_numpy(np.stack(one_hots)), torch.from_numpy(np.stack(sketches)))
                emb = torch.from_numpy(np.stack(embs))
                loss = training_loss(denoiser, z0, emb, cond, loss_rng, schedule)
                (loss / dm.accumulation_period).backward()
                micro_losses.append(float(loss.detach()))
            optimizer.step()
            losses.append(float(np.mean(micro_losses)))
            window = losses[-dm.loss_window:]
            smoothed.append(float(np.mean(window)))
            log_fh.write(json.dumps({"step": step, "loss": losses[-1], "smoothed": smoothed[-1]}) + "\n")
            if step % 100 == 0:
                log_fh.flush()
                logger.info("dm step %d loss %.4f (smoothed %.4f)", step, losses[-1], smoothed[-1])
            if step == dm.initial_checkpoint_step:
                save_checkpoint(initial_path, {"denoiser": denoiser, "rcf": rcf},
                                _meta(step, "initial"), schedule)
    except ValueError as exc:
        # divergence: restore the last good parameters and halt with them saved
        logger.error("training halted: %s", exc)
        if snapshot is not None:
            denoiser.load_state_dict(snapshot[0])
            rcf.load_state_dict(snapshot[1])
        save_checkpoint(final_path, {"denoiser": denoiser, "rcf": rcf},
                        _meta(len(losses), "final"), schedule)
        log_fh.close()
        raise RuntimeError(f"diffusion training diverged; last good checkpoint at {final_path}") from exc

    log_fh.close()
    save_checkpoint(final_path, {"denoiser": denoiser, "rcf": rcf},
                    _meta(dm.train_steps, "final"), schedule)
    if not initial_path.exists():
        raise ValueError(
            f"initial_checkpoint_step {dm.initial_checkpoint_step} exceeds train_steps {dm.train_steps}"
        )
    return TrainDMResult(initial_path, final_path, losses, smoothed)


def load_dm(config: PipelineConfig, path: str | Path):
    payload = load_checkpoint(path)
    require_hash(payload["meta"], config.section_hash(*DM_SECTIONS), f"DM checkpoint {path}")
    denoiser, rcf = build_dm_modules(config)
    load_module(denoiser, payload["params"], "denoiser")
    load_module(rcf, payload["params"], "rcf")
    denoiser.eval()
    rcf.eval()
    return denoiser, rcf, payload["schedule"], payload["meta"]


# --- stage: generation -----------------------------------------------------------

def _resolve_checkpoint(config: PipelineConfig, checkpoint: str) -> Path:
    if checkpoint in ("initial", "final"):
        return Workspace(config).dm_dir / f"checkpoint_{checkpoint}.pt"
    return Path(checkpoint)


def run_generate(
    config: PipelineConfig,
    checkpoint: str = "final",
    condition_source: str = "source_labels",
    out_name: str | None = None,
    out_root: str | Path | None = None,
) -> Path:
    """Sample pseudo-target images with DDIM from source labels (fused for the
    spatial condition, raw GT for the prompt guidance) or from target priors.
    Every record carries its own derived seed, so re-runs are byte-identical."""
    if condition_source not in ("source_labels", "target_prior"):
        raise ValueError(f"unknown condition_source {condition_source!r}")
    ws = Workspace(config)
    prep = _require_prepare(config)
    ckpt_path = _resolve_checkpoint(config, checkpoint)
    denoiser, rcf, schedule, ckpt_meta = load_dm(config, ckpt_path)
    checkpoint_id = ckpt_meta["checkpoint_id"]
    dm, sampling = config.dm, config.sampling
    codec = LatentCodec(dm.latent_stride, dm.latent_channels)
    embedder = HashedTextEmbedder(config.prompt.embed_dim)
    caption_provider = ConstantCaption(config.prompt.caption)
    train_res = config.conditions.train_resolution
    subdomains = config.prompt.subdomains

    if condition_source == "source_labels":
        pool = list_source(config)
        count = sampling.num_s2t
        default_name = f"s2t_{checkpoint_id}"
    else:
        pool = list_target(config, "train")
        count = sampling.num_prior_final if checkpoint_id == "final" else sampling.num_prior_init
        default_name = "prior_final" if checkpoint_id == "final" else "prior_init"
    if not pool:
        raise ValueError("no conditioning items available")
    name = out_name or default_name
    out_dir = (Path(out_root) if out_root else ws.generated_dir) / name
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    manifest = GenerationManifest(out_dir / "manifest.jsonl")

    order = np.random.default_rng([sampling.seed, 17]).permutation(len(pool))
    picks = [pool[order[i % len(pool)]] for i in range(count)]

    tasks = []
    for i, item in enumerate(picks):
        if sampling.subdomain_policy == "round_robin":
            sub = subdomains[i % len(subdomains)]
        elif sampling.subdomain_policy == "uniform":
            sub = subdomains[int(np.random.default_rng([sampling.seed, 23, i]).integers(len(subdomains)))]
        else:
            raise ValueError(f"unknown subdomain policy {sampling.subdomain_policy!r}")
        seed = stable_seed(sampling.seed, checkpoint_id, condition_source, item.stem, sub, i)

        if condition_source == "source_labels":
            cond_label = load_label(prep / "fused" / f"{item.stem}.png", config.num_classes)
            sketch = load_sketch(prep / "sketches" / "source" / f"{item.stem}.png")
            guidance_label = load_label(item.label_path, config.num_classes)
            caption = caption_provider(load_image(item.image_path))
            label_rel = os.path.relpath(prep / "fused" / f"{item.stem}.png", out_dir)
            sketch_rel = os.path.relpath(prep / "sketches" / "source" / f"{item.stem}.png", out_dir)
        else:
            cond_label = load_label(prep / "priors" / f"{item.stem}.png", config.num_classes)
            sketch = load_sketch(prep / "sketches" / "target" / f"{item.stem}.png")
            guidance_label = cond_label
            caption = caption_provider(load_image(item.image_path))
            label_rel = os.path.relpath(prep / "priors" / f"{item.stem}.png", out_dir)
            sketch_rel = os.path.relpath(prep / "sketches" / "target" / f"{item.stem}.png", out_dir)

        guidance = label_guidance(guidance_label, config.classes.names, config.prompt.min_class_fraction)
        text = compose_prompt(sub, caption, guidance)
        tasks.append({
            "index": i, "stem": item.stem, "subdomain": sub, "seed": seed, "prompt": text,
            "cond_label": cond_label, "sketch": sketch,
            "label_rel": label_rel, "sketch_rel": sketch_rel,
        })

    steps = make_step_schedule(schedule.timesteps, sampling.ddim_steps)
    latent_hw = (train_res[1] // dm.latent_stride, train_res[0] // dm.latent_stride)
    failures = []
    with torch.no_grad():
        for start in range(0, len(tasks), sampling.batch):
            chunk = tasks[start:start + sampling.batch]
            one_hots, sketches, embs, noises = [], [], [], []
            for t in chunk:
                lab = resize_label(t["cond_label"], train_res)
                from ..conditions import one_hot_encode
                one_hots.append(one_hot_encode(lab))
                sketches.append(resize_image(t["sketch"], train_res)[None])
                embs.append(embedder.encode(t["prompt"]))
                g = torch.Generator().manual_seed(t["seed"])
                noises.append(torch.empty(dm.latent_channels, *latent_hw).normal_(generator=g))
            cond = rcf(torch.from_numpy(np.stack(one_hots)), torch.from_numpy(np.stack(sketches)))
            z0 = ddim_sample(denoiser, torch.stack(noises), torch.from_numpy(np.stack(embs)),
                             cond, steps, schedule)
            for t, z in zip(chunk, z0):
                image_rel = f"images/{t['index']:04d}_{t['stem']}_{t['subdomain']}.png"
                try:
                    image = codec.decode(z.numpy())
                    from ..conditions import save_image
                    save_image(out_dir / image_rel, image)
                except (ValueError, OSError) as exc:
                    logger.warning("decode failed for %s: %s", t["stem"], exc)
                    failures.append({"stem": t["stem"], "error": str(exc)})
                    continue
                manifest.append(ManifestRecord(
                    label_path=t["label_rel"], sketch_path=t["sketch_rel"], prompt=t["prompt"],
                    subdomain=t["subdomain"], seed=t["seed"], checkpoint_id=checkpoint_id,
                    image_path=image_rel,
                ))

    meta = {
        "config_hash": config.section_hash(*GEN_SECTIONS),
        "checkpoint_id": checkpoint_id,
        "checkpoint_sha": sha256_file(ckpt_path)[:16],
        "condition_source": condition_source,
        "failures": failures,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    manifest.check_complete(images_dir)
    return manifest.path


# --- stage: refinement -----------------------------------------------------------

@dataclass
class RefineResult:
    pre_miou: float
    post_miou: float
    lambda_threshold: float | None
    checkpoint: Path
    stats_log: Path


def _manifest_sources(config: PipelineConfig) -> dict[str, Path]:
    ws = Workspace(config)
    return {
        "s2t": ws.generated_dir / "s2t_final" / "manifest.jsonl",
        "prior_final": ws.generated_dir / "prior_final" / "manifest.jsonl",
        "prior_init": ws.generated_dir / "prior_init" / "manifest.jsonl",
    }


def _load_manifest_checked(config: PipelineConfig, path: Path) -> GenerationManifest:
    meta_path = path.parent / "meta.json"
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"generation manifest missing at {path}")
    require_hash(json.loads(meta_path.read_text()), config.section_hash(*GEN_SECTIONS),
                 f"generation manifest {path}")
    manifest = GenerationManifest(path)
    if not manifest.records:
        raise ValueError(f"generation manifest {path} is empty")
    return manifest


def run_refine(
    config: PipelineConfig,
    lambda_override: float | None | str = "config",
    tag: str = "default",
) -> RefineResult:
    """Refine the segmentor: baseline objective on source + augmented target,
    plus the selective cross-entropy on (generated s2t image, source GT) pairs
    under the threshold mask. lambda_override=None means agreement-only."""
    ws = Workspace(config)
    ref = config.refine
    lam = ref.lambda_threshold if lambda_override == "config" else lambda_override
    effective_lam = 0.0 if lam is None else float(lam)
    if not 0.0 <= effective_lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")

    model = load_segmentor(config, ws.segmentor_ckpt)
    pre_miou = evaluate_segmentor(config, model)
    train_res = config.conditions.train_resolution
    num_classes = config.num_classes

    # source pool: (image, gt label) at training resolution
    source_pool = []
    for item in list_source(config):
        img = resize_image(load_image(item.image_path), train_res)
        lab = resize_label(load_label(item.label_path, num_classes), train_res)
        source_pool.append((_image_u8(img), lab.classes))

    # augmented target pool: real target images plus generated target-prior data
    target_pool = [_image_u8(resize_image(load_image(i.image_path), train_res))
                   for i in list_target(config, "train")]
    sources = _manifest_sources(config)
    for key, flag in (("prior_final", ref.use_prior_final), ("prior_init", ref.use_prior_init)):
        if not flag:
            continue
        manifest = _load_manifest_checked(config, sources[key])
        for rec in manifest.records:
            target_pool.append(_image_u8(load_image(manifest.resolve(rec.image_path))))
    if not target_pool:
        raise ValueError("augmented target set is empty")

    # s2t pool: (generated image, raw source GT at generated resolution)
    s2t_pool = []
    if ref.use_s2t:
        manifest = _load_manifest_checked(config, sources["s2t"])
        root = Path(config.dataset.root)
        if not root.is_absolute():
            root = Path(config.output_root) / root
        for rec in manifest.records:
            stem = Path(rec.label_path).stem
            gt = load_label(root / "source" / "labels" / f"{stem}.png", num_classes)
            gt_small = resize_label(gt, train_res)
            s2t_pool.append((stem, _image_u8(load_image(manifest.resolve(rec.image_path))), gt_small.classes))

    torch.manual_seed(ref.seed)
    rng = np.random.default_rng(ref.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=ref.lr, weight_decay=0.0)
    refine_dir = ws.refine_dir / tag
    refine_dir.mkdir(parents=True, exist_ok=True)
    stats_path = refine_dir / "selection_stats.jsonl"
    stats_fh = open(stats_path, "w")

    for step in range(1, ref.steps + 1):
        idx = rng.choice(len(source_pool), size=min(ref.batch_source, len(source_pool)), replace=False)
        src_imgs = torch.stack([_to_tensor_image(_image_f32(source_pool[i][0])) for i in idx])
        src_labs = torch.from_numpy(np.stack([source_pool[i][1] for i in idx]).astype(np.int64))
        tidx = rng.choice(len(target_pool), size=min(ref.batch_target, len(target_pool)), replace=False)
        tgt_imgs = torch.stack([_to_tensor_image(_image_f32(target_pool[i])) for i in tidx])
        base = adapt.baseline_loss(model, (src_imgs, src_labs), tgt_imgs, ref.pseudo_threshold)

        s2t_term = torch.zeros(())
        if s2t_pool:
            sidx = rng.choice(len(s2t_pool), size=min(ref.batch_s2t, len(s2t_pool)), replace=False)
            imgs = torch.stack([_to_tensor_image(_image_f32(s2t_pool[i][1])) for i in sidx])
            labs = np.stack([s2t_pool[i][2] for i in sidx])
            logits = model(imgs)
            with torch.no_grad():
                probs = torch.softmax(logits, dim=1)
                conf, pred = probs.max(dim=1)
            masks = []
            for b, i in enumerate(sidx):
                sel = adapt.build_selection_mask(
                    LabelMap(labs[b], num_classes),
                    LabelMap(pred[b].numpy().astype(np.int64), num_classes),
                    conf[b].numpy(), effective_lam,
                )
                masks.append(sel.mask)
                stats_fh.write(json.dumps({
                    "step": step, "image": s2t_pool[i][0], "lambda": lam,
                    **sel.stats.as_dict(),
                }) + "\n")
            s2t_term = adapt.masked_cross_entropy(
                logits, torch.from_numpy(labs.astype(np.int64)), torch.from_numpy(np.stack(masks)))

        loss = adapt.total_uda_loss(base, s2t_term)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 100 == 0:
            logger.info("refine[%s] step %d loss %.4f", tag, step, loss.item())
    stats_fh.close()

    post_miou = evaluate_segmentor(config, model)
    ckpt = save_checkpoint(refine_dir / "refined.pt", {"segmentor": model}, {
        "config_hash": config.section_hash(*SEG_SECTIONS),
        "lambda": lam, "pre_miou": pre_miou, "post_miou": post_miou, "step": ref.steps,
    })
    (refine_dir / "eval.json").write_text(json.dumps(
        {"pre_miou": pre_miou, "post_miou": post_miou, "lambda": lam}, sort_keys=True))
    return RefineResult(pre_miou, post_miou, lam, ckpt, stats_path)


def sweep_lambda(config: PipelineConfig) -> dict:
    """Refine once per threshold in {none, 0.65, 0.75, 0.85, 0.95} and tabulate."""
    ws = Workspace(config)
    results = {}
    pre = None
    for lam in LAMBDA_GRID:
        tag = "lambda_none" if lam is None else f"lambda_{lam:.2f}"
        res = run_refine(config, lambda_override=lam, tag=tag)
        results["none" if lam is None else f"{lam:.2f}"] = res.post_miou
        pre = res.pre_miou
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{'lambda':>10}  {'mIoU':>7}  {'delta':>7}"]
    for key, miou in results.items():
        lines.append(f"{key:>10}  {miou:7.2f}  {miou - pre:+7.2f}")
    lines.append(f"{'(before)':>10}  {pre:7.2f}  {0.0:+7.2f}")
    table = "\n".join(lines) + "\n"
    (ws.reports_dir / "lambda_sweep.txt").write_text(table)
    (ws.reports_dir / "lambda_sweep.json").write_text(json.dumps({"pre": pre, "results": results}))
    return {"pre": pre, "results": results}


# --- stage: metrics ---------------------------------------------------------------

def run_metrics(config: PipelineConfig, manifest_path: str | Path | None = None) -> Path:
    """Evaluate a generation manifest with the table protocol: paired MS-SSIM
    and perceptual distance against each label's real image, pooled Fréchet
    against the real target set."""
    ws = Workspace(config)
    manifest_path = Path(manifest_path) if manifest_path else _manifest_sources(config)["s2t"]
    manifest = _load_manifest_checked(config, manifest_path)
    meta = json.loads((manifest_path.parent / "meta.json").read_text())
    denoiser, _, _, _ = load_dm(config, _resolve_checkpoint(config, "final"))
    codec = LatentCodec(config.dm.latent_stride, config.dm.latent_channels)
    embedder = metrics_mod.DenoiserFeatureEmbedder(denoiser, codec)
    train_res = config.conditions.train_resolution

    by_label: dict[str, list] = {}
    for rec in manifest.records:
        by_label.setdefault(Path(rec.label_path).stem, []).append(rec)
    for recs in by_label.values():
        recs.sort(key=lambda r: r.seed)
    labels = sorted(by_label)
    images_per_label = min(len(v) for v in by_label.values())

    if meta["condition_source"] == "source_labels":
        real_lookup = {i.stem: i.image_path for i in list_source(config)}
    else:
        real_lookup = {i.stem: i.image_path for i in list_target(config, "train")}
    real_images = [resize_image(load_image(real_lookup[stem]), train_res) for stem in labels]
    real_set = [resize_image(load_image(i.image_path), train_res) for i in list_target(config, "train")]

    def replay(stem, i):
        return load_image(manifest.resolve(by_label[stem][i].image_path))

    report = metrics_mod.table3_protocol(
        replay, labels, real_images, images_per_label,
        embedder=embedder, real_set=real_set, ms_ssim_levels=config.metrics.ms_ssim_levels,
    )
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    out = ws.reports_dir / "metrics.txt"
    out.write_text(report.format_table())
    (ws.reports_dir / "metrics.json").write_text(json.dumps({
        "frechet": report.frechet, "perceptual": report.perceptual, "ms_ssim": report.ms_ssim,
        "embedder": report.embedder_id, "num_pairs": report.num_pairs,
    }))
    return out
