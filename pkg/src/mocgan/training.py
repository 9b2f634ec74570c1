"""Pretraining of the text and phrase encoders, and the adversarial loop.

Every random draw inside a step comes from a generator seeded by
``(seed, step)``, and batches come from ``SceneDataset.batch(step)``, so a
run resumed from a checkpoint continues with exactly the samples it would
have seen.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import RegionEncoder
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, config_hash, from_dict, to_dict
from .damsm import MatchingBatch, damsm_loss, pad_sets
from .data.dataset import SceneDataset
from .data.vocab import Vocabulary
from .discriminators import Discriminators, phrase_features
from .losses import (
    LossBundle,
    box_l1,
    d_conditional,
    d_real_fake,
    g_nonsaturating,
    perceptual_l1,
    pixel_l1,
)
from .model import MocGAN, build_graph, build_text_encoder
from .nn_utils import freeze

log = logging.getLogger(__name__)

TE_KIND = "text_encoder"
DAMSM_KIND = "phrase_damsm"
GAN_KIND = "mocgan"


class MissingPrerequisiteError(RuntimeError):
    """A stage was started before the stage it depends on produced its checkpoint."""

    def __init__(self, stage: str, path):
        super().__init__(f"missing checkpoint {path}; run `{stage}` first")
        self.stage = stage
        self.path = path


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    mixed = np.random.SeedSequence([seed, step, stream]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(mixed) & 0x7FFF_FFFF_FFFF_FFFF)


def _append_jsonl(path: Path | None, record: dict):
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


@dataclass
class PretrainResult:
    path: Path
    losses: list = field(default_factory=list)


def _largest_images(batch: dict) -> torch.Tensor:
    return batch["images"][max(batch["images"])]


def pretrain_text_encoder(cfg: Config, dataset: SceneDataset, out_path, steps: int | None = None,
                          metrics_path=None) -> PretrainResult:
    """Word-level DAMSM between caption words and image regions.

    Trains the text encoder together with its own region projections (d = d_w)."""
    torch.manual_seed(cfg.train.seed)
    vocab = dataset.vocab
    te = build_text_encoder(cfg, vocab)
    region = RegionEncoder(cfg.model.d_w, cfg.model.backbone, cfg.model.inception_weights)
    params = [p for p in list(te.parameters()) + list(region.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.train.pretrain_lr, betas=cfg.train.betas)
    steps = cfg.train.pretrain_text_steps if steps is None else steps
    te.train()
    losses = []
    for step in range(steps):
        batch = dataset.batch(step, cfg.train.batch_size)
        g = step_generator(cfg.train.seed, step, 11)
        words, sent, mask = te(batch["captions"], batch["cap_lens"])
        f, f_bar = region(_largest_images(batch), random_crop=True, generator=g)
        loss = damsm_loss(MatchingBatch(words.transpose(1, 2), mask, f, sent, f_bar), cfg.gamma)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % cfg.train.log_every == 0 or step == steps - 1:
            _append_jsonl(metrics_path, {"stage": "pretrain-text", "step": step, "loss": losses[-1]})
            log.info("pretrain-text step %d loss %.4f", step, losses[-1])
    path = save_checkpoint(
        out_path, TE_KIND, {"text_encoder": te.state_dict(), "region": region.state_dict()},
        vocab.hash(), config_hash(cfg), {"losses": losses, "config": to_dict(cfg)},
    )
    return PretrainResult(Path(path), losses)


def _require_ckpt(path, stage: str, kind: str, vocab_hash: str) -> dict:
    if path is None or not Path(path).exists():
        raise MissingPrerequisiteError(stage, path)
    return load_checkpoint(path, kind, vocab_hash)


def load_text_encoder(cfg: Config, vocab: Vocabulary, te_ckpt):
    payload = _require_ckpt(te_ckpt, "pretrain-text", TE_KIND, vocab.hash())
    te = build_text_encoder(cfg, vocab)
    te.load_state_dict(payload["states"]["text_encoder"])
    return freeze(te)


def phrase_matching_batch(feats, phr_to_img, f, f_bar) -> MatchingBatch:
    u_pad, mask = pad_sets(feats.u, phr_to_img, f.shape[0])
    return MatchingBatch(u_pad, mask, f, feats.u_bar, f_bar)


def pretrain_phrase_damsm(cfg: Config, dataset: SceneDataset, te_ckpt, out_path, steps: int | None = None,
                          metrics_path=None) -> PretrainResult:
    """Phrase-level DAMSM: trains the implicit graph (IRE + IGE) and the region
    projections against a frozen text encoder."""
    vocab = dataset.vocab
    te = load_text_encoder(cfg, vocab, te_ckpt)
    torch.manual_seed(cfg.train.seed + 1)
    graph = build_graph(cfg, vocab, dataset.categories)
    region = RegionEncoder(cfg.model.d_p, cfg.model.backbone, cfg.model.inception_weights)
    params = [p for p in list(graph.parameters()) + list(region.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.train.pretrain_lr, betas=cfg.train.betas)
    steps = cfg.train.pretrain_damsm_steps if steps is None else steps
    graph.train()
    losses = []
    for step in range(steps):
        batch = dataset.batch(step, cfg.train.batch_size)
        g = step_generator(cfg.train.seed, step, 12)
        with torch.no_grad():
            words, _, mask = te(batch["captions"], batch["cap_lens"])
        z = torch.randn(len(batch["cap_lens"]), cfg.model.noise_dim, generator=g)
        ig, feats, _ = graph(batch["labels"], batch["obj_to_img"], batch["captions"], words, mask, z)
        f, f_bar = region(_largest_images(batch), random_crop=True, generator=g)
        loss = damsm_loss(phrase_matching_batch(feats, ig.phr_to_img, f, f_bar), cfg.gamma)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % cfg.train.log_every == 0 or step == steps - 1:
            _append_jsonl(metrics_path, {"stage": "pretrain-damsm", "step": step, "loss": losses[-1]})
            log.info("pretrain-damsm step %d loss %.4f", step, losses[-1])
    path = save_checkpoint(
        out_path, DAMSM_KIND, {"graph": graph.state_dict(), "region": region.state_dict()},
        vocab.hash(), config_hash(cfg), {"losses": losses, "config": to_dict(cfg), "text_encoder": str(te_ckpt)},
    )
    return PretrainResult(Path(path), losses)


def _zero():
    return torch.zeros(())


def sample_phrases(phr_to_img: torch.Tensor, per_image: int, generator: torch.Generator) -> torch.Tensor:
    """Up to ``per_image`` random phrase indices per image, in ascending order."""
    if per_image <= 0:
        return torch.arange(len(phr_to_img))
    keep = []
    for b in torch.unique(phr_to_img):
        idx = torch.nonzero(phr_to_img == b).flatten()
        perm = torch.randperm(len(idx), generator=generator)[:per_image]
        keep.append(idx[perm])
    return torch.sort(torch.cat(keep)).values


def _roll(x: torch.Tensor) -> torch.Tensor:
    return torch.roll(x, 1, dims=0)


class Trainer:
    """Alternating discriminator / generator updates over the frozen encoders."""

    def __init__(self, cfg: Config, dataset: SceneDataset, te_ckpt=None, damsm_ckpt=None, out_dir=None,
                 _restore: dict | None = None):
        self.cfg = cfg
        self.dataset = dataset
        self.vocab = dataset.vocab
        self.out_dir = Path(out_dir) if out_dir else None
        self.resolutions = tuple(cfg.model.base_resolution * 2 ** i for i in range(cfg.model.n_stages))
        missing = [r for r in self.resolutions if r not in dataset.resolutions]
        if missing:
            raise ValueError(f"dataset does not provide resolutions {missing}")
        torch.manual_seed(cfg.train.seed)
        self.model = MocGAN(cfg, self.vocab, dataset.categories)
        if _restore is None:
            te = _require_ckpt(te_ckpt, "pretrain-text", TE_KIND, self.vocab.hash())
            dm = _require_ckpt(damsm_ckpt, "pretrain-damsm", DAMSM_KIND, self.vocab.hash())
            self.model.text_encoder.load_state_dict(te["states"]["text_encoder"])
            self.model.graph.load_state_dict(dm["states"]["graph"])
            self.model.region.load_state_dict(dm["states"]["region"])
        self.model.freeze_pretrained()
        t = cfg.train
        self.disc = Discriminators(
            dataset.n_categories, self.resolutions, cfg.model.d_p, cfg.model.d_w, cfg.model.d_width, cfg.model.phrase_d_width,
            t.use_patch_d, t.use_ig_patch_d, t.use_caption_patch_d, t.use_obj_d, t.use_phrase_d,
        )
        self.opt_g = torch.optim.Adam(self.model.generator.parameters(), lr=t.lr, betas=t.betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=t.lr, betas=t.betas)
        self.step = 0
        if _restore is not None:
            self._load_states(_restore)

    # ---- losses -------------------------------------------------------------

    def _phrase_d_active(self) -> bool:
        if self.disc.phr_unc is None:
            return False
        return self.cfg.train.phrase_d_on_upsampled or self.resolutions[-1] == self.cfg.model.phrase_d_resolution

    def _phrase_inputs(self, enc, batch, phr_idx):
        graph = enc["graph"]
        return graph.pair_index[phr_idx], graph.phr_to_img[phr_idx], graph.relations[phr_idx]

    def discriminator_losses(self, batch, enc, fakes, phr_idx) -> tuple[torch.Tensor, dict]:
        d = self.disc
        feats = enc["feats"]
        terms, stats = {}, {}
        total = _zero()
        for i, res in enumerate(self.resolutions):
            real, fake = batch["images"][res], fakes[i]
            if d.patch_unc is not None:
                lr, lf = d.patch_unc[i](real), d.patch_unc[i](fake)
                terms[f"D_patch_{res}"] = d_real_fake(lr, lf)
                if i == len(self.resolutions) - 1:
                    stats["d_real_logit"] = float(lr.detach().mean())
                    stats["d_fake_logit"] = float(lf.detach().mean())
            if d.patch_ig is not None:
                u_bar = feats.u_bar
                terms[f"D_ig_{res}"] = d_conditional(
                    d.patch_ig[i](real, u_bar), d.patch_ig[i](fake, u_bar), d.patch_ig[i](real, _roll(u_bar))
                )
            if d.patch_cap is not None:
                sent = enc["sent"]
                terms[f"D_cap_{res}"] = d_conditional(
                    d.patch_cap[i](real, sent), d.patch_cap[i](fake, sent), d.patch_cap[i](real, _roll(sent))
                )
        real_top, fake_top = batch["images"][self.resolutions[-1]], fakes[-1]
        if d.obj is not None:
            boxes, o2i, labels = batch["boxes"], batch["obj_to_img"], batch["labels"]
            r_real, c_real = d.obj(real_top, boxes, o2i)
            r_fake, c_fake = d.obj(fake_top, boxes, o2i)
            terms["D_obj"] = d_real_fake(r_real, r_fake)
            terms["D_ac"] = torch.nn.functional.cross_entropy(c_real, labels)
            stats["aux_acc"] = float((c_real.argmax(1) == labels).float().mean())
        if self._phrase_d_active():
            pairs, p2i, rel = self._phrase_inputs(enc, batch, phr_idx)
            with torch.no_grad():
                hs_r, hp_r, ho_r = phrase_features(self.model.vgg, real_top, batch["boxes"], pairs, p2i)
            hs_f, hp_f, ho_f = phrase_features(self.model.vgg, fake_top, batch["boxes"], pairs, p2i)
            terms["D_phr"] = d_real_fake(d.phr_unc(hs_r, hp_r, ho_r), d.phr_unc(hs_f, hp_f, ho_f))
            terms["D_phr_con"] = d_conditional(
                d.phr_con(hs_r, rel, ho_r), d.phr_con(hs_f, rel, ho_f), d.phr_con(hs_r, _roll(rel), ho_r)
            )
        for v in terms.values():
            total = total + v
        return total, {**{k: float(v.detach()) for k, v in terms.items()}, **stats}

    def generator_losses(self, batch, enc, fakes, boxes_pred, phr_idx) -> LossBundle:
        d, m = self.disc, self.model
        feats = enc["feats"]
        gan_img, l1_img, lp_img = _zero(), _zero(), _zero()
        for i, res in enumerate(self.resolutions):
            real, fake = batch["images"][res], fakes[i]
            if d.patch_unc is not None:
                gan_img = gan_img + g_nonsaturating(d.patch_unc[i](fake))
            if d.patch_ig is not None:
                gan_img = gan_img + g_nonsaturating(d.patch_ig[i](fake, feats.u_bar))
            if d.patch_cap is not None:
                gan_img = gan_img + g_nonsaturating(d.patch_cap[i](fake, enc["sent"]))
            l1_img = l1_img + pixel_l1(real, fake)
            with torch.no_grad():
                taps_real = m.vgg(real)[1]
            lp_img = lp_img + perceptual_l1(taps_real, m.vgg(fake)[1])
        fake_top = fakes[-1]
        gan_obj = ac_obj = gan_phr = _zero()
        if d.obj is not None:
            r_fake, c_fake = d.obj(fake_top, batch["boxes"], batch["obj_to_img"])
            gan_obj = g_nonsaturating(r_fake)
            ac_obj = torch.nn.functional.cross_entropy(c_fake, batch["labels"])
        if self._phrase_d_active():
            pairs, p2i, rel = self._phrase_inputs(enc, batch, phr_idx)
            hs, hp, ho = phrase_features(m.vgg, fake_top, batch["boxes"], pairs, p2i)
            gan_phr = g_nonsaturating(d.phr_unc(hs, hp, ho)) + g_nonsaturating(d.phr_con(hs, rel, ho))
        damsm = _zero()
        if self.cfg.train.use_damsm_loss:
            f, f_bar = m.region(fake_top)
            damsm = damsm_loss(phrase_matching_batch(feats, enc["graph"].phr_to_img, f, f_bar), self.cfg.gamma)
        terms = {
            "L_GAN_img": gan_img, "L1_img": l1_img, "LP_img": lp_img, "L_GAN_obj": gan_obj,
            "L_AC_obj": ac_obj, "L_GAN_phr": gan_phr, "L_DAMSM_phr": damsm,
            "L_box": box_l1(batch["boxes"], boxes_pred, batch["obj_to_img"]),
        }
        return LossBundle(terms, tuple(self.cfg.train.lambdas))

    # ---- one step -------------------------------------------------------------

    def _set_d_grad(self, flag: bool):
        for p in self.disc.parameters():
            p.requires_grad_(flag)

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        t = self.cfg.train
        batch = self.dataset.batch(self.step, t.batch_size)
        g = step_generator(t.seed, self.step, 21)
        z = self.model.sample_noise(len(batch["cap_lens"]), g)
        self.model.generator.train()
        self.disc.train()
        with torch.no_grad():
            enc = self.model.encode(batch, z)
        phr_idx = sample_phrases(enc["graph"].phr_to_img, t.max_phrases_per_image, g)
        feats = enc["feats"]
        boxes_pred = self.model.generator.box_regressor(feats.v_o)
        _, fakes = self.model.generator(feats, enc["graph"], batch["boxes"])

        self._set_d_grad(True)
        self.opt_d.zero_grad()
        d_total, d_stats = self.discriminator_losses(batch, enc, [f.detach() for f in fakes], phr_idx)
        if not torch.isfinite(d_total):
            raise FloatingPointError(f"non-finite discriminator loss at step {self.step}: {d_stats}")
        d_total.backward()
        self.opt_d.step()

        self._set_d_grad(False)
        self.opt_g.zero_grad()
        bundle = self.generator_losses(batch, enc, fakes, boxes_pred, phr_idx)
        bundle.check_finite()
        g_total = bundle.total
        g_total.backward()
        self.opt_g.step()
        self._set_d_grad(True)

        record = {"stage": "train", "step": self.step, "G_total": g_total.item(), "D_total": d_total.item(),
                  **bundle.as_floats(), **d_stats, "seconds": time.perf_counter() - t0}
        self.step += 1
        return record

    def run(self, n_steps: int | None = None, checkpoint_path=None, metrics_path=None, callback=None) -> list:
        t = self.cfg.train
        end = t.iterations if n_steps is None else self.step + n_steps
        records = []
        while self.step < end:
            rec = self.train_step()
            records.append(rec)
            if callback is not None:
                callback(rec)
            if rec["step"] % t.log_every == 0 or self.step == end:
                _append_jsonl(metrics_path, rec)
                log.info("step %d G %.3f D %.3f", rec["step"], rec["G_total"], rec["D_total"])
            if checkpoint_path is not None and (self.step % t.checkpoint_every == 0 or self.step == end):
                self.save(checkpoint_path)
        return records

    @torch.no_grad()
    def eval_l1(self, batch: dict, z: torch.Tensor) -> float:
        """Eval-mode pixel L1 on a fixed batch, ground-truth boxes, last stage."""
        self.model.generator.eval()
        enc = self.model.encode(batch, z)
        _, images = self.model.generator(enc["feats"], enc["graph"], batch["boxes"])
        self.model.generator.train()
        return float(pixel_l1(batch["images"][self.resolutions[-1]], images[-1]))

    # ---- checkpoints -------------------------------------------------------------

    def state(self) -> dict:
        m = self.model
        return {
            "text_encoder": m.text_encoder.state_dict(),
            "graph": m.graph.state_dict(),
            "region": m.region.state_dict(),
            "generator": m.generator.state_dict(),
            "disc": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def _load_states(self, payload: dict):
        s = payload["states"]
        m = self.model
        try:
            m.text_encoder.load_state_dict(s["text_encoder"])
            m.graph.load_state_dict(s["graph"])
            m.region.load_state_dict(s["region"])
            m.generator.load_state_dict(s["generator"])
            self.disc.load_state_dict(s["disc"])
            self.opt_g.load_state_dict(s["opt_g"])
            self.opt_d.load_state_dict(s["opt_d"])
        except (KeyError, RuntimeError, ValueError) as exc:
            raise CheckpointError(f"checkpoint states do not fit this model: {exc}") from exc
        torch.set_rng_state(s["torch_rng"])
        self.step = int(payload["extra"]["step"])

    def save(self, path) -> Path:
        extra = {
            "step": self.step,
            "config": to_dict(self.cfg),
            "categories": list(self.dataset.categories),
            "vocab_tokens": list(self.vocab.itos),
            "vocab_vectors": self.vocab.embedding_table,
        }
        return Path(save_checkpoint(path, GAN_KIND, self.state(), self.vocab.hash(), config_hash(self.cfg), extra))

    @classmethod
    def resume(cls, path, dataset: SceneDataset, out_dir=None) -> "Trainer":
        payload = load_checkpoint(path, GAN_KIND, dataset.vocab.hash())
        cfg = from_dict(payload["extra"]["config"])
        return cls(cfg, dataset, out_dir=out_dir, _restore=payload)


def load_generator_checkpoint(path) -> tuple[MocGAN, Config, Vocabulary, dict]:
    """Rebuild a trained model from a training checkpoint alone."""
    payload = load_checkpoint(path, GAN_KIND)
    extra = payload["extra"]
    cfg = from_dict(extra["config"])
    vocab = Vocabulary(extra["vocab_tokens"], np.asarray(extra["vocab_vectors"]))
    if payload["vocab_hash"] and vocab.hash() != payload["vocab_hash"]:
        raise CheckpointError(f"{path}: stored vocabulary does not match its hash")
    model = MocGAN(cfg, vocab, extra["categories"])
    s = payload["states"]
    for name in ("text_encoder", "graph", "region", "generator"):
        getattr(model, name).load_state_dict(s[name])
    model.freeze_pretrained()
    model.generator.eval()
    return model, cfg, vocab, payload
