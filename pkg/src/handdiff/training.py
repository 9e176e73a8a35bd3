"""Training: noisy-pose supervision at a uniformly drawn timestep, with the
auxiliary joint-condition coordinates supervised by the same loss."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from handdiff import autodiff as ad
from handdiff import conditioning, denoiser
from handdiff import diffusion as dif
from handdiff.config import dump_config, make_config, parse_config_text
from handdiff.geometry import augment, random_augmentation
from handdiff.optim import ParamStore, adamw_step, load_checkpoint, save_checkpoint


class TrainingDivergedError(FloatingPointError):
    """Loss or gradients became non-finite; ``diagnostics`` describes the step."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class LossReport:
    total: float
    denoiser: float
    auxiliary: float
    t: np.ndarray  # timestep drawn for each sample


@dataclass
class Model:
    cfg: object
    params: ParamStore

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.params, directory / "params.ckpt")
        (directory / "config.txt").write_text(dump_config(self.cfg))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        text = (directory / "config.txt").read_text()
        values = parse_config_text(text)
        cfg = make_config(values.pop("profile", "fast"), **values)
        model = init_model(cfg, 0)
        load_checkpoint(model.params, directory / "params.ckpt")
        return model


def init_model(cfg, seed):
    rng = np.random.default_rng([seed, 0])
    params = ParamStore()
    conditioning.init_params(params, cfg, rng)
    denoiser.init_params(params, cfg, rng)
    return Model(cfg, params)


def schedule_for(cfg):
    return dif.build_schedule(cfg.schedule, cfg.T)


def compute_loss(params, cfg, samples, schedule, rng):
    """Graph for the batch loss plus its report.

    Per sample the loss is the smooth-L1 sum over all joint coordinates of the
    denoised estimate, plus ``aux_weight`` times the same on the joint-condition
    coordinates; the batch loss is the mean over samples.
    """
    B = len(samples)
    j0 = np.stack([s.joints_norm for s in samples])
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(j0.shape)
    jt = np.stack([dif.forward_noise(j0[i], int(t[i]), schedule, eps=eps[i]) for i in range(B)])
    cond = conditioning.encode(params, cfg, samples)
    pred = denoiser.denoise(params, cfg, jt[:, None], cond, t)
    target = ad.Tensor(j0[:, None])
    main = ad.scale(ad.smooth_l1(ad.sub(pred, target)), 1.0 / B)
    loss = main
    aux_value = 0.0
    if cond.joint.Jc is not None and cfg.aux_weight > 0:
        aux = ad.scale(ad.smooth_l1(ad.sub(cond.joint.Jc, ad.Tensor(j0))), 1.0 / B)
        aux_value = aux.item()
        loss = ad.add(main, ad.scale(aux, cfg.aux_weight))
    return loss, LossReport(loss.item(), main.item(), aux_value, t)


def train_step(model, samples, schedule, rng, lr):
    """One optimiser step on ``samples`` (already augmented)."""
    cfg, params = model.cfg, model.params
    params.zero_grad()
    try:
        loss, report = compute_loss(params, cfg, samples, schedule, rng)
        ad.backward(loss)
        grads = params.grads()
        bad = [n for n, g in grads.items() if g is not None and not np.isfinite(g).all()]
        if bad or not math.isfinite(report.total):
            raise FloatingPointError(f"non-finite gradient in {bad[:3]}" if bad else "non-finite loss")
    except FloatingPointError as exc:
        diag = {
            "step": params.step,
            "frames": [s.frame_id for s in samples],
            "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in params.items()},
            "error": str(exc),
        }
        raise TrainingDivergedError(f"training diverged at step {params.step}: {exc}", diag) from exc
    adamw_step(params, grads, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2,
               weight_decay=cfg.weight_decay)
    return report


def learning_rate(cfg, epoch):
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def train(samples, cfg, seed, log=None, epochs=None):
    """Train a fresh model on ``samples``; returns it and per-epoch mean losses.

    Batches are reshuffled every epoch; with augmentation on, each sample is
    re-augmented every time it is drawn.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    model = init_model(cfg, seed)
    schedule = schedule_for(cfg)
    shuffle_rng, aug_rng, noise_rng = (np.random.default_rng(s)
                                       for s in np.random.SeedSequence([seed, 1]).spawn(3))
    history = []
    n_epochs = cfg.epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        lr = learning_rate(cfg, epoch)
        order = shuffle_rng.permutation(len(samples))
        losses = []
        start = time.perf_counter()
        for i in range(0, len(order), cfg.batch):
            batch = [samples[j] for j in order[i:i + cfg.batch]]
            if cfg.augment:
                batch = [augment(s, random_augmentation(
                    aug_rng, cfg.aug_rotation, (cfg.aug_scale_lo, cfg.aug_scale_hi),
                    cfg.aug_translation)) for s in batch]
            losses.append(train_step(model, batch, schedule, noise_rng, lr).total)
        history.append(float(np.mean(losses)))
        if log:
            log(f"epoch {epoch + 1}/{n_epochs} lr {lr:.2e} loss {history[-1]:.5f} "
                f"({time.perf_counter() - start:.1f}s)")
    return model, history
