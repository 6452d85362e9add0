"""Optimizers, learning-rate schedule and the basic / adversarial trainers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable

import torch
from torch import nn

from .data import PairSet
from .errors import EmptyDatasetError, NonFiniteLossError, ShapeMismatchError
from .metrics import LossWeights, SsimConfig, loss_terms
from .networks import Decoder, Encoder, Steganalyzer, embed, ycbcr_to_rgb_tensor

log = logging.getLogger(__name__)

COVER_LABEL, STEGO_LABEL = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_initial: float = 1e-4
    lr_decay_start_epoch: int = 20
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 10
    loss_weights: LossWeights = LossWeights()
    loss_kind: str = "mixed"          # "mixed" or "mse" (ablation baseline)
    adv_weight: float = 0.1
    steg_lr: float = 1e-3
    steg_momentum: float = 0.9
    weight_decay: float = 1e-4        # steganalyzer only
    label_flip: bool = True
    seed: int = 0
    ssim: SsimConfig = SsimConfig()

    def __post_init__(self):
        if self.lr_initial <= 0 or self.steg_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.adv_weight < 0:
            raise ValueError("adv_weight must be >= 0")
        if self.loss_kind not in ("mixed", "mse"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ssim"]["msssim_scale_weights"] = list(d["ssim"]["msssim_scale_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss_weights"] = LossWeights(**d.get("loss_weights", {}))
        ssim = dict(d.get("ssim", {}))
        if "msssim_scale_weights" in ssim:
            ssim["msssim_scale_weights"] = tuple(ssim["msssim_scale_weights"])
        d["ssim"] = SsimConfig(**ssim)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant until ``lr_decay_start_epoch``, then multiplied by ``lr_decay_factor``
    every ``lr_decay_every`` epochs (the first cut lands on the start epoch)."""
    if epoch < cfg.lr_decay_start_epoch:
        return cfg.lr_initial
    cuts = 1 + (epoch - cfg.lr_decay_start_epoch) // cfg.lr_decay_every
    return cfg.lr_initial * cfg.lr_decay_factor ** cuts


class Optimizer:
    """Shared bookkeeping: named parameters, per-parameter buffers, L2 weight decay."""

    kind = "base"
    buffer_names: tuple[str, ...] = ()

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self.buffers: dict[str, dict[str, torch.Tensor]] = {b: {} for b in self.buffer_names}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _grad(self, name, p, grads):
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            return None
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient {tuple(g.shape)} for parameter {tuple(p.shape)}")
        return g + self.weight_decay * p if self.weight_decay else g

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay}

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "step": self.step_count,
            "hyper": self.hyperparameters(),
            "tensors": {f"{b}/{n}": t for b, d in self.buffers.items() for n, t in d.items()},
        }

    def load_state_dict(self, state: dict):
        if state["kind"] != self.kind:
            raise ValueError(f"optimizer kind {state['kind']!r} does not match {self.kind!r}")
        self.step_count = int(state["step"])
        self.buffers = {b: {} for b in self.buffer_names}
        for key, t in state["tensors"].items():
            buf, name = key.split("/", 1)
            if name not in self.params:
                raise KeyError(f"optimizer state for unknown parameter {name!r}")
            p = self.params[name]
            if tuple(t.shape) != tuple(p.shape):
                raise ShapeMismatchError(f"{key}: buffer {tuple(t.shape)} vs parameter {tuple(p.shape)}")
            self.buffers[buf][name] = torch.as_tensor(t).to(p.dtype).clone()


class Adam(Optimizer):
    kind = "adam"
    buffer_names = ("m", "v")

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.betas, self.eps = tuple(betas), eps

    def hyperparameters(self):
        return {**super().hyperparameters(), "betas": list(self.betas), "eps": self.eps}

    @torch.no_grad()
    def step(self, lr: float | None = None, grads: dict[str, torch.Tensor] | None = None):
        """One update from ``.grad`` (or from ``grads`` keyed by parameter name)."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bias1, bias2 = 1 - b1 ** t, 1 - b2 ** t
        for name, p in self.params.items():
            g = self._grad(name, p, grads)
            if g is None:
                continue
            m = self.buffers["m"].setdefault(name, torch.zeros_like(p))
            v = self.buffers["v"].setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v.sqrt() / math.sqrt(bias2)).add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bias1)


class SGD(Optimizer):
    kind = "sgd"
    buffer_names = ("momentum",)

    def __init__(self, params, lr=1e-3, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum

    def hyperparameters(self):
        return {**super().hyperparameters(), "momentum": self.momentum}

    @torch.no_grad()
    def step(self, lr: float | None = None, grads: dict[str, torch.Tensor] | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        for name, p in self.params.items():
            g = self._grad(name, p, grads)
            if g is None:
                continue
            buf = self.buffers["momentum"].get(name)
            if buf is None:
                buf = self.buffers["momentum"][name] = g.clone()
            elif self.momentum:
                buf.mul_(self.momentum).add_(g)
            else:
                buf.copy_(g)
            p.add_(buf, alpha=-lr)


def named_parameters(**nets: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{n}": p for prefix, net in nets.items() for n, p in net.named_parameters()}


@dataclass
class TrainResult:
    encoder: Encoder
    decoder: Decoder
    steganalyzer: Steganalyzer | None
    optimizers: dict[str, Optimizer]
    history: list[dict] = field(default_factory=list)
    epoch: int = 0

    def networks(self) -> dict[str, nn.Module]:
        nets = {"encoder": self.encoder, "decoder": self.decoder}
        if self.steganalyzer is not None:
            nets["steganalyzer"] = self.steganalyzer
        return nets


HISTORY_FIELDS = ("epoch", "lr", "loss", "cover_loss", "secret_loss", "adv_loss",
                  "stego_cover_ssim", "stego_cover_psnr", "revealed_secret_ssim",
                  "revealed_secret_psnr", "steganalyzer_loss", "steganalyzer_accuracy")


def _psnr_from_mse(err: float) -> float:
    return math.inf if err == 0 else 10 * math.log10(1.0 / err)


class _EpochStats:
    def __init__(self):
        self.n = 0
        self.sums: dict[str, float] = {}

    def add(self, count: int, **values):
        self.n += count
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v) * count

    def mean(self, key):
        return self.sums[key] / self.n if key in self.sums else math.nan


def _check_finite(loss: torch.Tensor, epoch: int, batch: int, terms: dict):
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss at epoch {epoch}, batch {batch}: "
            + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items()),
            epoch=epoch, batch=batch, terms={k: float(v.detach()) for k, v in terms.items()})


def _train(data: PairSet, encoder: Encoder, decoder: Decoder, steganalyzer: Steganalyzer | None,
           cfg: TrainConfig, resume: TrainResult | None,
           on_epoch: Callable[[dict], None] | None) -> TrainResult:
    if data is None or len(data) == 0:
        raise EmptyDatasetError("training needs at least one cover/secret pair")
    adversarial = steganalyzer is not None
    data = replace(data, seed=cfg.seed)
    ssim_cfg = cfg.ssim.fitted(*data.size)
    w = cfg.loss_weights

    if resume is not None:
        optimizers, start, history = resume.optimizers, resume.epoch, list(resume.history)
    else:
        optimizers = {"generator": Adam(named_parameters(encoder=encoder, decoder=decoder), cfg.lr_initial)}
        if adversarial:
            optimizers["steganalyzer"] = SGD(named_parameters(steganalyzer=steganalyzer), cfg.steg_lr,
                                             cfg.steg_momentum, cfg.weight_decay)
        start, history = 0, []
    gen_opt = optimizers["generator"]
    steg_opt = optimizers.get("steganalyzer")
    ce = nn.CrossEntropyLoss()

    for epoch in range(start, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        encoder.train()
        decoder.train()
        if adversarial:
            steganalyzer.train()
        stats = _EpochStats()
        for b, (covers, secrets) in enumerate(data.batches(cfg.batch_size, epoch)):
            n = covers.shape[0]
            cover_ycc, stego_ycc = embed(encoder, covers, secrets)
            stego_y = stego_ycc[:, :1]
            revealed = decoder(stego_y)
            terms = loss_terms(cover_ycc[:, :1], stego_y, secrets, revealed, w, ssim_cfg, cfg.loss_kind)
            loss = terms.total
            extra = {}
            if adversarial:
                stego_rgb = ycbcr_to_rgb_tensor(stego_ycc)
                labels = torch.cat([torch.full((n,), COVER_LABEL), torch.full((n,), STEGO_LABEL)])
                logits = steganalyzer(torch.cat([covers, stego_rgb.detach()]))
                d_loss = ce(logits, labels)
                _check_finite(d_loss, epoch, b, {"steganalyzer": d_loss})
                steg_opt.zero_grad()
                d_loss.backward()
                steg_opt.step(cfg.steg_lr)
                acc = (logits.argmax(1) == labels).double().mean()
                extra = {"steganalyzer_loss": d_loss.detach(), "steganalyzer_accuracy": acc}
                if cfg.adv_weight > 0:
                    adv_logits = steganalyzer(stego_rgb)
                    if cfg.label_flip:
                        adv = ce(adv_logits, torch.full((n,), COVER_LABEL))
                    else:
                        adv = -ce(adv_logits, torch.full((n,), STEGO_LABEL))
                    loss = loss + cfg.adv_weight * adv
                    extra["adv_loss"] = adv.detach()
            _check_finite(loss, epoch, b, {"loss": loss, "cover": terms.cover, "secret": terms.secret})
            gen_opt.zero_grad()
            loss.backward()
            gen_opt.step(lr)
            stats.add(n, loss=loss.detach(), cover_loss=terms.cover.detach(),
                      secret_loss=terms.secret.detach(), stego_cover_ssim=terms.cover_ssim,
                      revealed_secret_ssim=terms.secret_ssim, cover_mse=terms.cover_mse,
                      secret_mse=terms.secret_mse, **extra)
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "loss": stats.mean("loss"),
            "cover_loss": stats.mean("cover_loss"),
            "secret_loss": stats.mean("secret_loss"),
            "adv_loss": stats.mean("adv_loss"),
            "stego_cover_ssim": stats.mean("stego_cover_ssim"),
            "stego_cover_psnr": _psnr_from_mse(stats.mean("cover_mse")),
            "revealed_secret_ssim": stats.mean("revealed_secret_ssim"),
            "revealed_secret_psnr": _psnr_from_mse(stats.mean("secret_mse")),
            "steganalyzer_loss": stats.mean("steganalyzer_loss"),
            "steganalyzer_accuracy": stats.mean("steganalyzer_accuracy"),
        }
        history.append(row)
        log.info("epoch %d lr %.3g loss %.5f stego-ssim %.4f reveal-ssim %.4f", row["epoch"], lr,
                 row["loss"], row["stego_cover_ssim"], row["revealed_secret_ssim"])
        if on_epoch is not None:
            on_epoch(row)

    return TrainResult(encoder, decoder, steganalyzer, optimizers, history, cfg.epochs)


def train_basic(data: PairSet, encoder: Encoder, decoder: Decoder, cfg: TrainConfig,
                resume: TrainResult | None = None, on_epoch=None) -> TrainResult:
    """Encoder/decoder training on the mixed cover + secret loss with Adam.

    The cover term depends on the encoder only; the decoder is driven by the
    secret term alone.  ``resume`` continues from a previous result (or restored
    checkpoint) at its recorded epoch, up to ``cfg.epochs``.
    """
    return _train(data, encoder, decoder, None, cfg, resume, on_epoch)


def train_isgan(data: PairSet, encoder: Encoder, decoder: Decoder, steganalyzer: Steganalyzer,
                cfg: TrainConfig, resume: TrainResult | None = None, on_epoch=None) -> TrainResult:
    """Adversarial training: per batch one SGD step of the steganalyzer on
    covers (label 0) vs. detached stegos (label 1), then one Adam step of the
    encoder/decoder on the mixed loss plus ``adv_weight`` times the adversarial
    term.  With ``label_flip`` the adversarial term is the cross-entropy of the
    stegos against the cover label; otherwise it is the negated cross-entropy
    against the stego label.
    """
    return _train(data, encoder, decoder, steganalyzer, cfg, resume, on_epoch)


def write_history_csv(history: Iterable[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(row[k]) if isinstance(row.get(k), float) else row.get(k, ""))
                             for k in HISTORY_FIELDS})
