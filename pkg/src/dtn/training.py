"""Supervised pretraining of classifiers and alternating adversarial
training of the domain transfer network and its ablations."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import networks as nets
from .data import ClassOmissionFilter, DatasetSplit, apply_omission, make_batches, subsample
from .exceptions import TrainingDiverged, UsageError
from .losses import (
    LossReport,
    LossWeights,
    baseline_risks,
    is_clamped,
    loss_constancy,
    loss_discriminator,
    loss_gan_generator,
    loss_generator_total,
    loss_identity,
    loss_total_variation,
)
from .validation import to_tensor

logger = logging.getLogger(__name__)


class Ablation(str, enum.Enum):
    NO_TID = "no_tid"
    NO_CONST = "no_const"
    NO_GAN = "no_gan"
    NO_F_IN_G = "no_f_in_g"
    BASELINE = "baseline"


class Direction(str, enum.Enum):
    S_TO_T = "s_to_t"
    T_TO_S = "t_to_s"


@dataclass(frozen=True)
class TrainingConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 128
    total_steps: int = 3000
    seed: int = 0
    ablation: frozenset = frozenset()
    direction: Direction = Direction.S_TO_T
    omission: ClassOmissionFilter = field(default_factory=ClassOmissionFilter)
    desk_scale_n: int | None = None
    checkpoint_every: int = 1000
    f_widths: tuple = (64, 128, 256, 128)
    g_widths: tuple = (512, 256, 128, 64)
    d_widths: tuple = (64, 128, 256, 512)

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(Ablation(a) for a in self.ablation))
        object.__setattr__(self, "direction", Direction(self.direction))
        for name in ("f_widths", "g_widths", "d_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if {Ablation.BASELINE, Ablation.NO_F_IN_G} <= self.ablation:
            raise UsageError("BASELINE and NO_F_IN_G are mutually exclusive")
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise UsageError("Adam betas must lie in (0, 1)")
        if self.batch_size < 2:
            raise UsageError("batch_size must be >= 2 for batch normalization")
        if self.total_steps < 0:
            raise UsageError("total_steps must be >= 0")
        if self.checkpoint_every < 1:
            raise UsageError("checkpoint_every must be >= 1")

    @classmethod
    def supervised(cls, **kwargs):
        """Defaults for the digit classifiers (f and the evaluation network)."""
        base = dict(learning_rate=1e-3, adam_beta1=0.9, adam_beta2=0.999,
                    batch_size=128, total_steps=5000)
        base.update(kwargs)
        return cls(**base)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return LossWeights(
            alpha=0.0 if Ablation.NO_CONST in self.ablation else w.alpha,
            beta=0.0 if Ablation.NO_TID in self.ablation else w.beta,
            gamma=w.gamma,
            tv_exponent=w.tv_exponent,
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ablation"] = sorted(a.value for a in self.ablation)
        d["direction"] = self.direction.value
        for name in ("f_widths", "g_widths", "d_widths"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["omission"] = ClassOmissionFilter(**d["omission"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _adam(params, config):
    return torch.optim.Adam(params, lr=config.learning_rate,
                            betas=(config.adam_beta1, config.adam_beta2))


def _batch_tensor(batch):
    return to_tensor(batch.images)


# -- logging and checkpoints -------------------------------------------------

class TrainingLog:
    """Step-indexed JSON-lines loss log. Holds records in memory and appends
    to ``path`` when one is given."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path):
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def save_checkpoint(path, networks: dict, optimizers: dict | None = None, *, step=0,
                    seed=0, config_hash="", extra=None) -> Path:
    """One state blob per network plus a JSON sidecar manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"step": step, "seed": seed, "config_hash": config_hash, "networks": {},
                "optimizers": sorted(optimizers or {})}
    for name, net in networks.items():
        torch.save(net.state_dict(), path / f"{name}.pt")
        manifest["networks"][name] = {"arch": type(net).__name__, "kwargs": net.init_kwargs}
    for name, opt in (optimizers or {}).items():
        torch.save(opt.state_dict(), path / f"opt_{name}.pt")
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(networks, manifest)``; networks are rebuilt in eval mode."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(manifest_path.read_text())
    networks = {}
    for name, spec in manifest["networks"].items():
        net = nets.build(spec["arch"], spec["kwargs"])
        net.load_state_dict(torch.load(path / f"{name}.pt", weights_only=True))
        net.eval()
        networks[name] = net
    return networks, manifest


def _link_latest(run_dir, step_dir):
    latest = Path(run_dir) / "latest"
    tmp = Path(run_dir) / ".latest.tmp"
    tmp.unlink(missing_ok=True)
    os.symlink(Path(step_dir).name, tmp)
    os.replace(tmp, latest)


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint dir, a run dir (uses ``latest``), or a run's step dir."""
    path = Path(path)
    if (path / "latest").exists():
        return (path / "latest").resolve()
    if any(path.glob("*.pt")) and (path / "manifest.json").exists():
        return path
    raise FileNotFoundError(f"no checkpoint found under {path}")


class Checkpointer:
    def __init__(self, run_dir, config: TrainingConfig):
        self.run_dir = Path(run_dir) if run_dir else None
        self.config = config
        self.last = None

    def maybe_save(self, step, networks, optimizers, force=False):
        if self.run_dir is None or not (force or step % self.config.checkpoint_every == 0):
            return
        step_dir = self.run_dir / f"step_{step:08d}"
        if step_dir == self.last:
            return
        save_checkpoint(step_dir, networks, optimizers, step=step, seed=self.config.seed,
                        config_hash=self.config.config_hash(),
                        extra={"config": self.config.to_dict()})
        _link_latest(self.run_dir, step_dir)
        self.last = step_dir


# -- supervised classifiers --------------------------------------------------

def train_classifier(split: DatasetSplit, config: TrainingConfig, *, run_dir=None,
                     name="f") -> tuple[nets.FeatureNetwork, list]:
    """Cross-entropy training of a digit classifier with f's architecture.

    Grayscale splits are channel-replicated. Returns the network (eval mode)
    and the per-step loss records.
    """
    if not split.is_labeled:
        raise UsageError(f"cannot train a classifier on unlabeled split {split.name!r}")
    seed_everything(config.seed)
    net = nets.FeatureNetwork(config.f_widths)
    optimizer = _adam(net.parameters(), config)
    log = TrainingLog(Path(run_dir) / "train_log.jsonl" if run_dir else None)
    ckpt = Checkpointer(run_dir, config)
    batches = make_batches(split, config.batch_size, config.seed, epochs=None,
                           drop_last=len(split) >= config.batch_size)
    net.train()
    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        batch = next(batches)
        x = nets.replicate(_batch_tensor(batch))
        y = torch.from_numpy(batch.labels)
        loss = F.cross_entropy(net(x), y)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, ckpt.last)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        log.append({"step": step, "loss": loss.item(), "lr": config.learning_rate,
                    "wall_ms": round((time.perf_counter() - t0) * 1000, 3)})
        ckpt.maybe_save(step, {name: net}, {name: optimizer})
    net.eval()
    ckpt.maybe_save(config.total_steps, {name: net}, {name: optimizer}, force=True)
    return net, log.records


def train_f(svhn_extra: DatasetSplit, config: TrainingConfig, *, run_dir=None):
    """Pretrain f on (a seeded subset of) SVHN, honoring ``omit_from_f_training``."""
    split = subsample(svhn_extra, config.desk_scale_n, config.seed)
    split = apply_omission(split, config.omission.omit_from_f_training)
    return train_classifier(split, config, run_dir=run_dir, name="f")


def train_eval_classifier(mnist_train: DatasetSplit, config: TrainingConfig, *, run_dir=None):
    split = subsample(mnist_train, config.desk_scale_n, config.seed)
    return train_classifier(split, config, run_dir=run_dir, name="classifier")


# -- domain transfer ---------------------------------------------------------

class TransferModel:
    """A trained transfer function G with its parts.

    ``f`` is the frozen feature network. ``g`` is the generator head; with
    ``encoder`` set, G = g o encoder instead of g o f. With ``baseline`` set,
    G is the baseline generator acting on pixels.
    """

    def __init__(self, f, g=None, D=None, encoder=None, baseline=None, config=None, log=None):
        self.f = f
        self.g = g
        self.D = D
        self.encoder = encoder
        self.baseline = baseline
        self.config = config
        self.log = log or []

    def networks(self):
        named = {"f": self.f, "g": self.g, "D": self.D, "encoder": self.encoder,
                 "baseline": self.baseline}
        return {k: v for k, v in named.items() if v is not None}

    def eval(self):
        for net in self.networks().values():
            net.eval()
        return self

    def train(self):
        for name, net in self.networks().items():
            if name != "f":
                net.train()
        self.f.eval()
        return self

    def forward(self, x):
        """Differentiable G(x) in the current mode."""
        x = nets.replicate(x)
        if self.baseline is not None:
            return self.baseline(x)
        encoder = self.encoder if self.encoder is not None else self.f
        return nets.generate(self.g, encoder.features(x))

    @torch.no_grad()
    def __call__(self, x):
        """Inference-mode G(x)."""
        modes = {n: m.training for n, m in self.networks().items()}
        self.eval()
        try:
            return self.forward(x)
        finally:
            for name, net in self.networks().items():
                net.train(modes[name])

    def save(self, path, *, step=0, optimizers=None):
        extra = {"config": self.config.to_dict()} if self.config else None
        cfg_hash = self.config.config_hash() if self.config else ""
        seed = self.config.seed if self.config else 0
        return save_checkpoint(path, self.networks(), optimizers, step=step, seed=seed,
                               config_hash=cfg_hash, extra=extra)

    @classmethod
    def load(cls, path):
        networks, manifest = load_checkpoint(resolve_checkpoint(path))
        config = TrainingConfig.from_dict(manifest["config"]) if "config" in manifest else None
        return cls(config=config, **networks)


def _source_target(s, t, config):
    s = subsample(s, config.desk_scale_n, config.seed)
    s = apply_omission(s, config.omission.omit_from_s)
    t = apply_omission(t, config.omission.omit_from_t)
    return s, t


def _freeze(f):
    f.eval()
    for p in f.parameters():
        p.requires_grad_(False)
    return f


def _streams(s, t, config):
    def stream(split, seed):
        return make_batches(split, config.batch_size, seed, epochs=None,
                            drop_last=len(split) >= config.batch_size)
    return stream(s, config.seed), stream(t, config.seed + 1)


def _no_hook(stage, step, model):
    pass


def _record(report, config, t0):
    rec = report.as_record()
    rec["lr"] = config.learning_rate
    rec["wall_ms"] = round((time.perf_counter() - t0) * 1000, 3)
    return rec


def train_dtn(s: DatasetSplit, t: DatasetSplit, f: nets.FeatureNetwork, config: TrainingConfig,
              *, run_dir=None, hook=None) -> TransferModel:
    """Alternating optimization: one discriminator step on the ternary loss,
    then one generator step on the compound generator loss, per iteration.

    ``f`` is never updated. ``s`` and ``t`` are used without labels except
    where the config's omission filter needs them. ``hook(stage, step, model)``
    is called with stage ``"begin"``, ``"after_d"`` and ``"after_g"``.
    """
    if Ablation.BASELINE in config.ablation:
        return train_baseline(s, t, f, config, run_dir=run_dir, hook=hook)
    s, t = _source_target(s, t, config)
    seed_everything(config.seed)
    f = _freeze(f)
    g = nets.GeneratorHead(f.representation_dim, t.channels, config.g_widths)
    D = nets.Discriminator(t.channels, 3, config.d_widths)
    encoder = None
    if Ablation.NO_F_IN_G in config.ablation:
        encoder = nets.init_dcgan(nets.FeatureNetwork(config.f_widths, num_classes=None))
    model = TransferModel(f, g, D, encoder, config=config)
    g_params = list(g.parameters()) + (list(encoder.parameters()) if encoder else [])
    opt_g, opt_d = _adam(g_params, config), _adam(D.parameters(), config)
    w = config.effective_weights()
    no_gan = Ablation.NO_GAN in config.ablation
    use_const = Ablation.NO_CONST not in config.ablation
    use_tid = Ablation.NO_TID not in config.ablation
    log = TrainingLog(Path(run_dir) / "train_log.jsonl" if run_dir else None)
    model.log = log.records
    ckpt = Checkpointer(run_dir, config)
    s_stream, t_stream = _streams(s, t, config)
    zero = torch.zeros(())
    hook = hook or _no_hook
    model.train()
    for step in range(1, config.total_steps + 1):
        hook("begin", step, model)
        t0 = time.perf_counter()
        xs, xt = _batch_tensor(next(s_stream)), _batch_tensor(next(t_stream))
        with torch.no_grad():
            f_xs = f.features(nets.replicate(xs))
        Gs, Gt = model.forward(xs), model.forward(xt)
        report = LossReport(step)

        if not no_gan:
            p_gs = torch.softmax(D(Gs.detach()), 1)
            p_gt = torch.softmax(D(Gt.detach()), 1)
            p_t = torch.softmax(D(xt), 1)
            l_d = loss_discriminator(p_gs, p_gt, p_t)
            opt_d.zero_grad(set_to_none=True)
            l_d.backward()
            opt_d.step()
            report.l_d = l_d.item()
            report.clamped |= is_clamped(p_gs, p_gt, p_t)
        hook("after_d", step, model)
        if not no_gan:
            p_gs, p_gt = torch.softmax(D(Gs), 1), torch.softmax(D(Gt), 1)
            l_gang = loss_gan_generator(p_gs, p_gt)
            report.clamped |= is_clamped(p_gs, p_gt)
        else:
            l_gang = zero
        l_const = loss_constancy(f_xs, f.features(nets.replicate(Gs))) if use_const else zero
        l_tid = loss_identity(xt, Gt) if use_tid else zero
        l_tv = loss_total_variation(torch.cat([Gs, Gt]), w.tv_exponent)
        l_g = loss_generator_total(l_gang, l_const, l_tid, l_tv, w)
        report.l_gang, report.l_const = l_gang.item(), l_const.item()
        report.l_tid, report.l_tv, report.l_g_total = l_tid.item(), l_tv.item(), l_g.item()
        if not math.isfinite(report.l_g_total):
            raise TrainingDiverged(step, ckpt.last)
        if l_g.requires_grad:
            # D must not accumulate generator-step gradients.
            opt_g.zero_grad(set_to_none=True)
            l_g.backward()
            opt_g.step()
            D.zero_grad(set_to_none=True)
        log.append(_record(report, config, t0))
        ckpt.maybe_save(step, model.networks(), {"g": opt_g, "D": opt_d})
        hook("after_g", step, model)
    model.eval()
    ckpt.maybe_save(config.total_steps, model.networks(), {"g": opt_g, "D": opt_d}, force=True)
    return model


def train_baseline(s: DatasetSplit, t: DatasetSplit, f: nets.FeatureNetwork, config: TrainingConfig,
                   *, run_dir=None, hook=None) -> TransferModel:
    """Binary GAN plus alpha-weighted constancy, with a generator that sees
    source pixels directly and never contains f."""
    s, t = _source_target(s, t, config)
    seed_everything(config.seed)
    f = _freeze(f)
    B = nets.BaselineGenerator(t.channels, 3, config.f_widths, config.g_widths)
    D = nets.Discriminator(t.channels, 2, config.d_widths)
    model = TransferModel(f, D=D, baseline=B, config=config)
    opt_g, opt_d = _adam(B.parameters(), config), _adam(D.parameters(), config)
    alpha = config.effective_weights().alpha
    log = TrainingLog(Path(run_dir) / "train_log.jsonl" if run_dir else None)
    model.log = log.records
    ckpt = Checkpointer(run_dir, config)
    s_stream, t_stream = _streams(s, t, config)
    hook = hook or _no_hook
    model.train()
    for step in range(1, config.total_steps + 1):
        hook("begin", step, model)
        t0 = time.perf_counter()
        xs, xt = _batch_tensor(next(s_stream)), _batch_tensor(next(t_stream))
        with torch.no_grad():
            f_xs = f.features(nets.replicate(xs))
        Gs = model.forward(xs)
        report = LossReport(step)

        p_fake, p_real = torch.softmax(D(Gs.detach()), 1), torch.softmax(D(xt), 1)
        r_d, _, _, _ = baseline_risks(p_fake, p_real, f_xs, f_xs, alpha)
        opt_d.zero_grad(set_to_none=True)
        r_d.backward()
        opt_d.step()
        report.clamped |= is_clamped(p_fake, p_real)
        hook("after_d", step, model)

        p_fake = torch.softmax(D(Gs), 1)
        _, r_g, r_const, total = baseline_risks(
            p_fake, p_real.detach(), f_xs, f.features(nets.replicate(Gs)), alpha
        )
        report.l_d, report.l_gang, report.l_const = r_d.item(), r_g.item(), r_const.item()
        report.l_g_total = total.item()
        if not math.isfinite(report.l_g_total):
            raise TrainingDiverged(step, ckpt.last)
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        D.zero_grad(set_to_none=True)
        log.append(_record(report, config, t0))
        ckpt.maybe_save(step, model.networks(), {"g": opt_g, "D": opt_d})
        hook("after_g", step, model)
    model.eval()
    ckpt.maybe_save(config.total_steps, model.networks(), {"g": opt_g, "D": opt_d}, force=True)
    return model
