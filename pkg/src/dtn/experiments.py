"""Run directories, manifests and the experiment suites behind the CLI."""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from . import data as datamod
from .config import ExperimentConfig
from .data import Domain, replicate_channels, subsample
from .evaluation import (
    apply_transfer,
    basis_visualization,
    domain_adapt_nn,
    mode_diversity_score,
    pair_grid,
    save_png,
    transferred_accuracy,
)
from .exceptions import EmptyClassError, UsageError
from .networks import FeatureNetwork
from .training import (
    Ablation,
    Direction,
    TransferModel,
    load_checkpoint,
    resolve_checkpoint,
    train_dtn,
    train_eval_classifier,
    train_f,
)
from .validation import to_numpy, to_tensor

logger = logging.getLogger(__name__)

EVAL_SUITES = ("accuracy", "per-class", "adapt-nn", "unseen", "basis", "reverse")

# (row label, slug, ablation flags); None marks the raw-image control.
ABLATION_ROWS = (
    ("Baseline method", "baseline", {Ablation.BASELINE}),
    ("DTN", "dtn", set()),
    ("DTN w/o L_TID", "no_tid", {Ablation.NO_TID}),
    ("DTN w/o L_CONST", "no_const", {Ablation.NO_CONST}),
    ("DTN G does not contain f", "no_f_in_g", {Ablation.NO_F_IN_G}),
    ("DTN w/o L_D and L_GANG", "no_gan", {Ablation.NO_GAN}),
    ("DTN w/o L_CONST & L_TID", "no_const_tid", {Ablation.NO_CONST, Ablation.NO_TID}),
    ("Original SVHN image", "raw", None),
)

UNSEEN_VARIANTS = (
    ("DTN", "dtn", dict()),
    ("not shown in s", "omit_s", dict(omit_from_s=True)),
    ("not shown in t", "omit_t", dict(omit_from_t=True)),
    ("not shown in s or t", "omit_st", dict(omit_from_s=True, omit_from_t=True)),
    ("not shown in s, t, or f training", "omit_stf",
     dict(omit_from_s=True, omit_from_t=True, omit_from_f_training=True)),
)


def build_version():
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            version += "+" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return version


@dataclass
class ExperimentManifest:
    run_id: str
    config: dict
    config_hash: str
    git_or_build_version: str
    metrics: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    def write(self, run_dir):
        run_dir = Path(run_dir)
        for p in self.metrics + self.artifacts:
            if not (run_dir / p).exists():
                raise FileNotFoundError(f"manifest references missing path {p}")
        (run_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def read(cls, run_dir):
        return cls(**json.loads((Path(run_dir) / "manifest.json").read_text()))

    def add(self, run_dir, metrics=(), artifacts=()):
        run_dir = Path(run_dir)
        for kind, paths in (("metrics", metrics), ("artifacts", artifacts)):
            listing = getattr(self, kind)
            for p in paths:
                rel = str(Path(p).resolve().relative_to(run_dir.resolve()))
                if rel not in listing:
                    listing.append(rel)


def new_run_dir(out, cfg: ExperimentConfig) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run_dir = Path(out) / f"{stamp}-{cfg.hash()[:8]}"
    run_dir.mkdir(parents=True)
    return run_dir


def _start_run(out, cfg):
    run_dir = new_run_dir(out, cfg)
    cfg.save(run_dir / "config.cfg")
    snapshot = dict(line.split(" = ", 1) for line in cfg.serialize().splitlines())
    manifest = ExperimentManifest(run_dir.name, snapshot, cfg.hash(), build_version())
    manifest.artifacts.append("config.cfg")
    return run_dir, manifest


def load_run_config(run_dir) -> ExperimentConfig:
    path = Path(run_dir) / "config.cfg"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no config.cfg)")
    return ExperimentConfig.load(path)


# -- data and pretrained networks -------------------------------------------

def source_target(cfg, cache_dir):
    """The (s, t) training pair, with roles swapped for the reverse direction."""
    s = datamod.fetch(cfg["data.source_dataset"], cfg["data.source_split"], cache_dir)
    t = datamod.fetch(cfg["data.target_dataset"], cfg["data.target_split"], cache_dir)
    if cfg.training_config().direction is Direction.T_TO_S:
        s, t = t.with_domain(Domain.SOURCE), s.with_domain(Domain.TARGET)
    return s, t


def eval_split(cfg, cache_dir, dataset=None):
    split = datamod.fetch(dataset or cfg["data.source_dataset"], cfg["data.eval_split"], cache_dir)
    return subsample(split, cfg["data.eval_n"], cfg["train.seed"])


def _load_network(path, name):
    networks, _ = load_checkpoint(resolve_checkpoint(path))
    if name not in networks:
        raise FileNotFoundError(f"checkpoint {path} holds no {name!r} network")
    return networks[name]


def obtain_f(cfg, cache_dir, workdir, omit_digit=None) -> FeatureNetwork:
    """Load f from ``model.f_checkpoint`` or pretrain it under ``workdir``."""
    if cfg["model.f_checkpoint"] and omit_digit is None:
        return _load_network(cfg["model.f_checkpoint"], "f")
    pre = cfg.pretrain_config()
    if omit_digit is not None:
        pre = pre.replace(omission=datamod.ClassOmissionFilter(omit_from_f_training=omit_digit))
    svhn = datamod.fetch("svhn", cfg["data.source_split"] if cfg["data.source_dataset"] == "svhn"
                         else "extra", cache_dir)
    net, _ = train_f(svhn, pre, run_dir=workdir)
    return net


def obtain_classifier(cfg, cache_dir, workdir=None, train_if_missing=True) -> FeatureNetwork:
    """Load the MNIST evaluation classifier, or train it under ``workdir``."""
    if cfg["model.classifier_checkpoint"]:
        return _load_network(cfg["model.classifier_checkpoint"], "classifier")
    if not train_if_missing:
        raise FileNotFoundError(
            "no evaluation classifier: pass --classifier or set model.classifier_checkpoint"
        )
    mnist = datamod.fetch("mnist", cfg["data.classifier_split"], cache_dir)
    net, _ = train_eval_classifier(mnist, cfg.classifier_config(), run_dir=workdir)
    return net


def _identity(x):
    return x


# -- commands ---------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out, cache_dir, echo=print) -> Path:
    """Train whatever ``run.task`` names and return the new run directory."""
    run_dir, manifest = _start_run(out, cfg)
    with FileLock(str(run_dir / ".lock")):
        task = cfg["run.task"]
        metrics = []
        if task == "f":
            svhn = datamod.fetch("svhn", cfg["data.source_split"], cache_dir)
            net, _ = train_f(svhn, cfg.pretrain_config(), run_dir=run_dir)
            for dataset in ("svhn", "mnist"):
                split = eval_split(cfg, cache_dir, dataset)
                report = transferred_accuracy(_identity, net, split, name=f"f-{dataset}-test",
                                              run_config_hash=cfg.hash())
                metrics.append(report.save(run_dir / "metrics" / f"f_{dataset}_test.json"))
                echo(f"{report.name}\t{report.accuracy:.4f}")
        elif task == "eval_classifier":
            mnist = datamod.fetch("mnist", cfg["data.classifier_split"], cache_dir)
            net, _ = train_eval_classifier(mnist, cfg.classifier_config(), run_dir=run_dir)
            split = eval_split(cfg, cache_dir, "mnist")
            report = transferred_accuracy(_identity, net, split, name="classifier-mnist-test",
                                          run_config_hash=cfg.hash())
            metrics.append(report.save(run_dir / "metrics" / "classifier_mnist_test.json"))
            echo(f"{report.name}\t{report.accuracy:.4f}")
        else:
            f = obtain_f(cfg, cache_dir, run_dir / "f")
            s, t = source_target(cfg, cache_dir)
            train_dtn(s, t, f, cfg.training_config(), run_dir=run_dir)
        manifest.add(run_dir, metrics=metrics, artifacts=[run_dir / "train_log.jsonl"])
        manifest.write(run_dir)
    echo(f"run\t{run_dir}")
    return run_dir


def _transfer_split(model, split, batch_size=512):
    out = []
    for start in range(0, len(split), batch_size):
        x = to_tensor(split.images(np.arange(start, min(start + batch_size, len(split)))))
        out.append(to_numpy(apply_transfer(model, x, batch_size)))
    return np.concatenate(out)


def evaluate(run_dir, suite, cache_dir, *, classifier=None, digit=None, echo=print) -> list[Path]:
    """Run one evaluation suite on a trained transfer run; returns written files."""
    if suite not in EVAL_SUITES:
        raise UsageError(f"unknown suite {suite!r}; valid suites: {', '.join(EVAL_SUITES)}")
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    if classifier:
        cfg = cfg.with_overrides(**{"model.classifier_checkpoint": str(classifier)})
    model = TransferModel.load(run_dir)
    manifest = ExperimentManifest.read(run_dir)
    reverse = model.config is not None and model.config.direction is Direction.T_TO_S
    metrics_dir, art_dir = run_dir / "metrics", run_dir / "artifacts"
    written, artifacts = [], []
    h = cfg.hash()

    if suite == "basis":
        g = model.g if model.g is not None else model.baseline.head
        tiles, grid = basis_visualization(g, g.in_dim, art_dir / "basis.png")
        score = mode_diversity_score(tiles)
        path = metrics_dir / "basis.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"tiles": len(tiles), "mode_diversity": score}, indent=2) + "\n")
        written.append(path)
        artifacts.append(art_dir / "basis.png")
        echo(f"basis\ttiles={len(tiles)}\tmode_diversity={score:.6f}")
    elif suite == "reverse":
        if not reverse:
            raise UsageError("the reverse suite needs a run trained with train.direction = t_to_s")
        mnist = datamod.fetch(cfg["data.target_dataset"], cfg["data.target_split"], cache_dir)
        mnist = subsample(mnist, cfg["data.eval_n"], cfg["train.seed"])
        report = transferred_accuracy(model, model.f, mnist, name="reverse", run_config_hash=h)
        written.append(report.save(metrics_dir / "reverse.json"))
        echo(f"reverse\t{report.accuracy:.4f}")
    else:
        if reverse:
            raise UsageError(f"suite {suite!r} needs a source-to-target run")
        clf = obtain_classifier(cfg, cache_dir, train_if_missing=False)
        if suite == "adapt-nn":
            s_split = subsample(datamod.fetch(cfg["data.source_dataset"], cfg["data.source_split"],
                                              cache_dir), cfg["data.desk_scale_n"], cfg["train.seed"])
            queries = eval_split(cfg, cache_dir, cfg["data.target_dataset"])
            gallery = _transfer_split(model, s_split)
            report = domain_adapt_nn(gallery, s_split.labels, queries, name="adapt-nn",
                                     run_config_hash=h)
            raw = domain_adapt_nn(s_split.images(), s_split.labels, replicate_channels(queries),
                                  name="adapt-nn-raw-pixels", run_config_hash=h)
            written.append(report.save(metrics_dir / "adapt_nn.json"))
            written.append(raw.save(metrics_dir / "adapt_nn_raw.json"))
            echo(f"adapt-nn\t{report.accuracy:.4f}")
            echo(f"adapt-nn-raw-pixels\t{raw.accuracy:.4f}")
        else:
            split = eval_split(cfg, cache_dir)
            report = transferred_accuracy(model, clf, split, name=suite, run_config_hash=h)
            if suite == "accuracy":
                written.append(report.save(metrics_dir / "accuracy.json"))
                x = to_tensor(split.images(np.arange(min(8, len(split)))))
                artifacts.append(save_png(pair_grid(x, model(x)), art_dir / "transfer_grid.png"))
                echo(f"accuracy\t{report.accuracy:.4f}")
            elif suite == "per-class":
                written.append(report.save(metrics_dir / "per_class.json"))
                for d, acc in sorted(report.per_class_accuracy.items()):
                    echo(f"class {d}\t{acc:.4f}")
            else:
                omitted = [cfg[k] for k in ("data.omit_from_s", "data.omit_from_t",
                                            "data.omit_from_f_training") if cfg[k] is not None]
                d = digit if digit is not None else (omitted[0] if omitted else 3)
                acc = report.per_class_accuracy.get(d)
                if acc is None:
                    raise UsageError(f"no evaluation samples labeled {d}")
                path = metrics_dir / "unseen.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps({"digit": d, "accuracy": acc,
                                            "report": report.to_dict()}, indent=2) + "\n")
                written.append(path)
                echo(f"unseen digit {d}\t{acc:.4f}")
    manifest.add(run_dir, metrics=written, artifacts=artifacts)
    manifest.write(run_dir)
    return written + artifacts


def run_ablation(cfg: ExperimentConfig, out, cache_dir, echo=print):
    """Train and score every ablation configuration; failures are recorded per row.

    Returns ``(run_dir, rows)`` where each row is ``(label, accuracy or None, error)``.
    """
    run_dir, manifest = _start_run(out, cfg)
    rows = []
    with FileLock(str(run_dir / ".lock")):
        f = obtain_f(cfg, cache_dir, run_dir / "f")
        clf = obtain_classifier(cfg, cache_dir, run_dir / "classifier")
        s, t = source_target(cfg, cache_dir)
        test = eval_split(cfg, cache_dir)
        base = cfg.training_config()
        for label, slug, flags in ABLATION_ROWS:
            try:
                if flags is None:
                    report = transferred_accuracy(_identity, clf, test, name=slug)
                else:
                    config = base.replace(ablation=frozenset(flags))
                    model = train_dtn(s, t, f, config, run_dir=run_dir / "rows" / slug)
                    report = transferred_accuracy(model, clf, test, name=slug,
                                                  run_config_hash=config.config_hash())
                report.save(run_dir / "metrics" / f"{slug}.json")
                rows.append((label, report.accuracy, None))
                echo(f"{label}\t{report.accuracy:.4f}")
            except Exception as exc:  # keep partial results
                logger.exception("ablation row %s failed", slug)
                rows.append((label, None, f"{type(exc).__name__}: {exc}"))
                echo(f"{label}\tFAILED\t{exc}")
        table = _write_table(run_dir / "table.tsv", rows)
        manifest.add(run_dir, metrics=sorted((run_dir / "metrics").glob("*.json")),
                     artifacts=[table])
        manifest.write(run_dir)
    return run_dir, rows


def run_unseen_digit_suite(cfg: ExperimentConfig, out, cache_dir, digit=3, echo=print):
    """Train the reference DTN and the four class-omission variants; report
    each variant's accuracy on ``digit``. Returns ``(run_dir, {slug: report})``."""
    run_dir, manifest = _start_run(out, cfg)
    reports, rows = {}, []
    with FileLock(str(run_dir / ".lock")):
        clf = obtain_classifier(cfg, cache_dir, run_dir / "classifier")
        s, t = source_target(cfg, cache_dir)
        test = eval_split(cfg, cache_dir)
        f_full = None
        for label, slug, omit in UNSEEN_VARIANTS:
            try:
                if omit.get("omit_from_f_training"):
                    f = obtain_f(cfg, cache_dir, run_dir / "f_no_digit", omit_digit=digit)
                else:
                    f = f_full = f_full or obtain_f(cfg, cache_dir, run_dir / "f")
                omission = datamod.ClassOmissionFilter(**{k: digit for k in omit})
                config = cfg.training_config().replace(omission=omission)
                model = train_dtn(s, t, f, config, run_dir=run_dir / "rows" / slug)
                report = transferred_accuracy(model, clf, test, name=slug,
                                              run_config_hash=config.config_hash())
                report.save(run_dir / "metrics" / f"{slug}.json")
                reports[slug] = report
                if digit not in report.per_class_accuracy:
                    raise EmptyClassError(f"no evaluation samples labeled {digit}")
                acc = report.per_class_accuracy[digit]
                rows.append((label, acc, None))
                echo(f"{label}\t{acc:.4f}")
            except Exception as exc:
                logger.exception("unseen-digit variant %s failed", slug)
                rows.append((label, None, f"{type(exc).__name__}: {exc}"))
                echo(f"{label}\tFAILED\t{exc}")
        table = _write_table(run_dir / "unseen_table.tsv", rows, header=f"accuracy_of_{digit}")
        manifest.add(run_dir, metrics=sorted((run_dir / "metrics").glob("*.json")),
                     artifacts=[table])
        manifest.write(run_dir)
    return run_dir, reports


def _write_table(path, rows, header="accuracy"):
    lines = [f"method\t{header}"]
    for label, acc, err in rows:
        lines.append(f"{label}\t{acc:.6f}" if err is None else f"{label}\tFAILED: {err}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def load_image(path):
    """Read an image file as a (32, 32, C) float array in [-1, 1]; C is 1 or 3."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if im.mode in ("L", "1", "I", "F", "LA") else "RGB")
        if im.size != (32, 32):
            im = im.resize((32, 32), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[..., None]
    return datamod.normalize(arr)


def transfer_images(run_dir, inputs, output_dir, echo=print):
    """Transfer image files; writes one PNG per input plus an input/output grid.

    Returns ``(written_paths, failed_inputs)``.
    """
    if not inputs:
        raise UsageError("no input images given")
    model = TransferModel.load(run_dir)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    loaded, failed = [], []
    for path in inputs:
        try:
            loaded.append((Path(path), load_image(path)))
        except Exception as exc:
            logger.warning("skipping %s: %s", path, exc)
            echo(f"warning\tcannot decode {path}: {exc}")
            failed.append(path)
    if not loaded:
        return [], failed
    x = to_tensor(np.stack([np.repeat(a, 3, axis=-1) if a.shape[-1] == 1 else a
                            for _, a in loaded]))
    with torch.no_grad():
        y = model(x)
    written = []
    for (path, _), img in zip(loaded, y):
        written.append(save_png(img.numpy(), output_dir / f"{path.stem}_transferred.png"))
    written.append(save_png(pair_grid(x, y), output_dir / "grid.png"))
    for p in written:
        echo(f"wrote\t{p}")
    return written, failed
