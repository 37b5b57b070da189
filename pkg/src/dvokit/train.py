"""Training loops: masked cross-view completion pretraining and
self-supervised finetuning, with deterministic batching, per-epoch
checkpoints, and JSON run reports."""

from __future__ import annotations

import json
import os
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .evaluation import DepthEvalConfig, EvalReport, depth_metrics, mean_reports
from .formats import load_pairs
from .losses import LossWeights, total_loss
from .model import (
    DvoModel,
    ModelConfig,
    forward_dvo,
    load_state,
    masked_patch_mse,
    model_state,
    normalized_patch_targets,
    sample_mask,
    save_checkpoint,
    load_checkpoint,
    toy_config,
)
from .optim import AdamW
from .synth import FramePair


class TrainingDivergence(RuntimeError):
    """Non-finite loss; carries the offending epoch and pair index."""

    def __init__(self, epoch: int, pair_index: int, cause: Exception):
        super().__init__(f"non-finite loss at epoch {epoch}, pair {pair_index}: {cause}")
        self.epoch = epoch
        self.pair_index = pair_index


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.kind != "adamw":
            raise ValueError("only the adamw optimizer kind is supported")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=toy_config)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 4
    batch_size: int = 2
    train_data: str = ""
    eval_data: str | None = None
    out_dir: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "optimizer": asdict(self.optimizer),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "train_data": self.train_data,
            "eval_data": self.eval_data,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["loss"] = LossWeights(**d.get("loss", {}))
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def apply_overrides(self, pairs: list[str]) -> "RunConfig":
        """Apply dotted-path overrides like ``optimizer.lr=3e-4``."""
        data = self.to_dict()
        for item in pairs:
            if "=" not in item:
                raise ValueError(f"override '{item}' is not of the form key=value")
            key, _, raw = item.partition("=")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key '{key}'")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)


@dataclass
class RunReport:
    config: dict
    version: str
    wall_clock_sec: float
    epochs: int
    curves: dict[str, list[float]]
    eval_snapshots: list[dict | None]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def worker_count() -> int:
    """Worker cap from DVO_THREADS (default 1 = sequential)."""
    raw = os.environ.get("DVO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---- batched gradient accumulation ---------------------------------------------------


def batch_gradients(model: DvoModel, jobs: list, loss_fn, workers: int | None = None):
    """Evaluate `loss_fn(model, job)` per job, each on its own graph, and
    reduce leaf gradients in job order (deterministic regardless of worker
    count). Returns (list of per-job scalar dicts, grads-by-name).

    loss_fn returns (scalar Tensor, dict of floats to log).
    """
    workers = workers or worker_count()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    params = [p for _, p in named]

    def run_one(job):
        loss, scalars = loss_fn(model, job)
        gs = ad.grads(loss, params)
        return scalars, gs

    if workers == 1 or len(jobs) == 1:
        results = [run_one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, jobs))

    total: dict[str, np.ndarray] = {}
    for _, gs in results:  # ordered reduction
        for (name, _), g in zip(named, gs):
            total[name] = total[name] + g if name in total else g
    scale = 1.0 / len(jobs)
    grads_by_name = {n: g * scale for n, g in total.items()}
    return [s for s, _ in results], grads_by_name


def apply_gradients(model: DvoModel, grads_by_name: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name in grads_by_name:
            p.grad = grads_by_name[name]


# ---- datasets -------------------------------------------------------------------------


class PairDataset:
    """A list of frame pairs with shared intrinsics."""

    def __init__(self, pairs: list[FramePair]):
        if not pairs:
            raise ValueError("dataset has no pairs")
        self.pairs = pairs

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> FramePair:
        return self.pairs[i]

    @classmethod
    def from_dir(cls, path) -> "PairDataset":
        pairs, _ = load_pairs(path)
        return cls(pairs)


def evaluate_depth(model: DvoModel, dataset: PairDataset, eval_cfg: DepthEvalConfig | None = None) -> EvalReport:
    """Mean per-image depth metrics of the frame-a predictions."""
    eval_cfg = eval_cfg or DepthEvalConfig(cap=model.cfg.max_depth)
    reports = []
    for pair in dataset.pairs:
        grid_a = model.encode(pair.image_a)
        grid_b = model.encode(pair.image_b)
        depth = model.depth_from_blocks(model.decode(grid_a, grid_b), grid_a.rows, grid_a.cols)
        reports.append(depth_metrics(depth.data, pair.gt_depth_a.values, eval_cfg))
    return mean_reports(reports)


# ---- the two training phases ---------------------------------------------------------


def _completion_loss(model, job):
    pair, masked, keep = job
    grid_a = model.encode(pair.image_a, keep=keep)
    grid_b = model.encode(pair.image_b)
    blocks = model.decode(grid_a, grid_b)
    pred = model.pixel_head(blocks[-1])
    targets = normalized_patch_targets(pair.image_a, model.cfg.patch_size)
    loss = masked_patch_mse(pred, targets, masked)
    return loss, {"reconstruction": loss.item()}


def _finetune_loss(model, job, weights: LossWeights):
    pair = job
    depth_a, depth_b, twist = forward_dvo(model, pair.image_a, pair.image_b)
    bd = total_loss(pair, depth_a, depth_b, twist, weights)
    return bd.l_total, bd.scalars()


def _checkpoint_config(cfg: RunConfig, phase: str, epoch: int) -> dict:
    return {"model": cfg.model.to_dict(), "extra": {"phase": phase, "epoch": epoch, "seed": cfg.seed}}


def _save_epoch_checkpoint(out_dir: Path, cfg: RunConfig, phase, epoch, model, opt) -> Path:
    arrays = {f"model.{k}": v for k, v in model_state(model).items()}
    arrays.update(opt.state_arrays())
    path = out_dir / f"checkpoint-epoch{epoch:03d}.dvoc"
    save_checkpoint(path, arrays, _checkpoint_config(cfg, phase, epoch))
    return path


def load_model_arrays(ckpt_path) -> tuple[dict, dict[str, np.ndarray]]:
    """Model-parameter arrays (without the 'model.' prefix) from a checkpoint."""
    config, arrays = load_checkpoint(ckpt_path)
    model_arrays = {k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")}
    return config, model_arrays


def _run_phase(
    cfg: RunConfig,
    dataset: PairDataset,
    phase: str,
    init_arrays: dict[str, np.ndarray] | None = None,
    resume: str | None = None,
    eval_dataset: PairDataset | None = None,
    freeze_backbone: bool = False,
) -> tuple[DvoModel, RunReport]:
    started = time.monotonic()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = DvoModel(cfg.model, np.random.default_rng(cfg.seed))
    start_epoch = 0
    if init_arrays is not None:
        load_state(model, init_arrays, strict=False)  # warm start; heads may stay fresh
    if freeze_backbone:
        from .model import freeze_for_adapters

        freeze_for_adapters(model)
    opt = AdamW(
        list(model.named_parameters()),
        lr=cfg.optimizer.lr,
        betas=cfg.optimizer.betas,
        weight_decay=cfg.optimizer.weight_decay,
    )
    if resume is not None:
        ck_cfg, arrays = load_checkpoint(resume)
        if ck_cfg["model"] != cfg.model.to_dict():
            raise ValueError("checkpoint/config mismatch: model configuration differs")
        load_state(model, {k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})
        opt.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("opt.")})
        start_epoch = int(ck_cfg["extra"]["epoch"]) + 1

    curves: dict[str, list[float]] = {}
    snapshots: list[dict | None] = []
    workers = worker_count()

    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(dataset))
        epoch_scalars: dict[str, list[float]] = {}
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if phase == "pretrain":
                jobs = []
                for i in idx:
                    pair = dataset[int(i)]
                    rows, cols = model.grid_shape(pair.image_a.shape)
                    masked, keep = sample_mask(rows * cols, cfg.model.mask_ratio, rng)
                    jobs.append((pair, masked, keep))
                loss_fn = _completion_loss
            else:
                jobs = [dataset[int(i)] for i in idx]
                loss_fn = lambda m, job: _finetune_loss(m, job, cfg.loss)
            try:
                scalar_list, grads_by_name = batch_gradients(model, jobs, loss_fn, workers)
            except (NonFiniteError, FloatingPointError) as e:
                raise TrainingDivergence(epoch, int(idx[0]), e) from e
            opt.zero_grad()
            apply_gradients(model, grads_by_name)
            opt.step()
            for scalars in scalar_list:
                for key, value in scalars.items():
                    epoch_scalars.setdefault(key, []).append(value)
        for key, values in epoch_scalars.items():
            curves.setdefault(key, []).append(float(np.mean(values)))
        if eval_dataset is not None:
            snapshots.append(json.loads(evaluate_depth(model, eval_dataset).to_json()))
        else:
            snapshots.append(None)
        if out_dir:
            _save_epoch_checkpoint(out_dir, cfg, phase, epoch, model, opt)

    report = RunReport(
        config=cfg.to_dict(),
        version=version_string(),
        wall_clock_sec=time.monotonic() - started,
        epochs=cfg.epochs,
        curves=curves,
        eval_snapshots=snapshots,
    )
    if out_dir:
        (out_dir / "report.json").write_text(report.to_json() + "\n")
    return model, report


def pretrain_run(cfg: RunConfig, dataset: PairDataset | None = None, resume: str | None = None):
    """Minimize the masked completion loss over the dataset pairs."""
    dataset = dataset or PairDataset.from_dir(cfg.train_data)
    return _run_phase(cfg, dataset, "pretrain", resume=resume)


def finetune_run(
    cfg: RunConfig,
    dataset: PairDataset | None = None,
    init_checkpoint: str | None = None,
    resume: str | None = None,
    eval_dataset: PairDataset | None = None,
    freeze_backbone: bool = False,
):
    """Minimize the self-supervised warping objective over the dataset pairs."""
    dataset = dataset or PairDataset.from_dir(cfg.train_data)
    if eval_dataset is None and cfg.eval_data:
        eval_dataset = PairDataset.from_dir(cfg.eval_data)
    init_arrays = None
    if init_checkpoint is not None:
        ck_cfg, init_arrays = load_model_arrays(init_checkpoint)
        if ck_cfg["model"] != cfg.model.to_dict():
            raise ValueError("checkpoint/config mismatch: model configuration differs")
    return _run_phase(
        cfg,
        dataset,
        "finetune",
        init_arrays=init_arrays,
        resume=resume,
        eval_dataset=eval_dataset,
        freeze_backbone=freeze_backbone,
    )
