"""Training loop, retrieval evaluation, and the ablation/sweep drivers."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import StyleDataset, split_instances
from .encoder import ABLATION_MODES, EncoderConfig, StyleRetriever
from .errors import ConfigError, ContractError, NumericAbort
from .losses import LOSSES, LossConfig, compute_loss, similarity_matrix
from .seeding import numpy_rng

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["run_id", "seed", "config_label", "epoch", "style", "top1", "top5"]
GAMMA_SWEEP = (1.0, 10.0, 30.0, 50.0, 80.0, 120.0, 200.0, 500.0)
LAMBDA_SWEEP = (0.1, 0.3, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0)
ABLATION_ROWS = (
    ("frozen", "frozen", "infonce"),
    ("static_only+infonce", "static_only", "infonce"),
    ("hybrid+infonce", "hybrid", "infonce"),
    ("hybrid+stylence", "hybrid", "stylence"),
)


@dataclass
class TrainConfig:
    batch_size: int = 48
    epochs: int = 35
    lr_static: float = 1e-3
    lr_hyper: float = 1e-5
    loss: str = "stylence"
    loss_config: LossConfig = field(default_factory=LossConfig)
    ablation_mode: str = "hybrid"
    seed: int = 0
    eval_every: int = 5
    eval_fraction: float = 0.2
    single_style_batches: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.epochs < 0 or self.eval_every < 0:
            raise ConfigError("train.epochs and train.eval_every must be non-negative")
        if self.lr_static < 0 or self.lr_hyper < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.loss not in LOSSES:
            raise ConfigError(f"train.loss must be one of {LOSSES}")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"train.ablation_mode must be one of {ABLATION_MODES}")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("train.eval_fraction must lie in (0, 1)")


@dataclass
class RetrievalMetrics:
    top1: dict[str, float]
    top5: dict[str, float]

    @property
    def mean_top1(self) -> float:
        return float(np.mean(list(self.top1.values())))

    @property
    def mean_top5(self) -> float:
        return float(np.mean(list(self.top5.values())))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metrics: RetrievalMetrics | None = None


# -- batching -----------------------------------------------------------------

def training_anchors(ds: StyleDataset, train_instances: set) -> list[int]:
    holdout = {ds.styles.index(s) for s in ds.config.holdout_styles}
    return [
        i
        for i, it in enumerate(ds.items)
        if it.style_id != 0 and it.style_id not in holdout and (it.class_id, it.instance_id) in train_instances
    ]


def epoch_batches(ds: StyleDataset, anchors: list[int], batch_size: int, rng: np.random.Generator,
                  single_style: bool = False) -> list[list[int]]:
    """Shuffled batches with at most one anchor per (class, instance), so no positive repeats."""
    order = [anchors[i] for i in rng.permutation(len(anchors))]
    if single_style:
        pools = {}
        for i in order:
            pools.setdefault(ds.items[i].style_id, []).append(i)
        batches = [b for style in sorted(pools) for b in _pack(ds, pools[style], batch_size)]
        return [batches[i] for i in rng.permutation(len(batches))]
    return _pack(ds, order, batch_size)


def _pack(ds: StyleDataset, order: list[int], batch_size: int) -> list[list[int]]:
    # first-fit in shuffled order; extra batches absorb anchors that clashed on (class, instance)
    pending = list(order)
    batches = []
    while pending:
        batch, keys, rest = [], set(), []
        for i in pending:
            key = (ds.items[i].class_id, ds.items[i].instance_id)
            if len(batch) < batch_size and key not in keys:
                batch.append(i)
                keys.add(key)
            else:
                rest.append(i)
        pending = rest
        if len(batch) < 2:
            break
        batches.append(batch)
    return batches


def _as_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images).to(torch.get_default_dtype())


# -- training -----------------------------------------------------------------

def build_model(enc_cfg: EncoderConfig, cfg: TrainConfig) -> StyleRetriever:
    return StyleRetriever(enc_cfg, seed=cfg.seed, mode=cfg.ablation_mode)


def make_optimizer(model: StyleRetriever, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = model.encoder.trainable_groups()
    param_groups = [
        {"params": groups["static"], "lr": cfg.lr_static, "name": "static"},
        {"params": groups["hyper"], "lr": cfg.lr_hyper, "name": "hyper"},
    ]
    return torch.optim.Adam([g for g in param_groups if g["params"]], betas=(0.9, 0.999), eps=1e-8)


def train(model: StyleRetriever, ds: StyleDataset, cfg: TrainConfig, dump_dir: str | Path | None = None,
          max_steps: int | None = None) -> list[EpochRecord]:
    """Optimize ``model`` in place; returns per-epoch loss and (periodic) eval metrics."""
    if model.cfg.image_size != ds.config.image_size:
        raise ContractError("model and dataset image sizes differ")
    train_inst, eval_inst = split_instances(ds, cfg.eval_fraction, ds.config.seed)
    anchors = training_anchors(ds, train_inst)
    if len(anchors) < cfg.batch_size:
        raise ContractError(f"{len(anchors)} training anchors < batch size {cfg.batch_size}")
    opt = make_optimizer(model, cfg)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        rng = numpy_rng(cfg.seed, "batching", epoch)
        losses = []
        for batch in epoch_batches(ds, anchors, cfg.batch_size, rng, cfg.single_style_batches):
            if max_steps is not None and step >= max_steps:
                break
            positives = [ds.gallery_index(i) for i in batch]
            emb = model(_as_tensor(ds.images(batch + positives)))
            S = similarity_matrix(emb[: len(batch)], emb[len(batch):])
            loss = compute_loss(cfg.loss, S, cfg.loss_config)
            if not torch.isfinite(loss):
                path = _dump_state(model, dump_dir, epoch, step, batch)
                raise NumericAbort(f"non-finite loss at epoch {epoch}, step {step}", path)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"))
        if epoch == cfg.epochs or (cfg.eval_every and epoch % cfg.eval_every == 0):
            record.metrics = evaluate(model, ds, eval_inst)
            log.info("epoch %d loss %.4f top1 %.2f", epoch, record.loss, record.metrics.mean_top1)
        history.append(record)
    return history


def _dump_state(model, dump_dir, epoch, step, batch) -> Path | None:
    if dump_dir is None:
        return None
    from .checkpoint import save_checkpoint

    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path / "abort_state.hyst")
    (path / "abort_state.txt").write_text(f"epoch={epoch}\nstep={step}\nbatch={','.join(map(str, batch))}\n")
    return path / "abort_state.hyst"


# -- evaluation ---------------------------------------------------------------

@torch.no_grad()
def embed(model: StyleRetriever, ds: StyleDataset, idx: list[int], chunk: int = 128) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = [model(_as_tensor(ds.images(idx[i : i + chunk]))) for i in range(0, len(idx), chunk)]
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, model.cfg.embed_dim)


def retrieval_ranks(queries: torch.Tensor, gallery: torch.Tensor, targets: list[int]) -> np.ndarray:
    """0-based rank of each query's target under cosine similarity; ties go to the lower gallery index."""
    if gallery.shape[0] == 0:
        raise ContractError("empty gallery")
    sims = (torch.nn.functional.normalize(queries, dim=1) @ torch.nn.functional.normalize(gallery, dim=1).T).numpy()
    ranks = np.empty(len(targets), dtype=np.int64)
    for q, t in enumerate(targets):
        row = sims[q]
        ranks[q] = np.count_nonzero(row > row[t]) + np.count_nonzero(row[:t] == row[t])
    return ranks


def evaluate(model: StyleRetriever, ds: StyleDataset, instances: set | None = None) -> RetrievalMetrics:
    """Top-1/Top-5 (percent) per non-gallery style against the gallery items of ``instances``."""
    gallery_idx = ds.indices(0, instances)
    if not gallery_idx:
        raise ContractError("empty gallery")
    position = {idx: k for k, idx in enumerate(gallery_idx)}
    gallery = embed(model, ds, gallery_idx)
    top1, top5 = {}, {}
    for sid, style in enumerate(ds.styles[1:], start=1):
        q_idx = ds.indices(sid, instances)
        if not q_idx:
            continue
        ranks = retrieval_ranks(embed(model, ds, q_idx), gallery, [position[ds.gallery_index(i)] for i in q_idx])
        top1[style] = 100.0 * float(np.mean(ranks < 1))
        top5[style] = 100.0 * float(np.mean(ranks < 5))
    return RetrievalMetrics(top1, top5)


def eval_split(ds: StyleDataset, cfg: TrainConfig) -> set:
    return split_instances(ds, cfg.eval_fraction, ds.config.seed)[1]


# -- drivers ------------------------------------------------------------------

def run(ds: StyleDataset, enc_cfg: EncoderConfig, cfg: TrainConfig) -> tuple[StyleRetriever, list[EpochRecord]]:
    torch.manual_seed(cfg.seed)
    model = build_model(enc_cfg, cfg)
    return model, train(model, ds, cfg)


def metrics_rows(history: list[EpochRecord], run_id: str, seed: int, label: str) -> list[list[str]]:
    rows = []
    for rec in history:
        if rec.metrics is None:
            continue
        for style in rec.metrics.top1:
            rows.append([run_id, str(seed), label, str(rec.epoch), style,
                         f"{rec.metrics.top1[style]:.4f}", f"{rec.metrics.top5[style]:.4f}"])
        rows.append([run_id, str(seed), label, str(rec.epoch), "mean",
                     f"{rec.metrics.mean_top1:.4f}", f"{rec.metrics.mean_top5:.4f}"])
    return rows


def write_csv(path: str | Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def run_ablation(ds: StyleDataset, enc_cfg: EncoderConfig, base_cfg: TrainConfig, seeds=(0, 1, 2),
                 rows=ABLATION_ROWS) -> list[dict]:
    """Train each (label, mode, loss) row for every seed; one result dict per (row, seed)."""
    results = []
    for label, mode, loss in rows:
        for seed in seeds:
            cfg = replace(base_cfg, ablation_mode=mode, loss=loss, seed=seed)
            _, history = run(ds, enc_cfg, cfg)
            results.append({"label": label, "seed": seed, "metrics": history[-1].metrics, "history": history})
    return results


def run_sweep(ds: StyleDataset, enc_cfg: EncoderConfig, base_cfg: TrainConfig, parameter: str,
              values=None, seeds=(0,)) -> list[dict]:
    if parameter not in ("gamma", "lambda"):
        raise ConfigError("sweep parameter must be 'gamma' or 'lambda'")
    if values is None:
        values = GAMMA_SWEEP if parameter == "gamma" else LAMBDA_SWEEP
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    field_name = "gamma" if parameter == "gamma" else "lambda_"
    results = []
    for value in values:
        for seed in seeds:
            loss_cfg = replace(base_cfg.loss_config, **{field_name: float(value)})
            cfg = replace(base_cfg, loss_config=loss_cfg, seed=seed)
            _, history = run(ds, enc_cfg, cfg)
            results.append({"label": f"{parameter}={value:g}", "value": value, "seed": seed,
                            "metrics": history[-1].metrics, "history": history})
    return results


def table_rows(results: list[dict], styles: list[str]) -> tuple[list[str], list[list[str]]]:
    """Rows = configuration x seed, columns = per-style Top-1 and their mean."""
    header = ["config_label", "seed", *styles, "mean"]
    rows = []
    for r in results:
        m = r["metrics"]
        rows.append([r["label"], str(r["seed"]), *(f"{m.top1[s]:.4f}" for s in styles), f"{m.mean_top1:.4f}"])
    return header, rows


def mean_top1_by_label(results: list[dict]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in results:
        out.setdefault(r["label"], []).append(r["metrics"].mean_top1)
    return {k: float(np.mean(v)) for k, v in out.items()}


def export_embeddings(model: StyleRetriever, ds: StyleDataset, path: str | Path, idx: list[int] | None = None) -> None:
    idx = list(range(len(ds))) if idx is None else idx
    emb = embed(model, ds, idx)
    header = ["item_id", "class_id", "style_id", *(f"e{k}" for k in range(emb.shape[1]))]
    rows = [[str(i), str(ds.items[i].class_id), str(ds.items[i].style_id), *(f"{v:.9g}" for v in e)]
            for i, e in zip(idx, emb.tolist())]
    write_csv(path, header, rows)
