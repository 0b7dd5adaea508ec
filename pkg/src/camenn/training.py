"""Training, evaluation, similarity export, and the ablation runner.

Everything is deterministic given (config, seed): batch schedules derive
from per-(epoch, step) seeded generators, so an interrupted run resumed
from its last checkpoint reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import backward
from .checkpoint import load_arrays, save_arrays
from .config import Config
from .embeddings import Vocab
from .errors import ConfigError, ContractError
from .metrics import accuracy, auc, cosine_similarity
from .model import CameNNModel, ModelConfig
from .moe import MoeConfig
from .optim import Adam, AdamConfig, EarlyStopper
from .synth import (DatasetManifest, ItemRecord, _user_bucket, read_catalog,
                    read_interactions, read_manifest)
from .tasks import (TaskBatch, build_alignment_batch, build_cvr_batch, joint_loss)

logger = logging.getLogger("camenn")

LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"
REPORT_FILE = "report.json"


def log_kv(**kv):
    logger.info(" ".join(f"{k}={v}" for k, v in kv.items()))


@dataclass
class DatasetBundle:
    catalog: list[ItemRecord]
    by_id: dict[int, ItemRecord]
    interactions: list
    vocab: Vocab
    num_users: int
    manifest: Optional[DatasetManifest] = None


def load_dataset(cfg: Config) -> DatasetBundle:
    data_dir = cfg["data.dir"]
    catalog_path = os.path.join(data_dir, "catalog.jsonl")
    inter_path = os.path.join(data_dir, "interactions.jsonl")
    for p in (catalog_path, inter_path):
        if not os.path.exists(p):
            raise ConfigError(f"missing dataset file: {p}")
    catalog = read_catalog(catalog_path)
    interactions = read_interactions(inter_path)
    manifest = None
    manifest_path = os.path.join(data_dir, "manifest.json")
    if os.path.exists(manifest_path):
        manifest = read_manifest(manifest_path)
    vocab = Vocab.from_texts([i.text for i in catalog])
    num_users = max((r.user_id for r in interactions), default=0) + 1
    if manifest is not None:
        num_users = max(num_users, manifest.num_users)
    return DatasetBundle(catalog, {i.item_id: i for i in catalog},
                         interactions, vocab, num_users, manifest)


def model_config_from(cfg: Config, num_users: int, seed: int) -> ModelConfig:
    return ModelConfig(
        d_model=cfg["model.d_model"], num_heads=cfg["model.num_heads"],
        num_blocks=cfg["model.num_blocks"], ffn_hidden=cfg["model.ffn_hidden"],
        moe=MoeConfig(cfg["moe.num_experts"], cfg["moe.top_k"],
                      cfg["moe.expert_kind"], cfg["moe.gating_mode"]),
        max_text_len=cfg["model.max_text_len"],
        max_patch_len=cfg["model.max_patch_len"],
        max_behavior=cfg["model.max_behavior"],
        patch_grid=cfg["model.patch_grid"],
        num_users=num_users, cvr_head=cfg["tasks.cvr_head"], seed=seed)


def lambdas_from(cfg: Config) -> dict[str, float]:
    return {"ita": cfg["tasks.lambda_ita"], "tia": cfg["tasks.lambda_tia"],
            "cvr": cfg["tasks.lambda_cvr"]}


# ----------------------------------------------------------------------
# evaluation


def evaluate_cvr(model: CameNNModel, rows, by_id, max_examples: int = 0,
                 rng_seed: int = 0) -> tuple[float, int]:
    """Test CVR AUC over (a deterministic sample of) batch rows."""
    if max_examples and len(rows) > max_examples:
        rng = np.random.default_rng([rng_seed, 9009])
        idx = rng.choice(len(rows), size=max_examples, replace=False)
        rows = [rows[i] for i in sorted(idx)]
    scores, labels = [], []
    with ag.no_grad():
        for row in rows:
            history = [by_id[i] for i in row.history_item_ids]
            seq = model.cvr_sequence(row.user_id, history, by_id[row.target_item_id])
            scores.append(model.forward(seq, "cvr").item())
            labels.append(row.label)
    return auc(scores, labels), len(rows)


def evaluate_alignment(model: CameNNModel, task: str, items: Sequence[ItemRecord],
                       negative_ratio: float, rng_seed: int,
                       max_examples: int = 0) -> float:
    batch = build_alignment_batch(task, items, negative_ratio, rng_seed)
    rows = batch.rows[:max_examples] if max_examples else batch.rows
    scores, labels = [], []
    with ag.no_grad():
        for row in rows:
            seq = model.alignment_sequence(model_item(model, row.text_item_id, items),
                                           model_item(model, row.image_item_id, items))
            scores.append(model.forward(seq, task).item())
            labels.append(row.label)
    return accuracy(scores, labels)


def model_item(model, item_id, items):
    for i in items:
        if i.item_id == item_id:
            return i
    raise ContractError(f"unknown item id {item_id}")


def export_similarity(items: Sequence[ItemRecord], model: CameNNModel,
                      path) -> np.ndarray:
    """n x n cosine grid: row i = item i's pooled text vector against
    item j's pooled image vector; CSV with item-id headers.

    Each modality's vectors are mean-centered across the probed items
    before the cosine: trained encoders concentrate all embeddings in a
    narrow cone (anisotropy), and without removing the shared component
    every entry of the grid saturates near 1 regardless of whether the
    pair matches.
    """
    if len(items) < 2:
        raise ContractError("similarity export needs at least 2 items")
    text_vecs, image_vecs = [], []
    for item in items:
        t, im = model.pooled_text_image(item)
        if np.linalg.norm(t) == 0.0:
            log_kv(warning="zero_norm_text_embedding", item=item.item_id)
        text_vecs.append(t)
        image_vecs.append(im)
    text_arr = np.asarray(text_vecs)
    image_arr = np.asarray(image_vecs)
    text_arr = text_arr - text_arr.mean(axis=0)
    image_arr = image_arr - image_arr.mean(axis=0)
    n = len(items)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            matrix[i, j] = cosine_similarity(text_arr[i], image_arr[j])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text_item\\image_item"] + [str(i.item_id) for i in items])
        for i, item in enumerate(items):
            writer.writerow([str(item.item_id)] +
                            [f"{matrix[i, j]:.10f}" for j in range(n)])
    return matrix


def diagonal_offdiagonal_means(matrix: np.ndarray) -> tuple[float, float]:
    n = matrix.shape[0]
    diag = float(np.mean(np.diag(matrix)))
    off = float((matrix.sum() - np.trace(matrix)) / (n * n - n))
    return diag, off


# ----------------------------------------------------------------------
# training


@dataclass
class EvalReport:
    cvr_auc: float
    ita_accuracy: float
    tia_accuracy: float
    losses: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""
    epochs_run: int = 0
    best_epoch: int = -1

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, sort_keys=True, indent=2)
            fh.write("\n")


@dataclass
class TrainResult:
    best_checkpoint: str
    report: EvalReport


def _split_rows(bundle: DatasetBundle, cfg: Config):
    """Train/val/test CVR rows by user-hash splits (no user overlap)."""
    fraction = cfg["data.split_fraction"]
    seed = cfg["data.seed"]
    all_rows = build_cvr_batch(bundle.interactions, rng_seed=cfg["train.seed"],
                               max_history=cfg["model.max_behavior"]).rows
    min_history = cfg["tasks.cvr_min_history"]
    if min_history > 0:
        all_rows = [r for r in all_rows
                    if len(r.history_item_ids) >= min_history]
    train, val, test = [], [], []
    val_fraction = cfg["train.val_fraction"]
    for row in all_rows:
        if _user_bucket(seed, row.user_id) < fraction:
            if _user_bucket(seed + 1, row.user_id) < val_fraction:
                val.append(row)
            else:
                train.append(row)
        else:
            test.append(row)
    return train, val, test


def select_holdout(catalog: Sequence[ItemRecord], n: int) -> list[ItemRecord]:
    """Deterministically pick ``n`` probe items for the similarity grid.

    Scans from the end of the catalog preferring uncorrupted items with
    pairwise-distinct concepts: a corrupted item's text and image disagree
    by construction, and two items of the same concept make the grid's
    off-diagonal indistinguishable from its diagonal. Relaxes (distinct
    concepts, then any item) only if the catalog cannot satisfy that.
    """
    chosen: list[ItemRecord] = []
    taken_ids: set[int] = set()
    taken_concepts: set[int] = set()
    passes = (
        lambda it: not (it.text_corrupted or it.image_corrupted)
        and it.concept_id not in taken_concepts,
        lambda it: it.concept_id not in taken_concepts,
        lambda it: True,
    )
    for ok in passes:
        for item in reversed(catalog):
            if len(chosen) == n:
                return chosen
            if item.item_id in taken_ids or not ok(item):
                continue
            chosen.append(item)
            taken_ids.add(item.item_id)
            taken_concepts.add(item.concept_id)
    return chosen


def _alignment_pool(bundle: DatasetBundle, cfg: Config):
    holdout = cfg["data.holdout_items"]
    if holdout <= 0:
        return list(bundle.catalog), []
    held = select_holdout(bundle.catalog, min(holdout, len(bundle.catalog)))
    held_ids = {it.item_id for it in held}
    pool = [it for it in bundle.catalog if it.item_id not in held_ids]
    return pool, held


def _sample_step_batches(cfg: Config, lambdas, pool, cvr_rows, epoch, step):
    batches: dict[str, TaskBatch] = {}
    batch_size = cfg["train.batch_size"]
    rng = np.random.default_rng([cfg["train.seed"], 7007, epoch, step])
    for task in ("ita", "tia"):
        if lambdas[task] == 0.0 or len(pool) < 2:
            continue
        k = min(max(2, batch_size // 2), len(pool))
        idx = rng.choice(len(pool), size=k, replace=False)
        batches[task] = build_alignment_batch(
            task, [pool[i] for i in sorted(idx)], cfg["tasks.negative_ratio"],
            rng_seed=int(rng.integers(2 ** 31)))
    if lambdas["cvr"] > 0.0 and cvr_rows:
        k = min(batch_size, len(cvr_rows))
        idx = rng.choice(len(cvr_rows), size=k, replace=False)
        batches["cvr"] = TaskBatch("cvr", [cvr_rows[i] for i in sorted(idx)])
    return batches


def run_training(cfg: Config, resume: bool = False) -> TrainResult:
    """Train per config; returns the best checkpoint path and test report."""
    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)
    bundle = load_dataset(cfg)
    seed = cfg["train.seed"]
    model = CameNNModel(model_config_from(cfg, bundle.num_users, seed), bundle.vocab)
    opt = Adam(model.trainable(), AdamConfig(
        lr=cfg["train.lr"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
        weight_decay=cfg["train.weight_decay"],
        coupled_weight_decay=cfg["train.coupled_weight_decay"]))
    lambdas = lambdas_from(cfg)
    train_rows, val_rows, test_rows = _split_rows(bundle, cfg)
    pool, held_out = _alignment_pool(bundle, cfg)
    stopper = EarlyStopper(patience=cfg["train.patience"])
    start_epoch = 0

    last_path = os.path.join(out_dir, LAST_CKPT)
    best_path = os.path.join(out_dir, BEST_CKPT)
    if resume and os.path.exists(last_path):
        arrays = load_arrays(last_path)
        model.load_arrays(arrays)
        opt.load_state_arrays(arrays)
        start_epoch = int(arrays["meta.epoch"])
        stopper.best_value = float(arrays["meta.best_value"])
        stopper.best_epoch = int(arrays["meta.best_epoch"])
        stopper._bad_epochs = int(arrays["meta.bad_epochs"])
        log_kv(event="resume", epoch=start_epoch)

    epochs = cfg["train.epochs"]
    steps = cfg["train.steps_per_epoch"]
    epochs_run = start_epoch
    for epoch in range(start_epoch, epochs):
        for step in range(steps):
            batches = _sample_step_batches(cfg, lambdas, pool, train_rows,
                                           epoch, step)
            if not batches:
                raise ContractError("no trainable batch; check task weights and data")
            opt.zero_grad()
            result = joint_loss(model, batches, bundle.by_id, lambdas)
            backward(result.total)
            opt.step()
            if step == 0 or (step + 1) % 10 == 0:
                log_kv(event="step", epoch=epoch, step=step,
                       loss=f"{result.total.item():.6f}",
                       **{f"loss_{k}": f"{v:.6f}" for k, v in result.per_task.items()})
        epochs_run = epoch + 1
        val_metric = _validation_metric(model, cfg, val_rows, bundle, pool, epoch)
        improved = stopper.update(epoch, val_metric)
        log_kv(event="epoch", epoch=epoch, val_metric=f"{val_metric:.6f}",
               improved=improved)
        arrays = model.all_arrays()
        arrays.update(opt.state_arrays())
        arrays["meta.epoch"] = np.array(float(epoch + 1))
        arrays["meta.best_value"] = np.array(float(stopper.best_value))
        arrays["meta.best_epoch"] = np.array(float(stopper.best_epoch))
        arrays["meta.bad_epochs"] = np.array(float(stopper._bad_epochs))
        save_arrays(last_path, arrays)
        if improved:
            save_arrays(best_path, model.all_arrays())
        if stopper.should_stop:
            log_kv(event="early_stop", epoch=epoch, best_epoch=stopper.best_epoch)
            break

    if os.path.exists(best_path):
        model.load_arrays(load_arrays(best_path))
    else:
        save_arrays(best_path, model.all_arrays())

    report = _final_report(model, cfg, test_rows, bundle, held_out or pool)
    report.seed = seed
    report.config_hash = cfg.hash()
    report.epochs_run = epochs_run
    report.best_epoch = stopper.best_epoch
    report.write(os.path.join(out_dir, REPORT_FILE))
    log_kv(event="done", cvr_auc=f"{report.cvr_auc:.6f}",
           ita_acc=f"{report.ita_accuracy:.6f}", tia_acc=f"{report.tia_accuracy:.6f}")
    return TrainResult(best_path, report)


def _validation_metric(model, cfg, val_rows, bundle, pool, epoch) -> float:
    """Validation CVR AUC; falls back to alignment accuracy for
    alignment-only configurations."""
    lambdas = lambdas_from(cfg)
    max_eval = cfg["eval.val_max_examples"]
    if lambdas["cvr"] > 0.0 and val_rows:
        labels = {r.label for r in val_rows}
        if labels == {0, 1}:
            value, _ = evaluate_cvr(model, val_rows, bundle.by_id, max_eval,
                                    rng_seed=cfg["train.seed"])
            return value
    accs = [evaluate_alignment(model, t, pool[:16], cfg["eval.negative_ratio"],
                               rng_seed=1000 + epoch, max_examples=max_eval)
            for t in ("ita", "tia") if lambdas[t] > 0.0]
    if not accs:
        raise ContractError("no validation metric available")
    return float(np.mean(accs))


def _final_report(model, cfg, test_rows, bundle, align_items) -> EvalReport:
    max_eval = cfg["eval.max_examples"]
    cvr_auc = 0.5
    if test_rows and {r.label for r in test_rows} == {0, 1}:
        cvr_auc, _ = evaluate_cvr(model, test_rows, bundle.by_id, max_eval,
                                  rng_seed=cfg["train.seed"])
    ita = evaluate_alignment(model, "ita", align_items[:32],
                             cfg["eval.negative_ratio"], rng_seed=31,
                             max_examples=max_eval)
    tia = evaluate_alignment(model, "tia", align_items[:32],
                             cfg["eval.negative_ratio"], rng_seed=32,
                             max_examples=max_eval)
    return EvalReport(cvr_auc=cvr_auc, ita_accuracy=ita, tia_accuracy=tia)


# ----------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    expert_kind: str
    seeds: list[int]
    aucs: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std(self) -> float:
        return float(np.std(self.aucs))


def run_ablation(cfg: Config, kinds=("mlp_relu", "recurrent", "transformer")
                 ) -> list[AblationRow]:
    """Train every expert kind under identical seeds/budgets; emit a
    mean +/- std CVR AUC table (CSV next to the per-run outputs)."""
    seeds = [int(s) for s in str(cfg["ablate.seeds"]).split(",") if s != ""]
    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for kind in kinds:
        aucs = []
        for seed in seeds:
            sub = cfg.with_overrides({
                "moe.expert_kind": kind,
                "train.seed": seed,
                "out.dir": os.path.join(out_dir, f"ablate_{kind}_seed{seed}"),
            })
            result = run_training(sub)
            aucs.append(result.report.cvr_auc)
            log_kv(event="ablate_cell", expert_kind=kind, seed=seed,
                   cvr_auc=f"{result.report.cvr_auc:.6f}")
        rows.append(AblationRow(kind, list(seeds), aucs))
    table_path = os.path.join(out_dir, "ablation.csv")
    with open(table_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert_kind"] + [f"seed_{s}" for s in seeds]
                        + ["mean", "std"])
        for row in rows:
            writer.writerow([row.expert_kind]
                            + [f"{a:.6f}" for a in row.aucs]
                            + [f"{row.mean:.6f}", f"{row.std:.6f}"])
    return rows
