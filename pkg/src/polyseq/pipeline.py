"""Training loop, single-scene and patched inference, polygon merging, evaluation."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (PRESETS as SCENE_PRESETS, LoadedScene, SceneSample, ScenePreset, apply_augment,
                   draw_augment, make_rng, tile_patches, write_json)
from .graph import PolygonRing, PolygonSet, decode_rings, decode_road_graph, mask_to_polygons
from .matching import hungarian_assign, sinkhorn_normalize
from .metrics import MetricsReport, aggregate, evaluate_scene, rasterize, rasterize_polygon, write_reports
from .model import (PRESETS as MODEL_PRESETS, ModelConfig, VertexSequenceModel, detection_loss,
                    load_model, permutation_loss, save_model, total_loss)
from .tokenizer import QuantizationGrid, sequence_to_vertices

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_NONFINITE = 10


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    preset: str = "tiny"
    lambda_s: float = 1.0
    lambda_p: float = 10.0
    learning_rate: float = 4e-4
    weight_decay: float = 1e-4
    dropout: float = 0.0  # residual dropout rate during training
    batch_size: int = 16
    max_steps: int = 5000
    checkpoint_interval: int = 1000
    sinkhorn_iterations: int = 100
    temperature: float = 1.0
    seed: int = 0
    augment: bool = False
    lr_schedule: str = "constant"  # or "cosine"
    warmup_steps: int = 0
    perm_start_step: int = 0  # permutation term is off up to and including this step
    log_interval: int = 50

    def __post_init__(self):
        if self.preset not in MODEL_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(MODEL_PRESETS)}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lambda_s < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.perm_start_step < 0:
            raise ValueError("perm_start_step must be >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")

    def learning_rate_at(self, step: int) -> float:
        """Rate for 1-based ``step``."""
        lr = self.learning_rate
        if self.warmup_steps and step <= self.warmup_steps:
            return lr * step / self.warmup_steps
        if self.lr_schedule == "cosine" and self.max_steps > self.warmup_steps:
            t = (step - self.warmup_steps) / (self.max_steps - self.warmup_steps)
            return lr * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))
        return lr

    def lambda_p_at(self, step: int) -> float:
        """Permutation weight for 1-based ``step``."""
        return 0.0 if step <= self.perm_start_step else self.lambda_p

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value.strip()


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(value, kinds[key])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def load_config(path: str) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), path)


def write_config(config: TrainConfig, path: str) -> None:
    with open(path, "w") as fh:
        for k, v in config.to_dict().items():
            fh.write(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n")


# -- training -------------------------------------------------------------------

def stack_batch(samples: list[SceneSample]):
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples])
    tokens = np.stack([s.sequence.tokens for s in samples])
    perms = np.stack([s.permutation for s in samples])
    return images, tokens, perms


@dataclass
class StepResult:
    loss: float
    detection: float
    permutation: float
    token_accuracy: float


def loss_terms(model: VertexSequenceModel, images, tokens, perms, config: TrainConfig):
    """Forward pass; returns (total, detection, permutation, logits) tensors."""
    z = model.encode(images)
    logits, feats = model.decode_teacher_forced(z, tokens)
    l_det = detection_loss(logits, tokens)
    if config.lambda_p != 0.0:
        _, _, s = model.matching_scores(model.vertex_features(feats))
        p = sinkhorn_normalize(s, config.sinkhorn_iterations, config.temperature).entries
        l_perm = permutation_loss(p, perms, model.config.normalize_perm_loss)
    else:
        l_perm = T.Tensor(np.zeros(()))
    return total_loss(l_det, l_perm, config.lambda_s, config.lambda_p), l_det, l_perm, logits


def train_step(model: VertexSequenceModel, optimizer: T.AdamW, batch: list[SceneSample],
               config: TrainConfig, dropout_rng: np.random.Generator | None = None) -> StepResult:
    """One optimizer update. Raises FloatingPointError (no update) on a non-finite loss or gradient.

    Dropout at ``config.dropout`` is active for this forward pass only and draws from ``dropout_rng``.
    """
    images, tokens, perms = stack_batch(batch)
    optimizer.zero_grad()
    if config.dropout:
        model.dropout = (config.dropout, dropout_rng if dropout_rng is not None else make_rng(0))
    try:
        with T.Tape() as tape:
            loss, l_det, l_perm, logits = loss_terms(model, images, tokens, perms, config)
    finally:
        model.dropout = None
    T.backward(tape, loss)
    for name, p in model.params.items():
        if p.grad is None:
            p.grad = np.zeros(p.shape)
    optimizer.step()
    acc = float(np.mean(logits.values.argmax(-1) == tokens[:, 1:]))
    return StepResult(float(loss.values), float(l_det.values), float(l_perm.values), acc)


@dataclass
class TrainResult:
    model: VertexSequenceModel
    optimizer: T.AdamW
    curve: list[dict] = field(default_factory=list)
    skipped_steps: int = 0


CURVE_COLUMNS = ["step", "loss", "detection", "permutation", "token_accuracy", "learning_rate", "skipped"]


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    while True:
        order = rng.permutation(n)
        if batch_size >= n:
            yield order
            continue
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


def train(config: TrainConfig, samples: list[SceneSample], scene_preset: ScenePreset | None = None,
          out_dir: str | None = None, model: VertexSequenceModel | None = None,
          step_hook=None) -> TrainResult:
    """Train on ``samples``; deterministic given ``config.seed``.

    Steps with a non-finite loss or gradient are skipped; ten in a row abort.
    ``step_hook(step, result)`` is called after every applied step; a truthy
    return value stops training early.
    """
    if not samples:
        raise ValueError("train: empty dataset")
    scene_preset = scene_preset or SCENE_PRESETS.get(config.preset, SCENE_PRESETS["tiny"])
    if model is None:
        model = VertexSequenceModel(MODEL_PRESETS[config.preset], seed=config.seed)
    opt = T.AdamW(model.params, learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rng = make_rng(config.seed)
    dropout_rng = np.random.Generator(np.random.PCG64([config.seed, 1]))
    batches = _batches(rng, len(samples), config.batch_size)
    result = TrainResult(model, opt)
    consecutive = 0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for step in range(1, config.max_steps + 1):
        idx = next(batches)
        batch = [samples[i] for i in idx]
        if config.augment:
            batch = [apply_augment(s, draw_augment(rng), scene_preset) for s in batch]
        opt.learning_rate = config.learning_rate_at(step)
        step_config = config
        if config.lambda_p_at(step) != config.lambda_p:
            step_config = dataclasses.replace(config, lambda_p=config.lambda_p_at(step))
        try:
            res = train_step(model, opt, batch, step_config, dropout_rng)
        except FloatingPointError as exc:
            consecutive += 1
            result.skipped_steps += 1
            log.warning("step %d skipped: %s", step, exc)
            result.curve.append({"step": step, "loss": "nan", "detection": "nan", "permutation": "nan",
                                 "token_accuracy": "nan", "learning_rate": opt.learning_rate, "skipped": 1})
            if consecutive >= MAX_CONSECUTIVE_NONFINITE:
                raise TrainingDivergedError(f"{consecutive} consecutive non-finite steps at step {step}") from exc
            continue
        consecutive = 0
        result.curve.append({"step": step, "loss": res.loss, "detection": res.detection,
                             "permutation": res.permutation, "token_accuracy": res.token_accuracy,
                             "learning_rate": opt.learning_rate, "skipped": 0})
        if config.log_interval and step % config.log_interval == 0:
            log.info("step %d loss %.4f det %.4f perm %.4f acc %.4f", step, res.loss, res.detection,
                     res.permutation, res.token_accuracy)
        if out_dir and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            save_model(os.path.join(out_dir, f"checkpoint_{step:06d}.ckpt"), model, opt,
                       {"train_config": config.to_dict(), "scene_preset": scene_preset.to_dict(), "step": step})
        if step_hook is not None and step_hook(step, res):
            break
    if out_dir:
        save_model(os.path.join(out_dir, "model.ckpt"), model, opt,
                   {"train_config": config.to_dict(), "scene_preset": scene_preset.to_dict(),
                    "step": len(result.curve)})
        write_curve(result.curve, os.path.join(out_dir, "curve.csv"))
    return result


def write_curve(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def teacher_forced_accuracy(model: VertexSequenceModel, samples: list[SceneSample], batch_size: int = 16) -> float:
    hits = total = 0
    for i in range(0, len(samples), batch_size):
        images, tokens, _ = stack_batch(samples[i:i + batch_size])
        logits, _ = model.decode_teacher_forced(model.encode(images), tokens)
        hits += int(np.sum(logits.values.argmax(-1) == tokens[:, 1:]))
        total += tokens[:, 1:].size
    return hits / total


# -- inference --------------------------------------------------------------------

def _check_image(model: VertexSequenceModel, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    size = model.config.image_size
    if image.shape != (size, size, model.config.channels):
        raise ValueError(f"expected an image of shape ({size}, {size}, {model.config.channels}), got {image.shape}")
    return image


def predict_batch(model: VertexSequenceModel, images: list[np.ndarray], mode: str = "building",
                  stats: Counter | None = None) -> list:
    """Autoregressive decoding, matching scores, Hungarian assignment, ring (or graph) recovery.

    Assignment runs over the decoded vertices only; padding slots take no part.
    """
    stats = stats if stats is not None else Counter()
    if not images:
        return []
    batch = np.stack([_check_image(model, im).transpose(2, 0, 1) for im in images])
    cfg = model.config
    grid = QuantizationGrid(cfg.image_size, cfg.image_size, cfg.n_bins)
    z = model.encode(batch)
    seqs, vfeat = model.decode_autoregressive(z, stats)
    _, _, scores = model.matching_scores(vfeat)
    out = []
    for b, seq in enumerate(seqs):
        verts = np.asarray(sequence_to_vertices(seq, grid, model.config.vocab, stats), dtype=np.float64).reshape(-1, 2)
        n = len(verts)
        perm = hungarian_assign(scores.values[b, :n, :n]) if n else np.zeros((0, 0), dtype=np.int64)
        if mode == "road":
            out.append(decode_road_graph(verts, perm, stats=stats))
        else:
            out.append(decode_rings(verts, perm, stats))
    return out


def predict_scene(model: VertexSequenceModel, image: np.ndarray, mode: str = "building",
                  stats: Counter | None = None):
    return predict_batch(model, [image], mode, stats)[0]


@dataclass
class PatchReport:
    origin: tuple[int, int]
    n_polygons: int
    n_vertices: int
    discarded: dict
    error: str | None = None


def infer_patched(model: VertexSequenceModel, tile: np.ndarray, patch_size: int | None = None,
                  overlap: float = 0.1) -> tuple[PolygonSet, list[PatchReport]]:
    """Patch-wise prediction over a large tile, translated to tile coordinates and merged."""
    tile = np.asarray(tile, dtype=np.float64)
    size = model.config.image_size
    patch_size = patch_size or size
    if patch_size != size:
        raise ValueError(f"patch size {patch_size} must equal the model input size {size}")
    h, w = tile.shape[:2]
    grid = tile_patches(w, h, patch_size, overlap)
    per_patch: list[PolygonSet] = []
    reports = []
    for x, y in grid.origins:
        stats = Counter()
        try:
            polys = predict_scene(model, tile[y:y + size, x:x + size], "building", stats)
        except (ValueError, FloatingPointError) as exc:
            # a failing patch is recorded and contributes nothing
            log.warning("patch at (%d, %d) failed: %s", x, y, exc)
            per_patch.append(PolygonSet())
            reports.append(PatchReport((x, y), 0, 0, dict(stats), str(exc)))
            continue
        per_patch.append(polys.translated(float(x), float(y)))
        reports.append(PatchReport((x, y), len(polys.shells), polys.n_vertices, dict(stats)))
    shells, holes, sources = [], {}, []
    for k, polys in enumerate(per_patch):
        for shell, hs in polys.polygons():
            if hs:
                holes[len(shells)] = list(hs)
            shells.append(shell)
            sources.append(k)
    return merge_union(PolygonSet(shells, holes), w, h, sources=sources), reports


# -- merging ---------------------------------------------------------------------

HOLE_AREA_LIMIT = 0.5


def _overlap_groups(masks: list[np.ndarray], boxes: list[tuple], sources) -> list[list[int]]:
    n = len(masks)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if sources is not None and sources[i] == sources[j]:
                continue
            (ax0, ay0, ax1, ay1), (bx0, by0, bx1, by1) = boxes[i], boxes[j]
            if ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0:
                continue
            if np.any(masks[i] & masks[j]):
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def _apply_hole_rule(polys: PolygonSet) -> PolygonSet:
    """Drop traced holes larger than half their shell (a gap between merged pieces, not a courtyard)."""
    holes = {}
    for i, shell in enumerate(polys.shells):
        kept = [h for h in polys.holes.get(i, []) if abs(h.area) <= HOLE_AREA_LIMIT * abs(shell.area)]
        if kept:
            holes[i] = kept
    return PolygonSet(list(polys.shells), holes)


def merge_union(polys: PolygonSet, width: int, height: int, sources=None, epsilon: float = 1.0) -> PolygonSet:
    """Merge polygons whose rasters overlap; untouched polygons pass through unchanged.

    With ``sources`` (one label per polygon) only polygons from different
    sources are merged. Output order follows the first member of each group.
    """
    items = list(polys.polygons())
    if not items:
        return PolygonSet()
    masks, boxes = [], []
    for shell, hs in items:
        masks.append(rasterize_polygon(shell, hs, width, height))
        ys, xs = np.nonzero(masks[-1])
        boxes.append((xs.min(), ys.min(), xs.max(), ys.max()) if len(xs) else (1, 1, 0, 0))
    out_shells: list[PolygonRing] = []
    out_holes: dict[int, list[PolygonRing]] = {}
    for group in _overlap_groups(masks, boxes, sources):
        if len(group) == 1:
            shell, hs = items[group[0]]
            if hs:
                out_holes[len(out_shells)] = list(hs)
            out_shells.append(shell)
            continue
        union = np.zeros((height, width), dtype=bool)
        for i in group:
            union |= masks[i]
        traced = _apply_hole_rule(mask_to_polygons(union, epsilon))
        for shell, hs in traced.polygons():
            if hs:
                out_holes[len(out_shells)] = list(hs)
            out_shells.append(shell)
    return PolygonSet(out_shells, out_holes)


# -- evaluation --------------------------------------------------------------------

@dataclass
class EvaluationResult:
    reports: list[MetricsReport]
    summary: MetricsReport
    missing_predictions: list[str] = field(default_factory=list)
    unexpected_predictions: list[str] = field(default_factory=list)


def evaluate(pred: list[LoadedScene], gt: list[LoadedScene], json_path: str | None = None,
             csv_path: str | None = None) -> EvaluationResult:
    """Per-scene and aggregate metrics; scenes present on one side only are listed and skipped."""
    pred_by_id = {s.scene_id: s for s in pred}
    gt_ids = [s.scene_id for s in gt]
    missing = [i for i in gt_ids if i not in pred_by_id]
    unexpected = sorted(set(pred_by_id) - set(gt_ids))
    for sid in missing:
        log.warning("no prediction for scene %s; skipped", sid)
    for sid in unexpected:
        log.warning("prediction for unknown scene %s; skipped", sid)
    reports, counts = [], []
    for g in gt:
        if g.scene_id not in pred_by_id:
            continue
        p = pred_by_id[g.scene_id]
        rep, cnt = evaluate_scene(p.polygons or PolygonSet(), g.polygons or PolygonSet(), g.width, g.height,
                                  g.scene_id)
        reports.append(rep)
        counts.append(cnt)
    summary = aggregate(reports, counts)
    if json_path and csv_path:
        write_reports(reports, summary, json_path, csv_path)
        if missing or unexpected:
            base = os.path.splitext(json_path)[0]
            write_json(base + "_mismatches.json", {"missing_predictions": missing,
                                                   "unexpected_predictions": unexpected})
    return EvaluationResult(reports, summary, missing, unexpected)


def predict_scenes(model: VertexSequenceModel, scenes, batch_size: int = 16) -> list[LoadedScene]:
    out = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        preds = predict_batch(model, [s.image for s in chunk])
        for s, p in zip(chunk, preds):
            h, w = s.image.shape[:2]
            out.append(LoadedScene(s.scene_id, None, p, w, h))
    return out


def fit_report(model: VertexSequenceModel, samples: list[SceneSample], batch_size: int = 16) -> dict:
    """Teacher-forced accuracy plus autoregressive polygon quality against the samples' GT.

    ``mean_iou`` averages per-scene IoU; ``pooled_iou`` pools pixel counts; ``polis``
    averages over scenes that have at least one matched pair.
    """
    preds = predict_scenes(model, samples, batch_size)
    result = evaluate(preds, [LoadedScene(s.scene_id, None, s.polygons, s.image.shape[1], s.image.shape[0])
                              for s in samples])
    polis = [r.polis for r in result.reports if r.polis is not None]
    return {
        "token_accuracy": teacher_forced_accuracy(model, samples, batch_size),
        "mean_iou": float(np.mean([r.iou for r in result.reports])),
        "pooled_iou": result.summary.iou,
        "polis": float(np.mean(polis)) if polis else None,
        "n_ratio": result.summary.n_ratio,
    }


def load_trained(path: str) -> tuple[VertexSequenceModel, dict]:
    return load_model(path)


__all__ = [
    "TrainConfig", "TrainingDivergedError", "parse_config_text", "load_config", "write_config",
    "train", "train_step", "loss_terms", "TrainResult", "write_curve", "teacher_forced_accuracy",
    "predict_batch", "predict_scene", "predict_scenes", "infer_patched", "PatchReport", "merge_union",
    "evaluate", "EvaluationResult", "fit_report", "load_trained"
]
