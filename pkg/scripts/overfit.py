"""Overfit the tiny model on a handful of scenes and report fit quality.

    python scripts/overfit.py --scenes 16 --steps 5000 --out runs/overfit
"""
from __future__ import annotations

import argparse
import json
import logging
import os

from polyseq.data import PRESETS, generate_dataset
from polyseq.model import PRESETS as MODEL_PRESETS, VertexSequenceModel, save_model
from polyseq.pipeline import TrainConfig, fit_report, train, write_curve

# fit targets for the overfit check
MIN_TOKEN_ACCURACY = 0.99
MIN_MEAN_IOU = 0.90
MAX_POLIS = 1.5


def fitted(rep: dict) -> bool:
    return (rep["token_accuracy"] >= MIN_TOKEN_ACCURACY and rep["mean_iou"] >= MIN_MEAN_IOU
            and rep["polis"] is not None and rep["polis"] <= MAX_POLIS)


def run(scenes=16, steps=5000, eval_every=500, seed=0, lr=4e-4, schedule="cosine", warmup=100,
        stop_when_fit=False, out=None, perm_start=500):
    """Train, evaluating every ``eval_every`` steps; returns (model, history)."""
    preset = PRESETS["tiny"]
    samples, _ = generate_dataset(preset, seed, scenes)
    cfg = TrainConfig(max_steps=steps, batch_size=scenes, seed=seed, learning_rate=lr, lr_schedule=schedule,
                      warmup_steps=warmup, perm_start_step=perm_start, checkpoint_interval=0, log_interval=100)
    model = VertexSequenceModel(MODEL_PRESETS["tiny"], seed=seed)
    history = []

    def hook(step, _res):
        if step % eval_every and step != steps:
            return False
        rep = {"step": step, **fit_report(model, samples)}
        history.append(rep)
        logging.info(json.dumps(rep))
        return stop_when_fit and fitted(rep)

    res = train(cfg, samples, preset, model=model, step_hook=hook)
    if out:
        os.makedirs(out, exist_ok=True)
        save_model(os.path.join(out, "model.ckpt"), res.model, res.optimizer)
        write_curve(res.curve, os.path.join(out, "curve.csv"))
        with open(os.path.join(out, "report.json"), "w") as fh:
            json.dump(history, fh, indent=1)
    return res.model, history


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=16)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--eval-every", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=4e-4)
    ap.add_argument("--schedule", default="cosine")
    ap.add_argument("--warmup", type=int, default=100)
    ap.add_argument("--perm-start", type=int, default=500, help="steps trained on the detection loss alone")
    ap.add_argument("--stop-when-fit", action="store_true", help="stop at the first evaluation meeting the targets")
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run(args.scenes, args.steps, args.eval_every, args.seed, args.lr, args.schedule, args.warmup,
        args.stop_when_fit, args.out, args.perm_start)


if __name__ == "__main__":
    main()
