"""Train the tiny model on 512 generated scenes and evaluate on 64 held-out ones.

    python scripts/generalize.py --out runs/generalize

Writes model.ckpt (the final weights), periodic checkpoints, curve.csv and
report.json with held-out metrics at every evaluation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import time

from polyseq.data import PRESETS, generate_dataset
from polyseq.model import PRESETS as MODEL_PRESETS, VertexSequenceModel
from polyseq.pipeline import TrainConfig, fit_report, train

TRAIN_SEED, HELD_OUT_SEED = 1, 2


def held_out(count=64):
    return generate_dataset(PRESETS["tiny"], HELD_OUT_SEED, count, split="test")[0]


def run(out, train_count=512, test_count=64, steps=10000, eval_every=1000, seed=0, lr=1e-3, warmup=500,
        batch_size=16, augment=True, perm_start=3000, weight_decay=1e-4,
        dropout=0.1):
    preset = PRESETS["tiny"]
    train_set, _ = generate_dataset(preset, TRAIN_SEED, train_count, split="train")
    test_set = held_out(test_count)
    cfg = TrainConfig(max_steps=steps, batch_size=batch_size, seed=seed, learning_rate=lr, lr_schedule="cosine",
                      warmup_steps=warmup, perm_start_step=perm_start, weight_decay=weight_decay, dropout=dropout,
                      checkpoint_interval=eval_every, log_interval=200, augment=augment)
    model = VertexSequenceModel(MODEL_PRESETS["tiny"], seed=seed)
    history = []
    start = time.perf_counter()

    def hook(step, _res):
        if step % eval_every and step != steps:
            return False
        rep = {"step": step, "elapsed_s": round(time.perf_counter() - start, 1), **fit_report(model, test_set)}
        history.append(rep)
        logging.info(json.dumps(rep))
        with open(os.path.join(out, "report.json"), "w") as fh:
            json.dump(history, fh, indent=1)
        return False

    os.makedirs(out, exist_ok=True)
    train(cfg, train_set, preset, out_dir=out, model=model, step_hook=hook)
    return model, history


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=512)
    ap.add_argument("--test", type=int, default=64)
    ap.add_argument("--steps", type=int, default=10000)
    ap.add_argument("--eval-every", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--warmup", type=int, default=500)
    ap.add_argument("--perm-start", type=int, default=3000, help="steps trained on the detection loss alone")
    ap.add_argument("--weight-decay", type=float, default=1e-4)
    ap.add_argument("--dropout", type=float, default=0.1)
    ap.add_argument("--no-augment", action="store_true")
    ap.add_argument("--out", default="runs/generalize")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run(args.out, args.train, args.test, args.steps, args.eval_every, args.seed, args.lr, args.warmup,
        augment=not args.no_augment, perm_start=args.perm_start, weight_decay=args.weight_decay,
        dropout=args.dropout)


if __name__ == "__main__":
    main()
