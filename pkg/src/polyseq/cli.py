"""Command-line entry point: generate, train, infer, eval, merge."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter

from .data import (PRESETS, CocoFormatError, LoadedScene, coco_document, generate_dataset, load_coco,
                   load_dataset, load_png, save_dataset, write_json)
from .graph import PolygonSet
from .pipeline import (evaluate, infer_patched, load_config, load_trained, merge_union, predict_scene,
                       train)

log = logging.getLogger("polyseq")


def _write_predictions(scenes: list[LoadedScene], path: str, image_files: dict | None = None) -> None:
    doc = coco_document(scenes, image_files)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_json(path, doc)


def cmd_generate(args) -> int:
    preset = PRESETS[args.preset]
    stats = Counter()
    samples, manifest = generate_dataset(preset, args.seed, args.count, args.split, stats)
    save_dataset(samples, manifest, args.out)
    if stats:
        log.info("generation: %s", dict(stats))
    print(f"wrote {len(samples)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    samples, manifest = load_dataset(args.data)
    if manifest.preset.name != config.preset and config.preset not in manifest.preset.name:
        log.warning("dataset preset %s differs from model preset %s", manifest.preset.name, config.preset)
    result = train(config, samples, manifest.preset, out_dir=args.out)
    print(f"trained {len(result.curve)} steps ({result.skipped_steps} skipped); model at "
          f"{os.path.join(args.out, 'model.ckpt')}")
    return 0


def _infer_one(model, image, scene_id, args):
    if args.tile:
        polys, reports = infer_patched(model, image, args.patch_size, args.overlap)
        return polys, [{"scene_id": scene_id, "origin": list(r.origin), "n_polygons": r.n_polygons,
                        "n_vertices": r.n_vertices, "discarded": r.discarded, "error": r.error} for r in reports]
    stats = Counter()
    polys = predict_scene(model, image, stats=stats)
    if stats:
        log.info("%s decoding: %s", scene_id, dict(stats))
    return polys, []


def cmd_infer(args) -> int:
    """Predict one PNG, or every image of a COCO annotations file."""
    model, _ = load_trained(args.checkpoint)
    if args.image.endswith(".json"):
        scenes = load_coco(args.image)
        root = os.path.dirname(os.path.abspath(args.image))
        inputs = []
        for s in scenes:
            if s.image is None:
                raise FileNotFoundError(f"image for scene {s.scene_id} not found next to {args.image}")
            inputs.append((s.scene_id, s.image))
        files = {s.scene_id: os.path.relpath(os.path.join(root, f"{s.scene_id}.png"),
                                             os.path.dirname(os.path.abspath(args.out))) for s in scenes}
    else:
        scene_id = os.path.splitext(os.path.basename(args.image))[0]
        inputs = [(scene_id, load_png(args.image))]
        files = {scene_id: os.path.relpath(os.path.abspath(args.image), os.path.dirname(os.path.abspath(args.out)))}
    out, patch_rows = [], []
    for scene_id, image in inputs:
        polys, rows = _infer_one(model, image, scene_id, args)
        patch_rows.extend(rows)
        out.append(LoadedScene(scene_id, None, polys, image.shape[1], image.shape[0]))
    _write_predictions(out, args.out, files)
    if args.tile:
        write_json(os.path.splitext(args.out)[0] + "_patches.json", patch_rows)
    n = sum(len(s.polygons.shells) for s in out)
    print(f"{n} polygons over {len(out)} images written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = load_coco(args.pred, load_images=False)
    gt = load_coco(args.gt, load_images=False)
    os.makedirs(args.out, exist_ok=True)
    res = evaluate(pred, gt, os.path.join(args.out, "metrics.json"), os.path.join(args.out, "metrics.csv"))
    print(json.dumps(res.summary.to_dict(), sort_keys=True))
    if res.missing_predictions or res.unexpected_predictions:
        print(f"skipped {len(res.missing_predictions)} scenes without predictions and "
              f"{len(res.unexpected_predictions)} unknown predicted scenes", file=sys.stderr)
    return 0


def cmd_merge(args) -> int:
    scenes = load_coco(args.inp, load_images=False)
    out = []
    for s in scenes:
        merged = merge_union(s.polygons or PolygonSet(), s.width, s.height, epsilon=args.epsilon)
        out.append(LoadedScene(s.scene_id, None, merged, s.width, s.height))
    _write_predictions(out, args.out)
    print(f"merged {len(out)} scenes into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="polyseq", description="Polygon extraction by vertex sequences.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--split", default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict polygons for a PNG image or a COCO dataset's images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--tile", action="store_true", help="split a large image into overlapping patches")
    i.add_argument("--patch-size", type=int, default=None)
    i.add_argument("--overlap", type=float, default=0.1)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="union overlapping polygons")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--epsilon", type=float, default=1.0)
    m.set_defaults(func=cmd_merge)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CocoFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
