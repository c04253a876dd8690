"""
Operator entry point.

    python keyreid.py synth-data --ids 8 --cams 2 --out ./data --seed 1
    python keyreid.py train --config desk.toml --data ./data --out ./run1
    python keyreid.py eval --checkpoint ./run1/last.ckpt --data ./data --out ./run1/eval
    python keyreid.py embed --checkpoint ./run1/last.ckpt --data ./data --split gallery --out gallery.bin
    python keyreid.py inspect-heatmaps --data ./data --key p0000_c0_t0 --out ./heatmaps
    python keyreid.py report --runs ./runs --out ablation.csv

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import json
import os
import sys

import pandas as pd

import numerics as nm
from backbone import PatchLayout
from checkpoint import file_hash, load_checkpoint, prefixed
from config import RunConfig, UsageParser, add_config_arguments, resolve
from data_model import MANIFEST_NAME, load_dataset
from errors import ConfigError, GalleryError, KeyReIdError
from logs import log, setup_logging
from model import build_model
from pose_parts import PartGrouping
from retrieval import evaluate_galleries, load_gallery, pairwise_distances, save_gallery, split_gallery
from synth_constructor import generate_synthetic_dataset
from training import ablation_report, find_runs, fit
from visualize import dump_attention, dump_heatmaps, dump_ranking

REPORT_RANKS = (1, 5, 10, 20)


def positive_int(value):
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{value}' is not an integer") from None
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def manifest_path(data):
    return os.path.join(data, MANIFEST_NAME) if os.path.isdir(data) else data


def load_model(checkpoint):
    """Rebuild the model a checkpoint was saved from; returns (model, run_config, header)."""
    header, arrays = load_checkpoint(checkpoint)
    run_config = RunConfig.from_dict(header["config"]).validate()
    nm.set_default_dtype(run_config.train.precision)
    model = build_model(run_config, header["num_classes"], header["num_cameras"], seed=run_config.train.seed)
    model.load_state_dict(prefixed(arrays, "model"))
    model.eval()
    return model, run_config, header


def load_split_data(data, run_config):
    return load_dataset(manifest_path(data), size=(run_config.data.height, run_config.data.width),
                        num_joints=run_config.data.num_joints)


def cmd_synth_data(args):
    setup_logging(args.out)
    _, path = generate_synthetic_dataset(args.ids, args.cams, args.tracklets, args.frames, args.height, args.width,
                                         args.seed, out_dir=args.out)
    log(f"synthetic dataset written to {path}")
    return 0


def cmd_train(args):
    run_config = resolve(args, extra={"train.epochs": args.epochs, "train.seed": args.seed})
    setup_logging(args.out)
    log(f"effective config: {run_config.dumps()}")
    dataset = load_split_data(args.data, run_config)
    state = fit(run_config, dataset, args.out, resume=args.resume)
    log(f"training finished at epoch {state.epoch}, step {state.step}; best Rank-1 {state.best_metric:.4f}")
    return 0


def _query_index(ref, queries):
    if ref.startswith("q") and ref[1:].isdigit():
        index = int(ref[1:])
        if index >= len(queries):
            raise GalleryError(f"query {ref} out of range ({len(queries)} queries)")
        return index
    for i, t in enumerate(queries):
        if t.key == ref:
            return i
    raise GalleryError(f"no query tracklet {ref!r}")


def print_metrics(result):
    ranks = [k for k in REPORT_RANKS if k <= len(result.cmc)]
    table = pd.DataFrame([{"mAP": result.mAP, **{f"Rank-{k}": result.rank(k) for k in ranks}}])
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))


def cmd_eval(args):
    os.makedirs(args.out, exist_ok=True)
    setup_logging(args.out, filename="eval.log")
    model, run_config, _ = load_model(args.checkpoint)
    digest = file_hash(args.checkpoint)
    dataset = load_split_data(args.data, run_config)
    max_rank = args.max_rank or run_config.eval.max_rank
    queries = split_gallery(model, dataset.tracklets("query"), run_config.eval.batch_size, digest)
    if args.gallery:
        gallery = load_gallery(args.gallery, expected_width=queries.width, checkpoint_hash=digest)
    else:
        gallery = split_gallery(model, dataset.tracklets("gallery"), run_config.eval.batch_size, digest)
    result = evaluate_galleries(queries, gallery, max_rank)
    print_metrics(result)
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump(result.to_dict(), f, indent=1)

    if args.dump_ranking:
        query_tracklets = dataset.tracklets("query")
        gallery_by_key = {t.key: t for t in dataset.all_tracklets()}
        missing = [k for k in gallery.keys if k not in gallery_by_key]
        if missing:
            raise GalleryError(f"gallery entries {missing[:3]} are not in the dataset, cannot draw them")
        q = _query_index(args.dump_ranking, query_tracklets)
        dist = pairwise_distances(queries.features[q:q + 1], gallery.features)[0]
        path = os.path.join(args.out, f"ranking_{query_tracklets[q].key}.png")
        dump_ranking(query_tracklets[q], [gallery_by_key[k] for k in gallery.keys], dist, path, args.top)
        log(f"ranking strip written to {path}")
    if args.dump_attention:
        record = dump_attention(model, dataset.find(args.dump_attention),
                                os.path.join(args.out, f"attention_{args.dump_attention}"))
        log(f"attention of {args.dump_attention}: {record['alpha']}")
    return 0


def cmd_embed(args):
    setup_logging()
    model, run_config, _ = load_model(args.checkpoint)
    dataset = load_split_data(args.data, run_config)
    tracklets = dataset.tracklets(args.split)
    if not tracklets:
        raise GalleryError(f"no tracklets in split '{args.split}'")
    gallery = split_gallery(model, tracklets, run_config.eval.batch_size, file_hash(args.checkpoint))
    save_gallery(gallery, args.out)
    log(f"{len(gallery)} descriptors of width {gallery.width} written to {args.out}")
    return 0


def cmd_inspect_heatmaps(args):
    run_config = resolve(args)
    setup_logging()
    dataset = load_split_data(args.data, run_config)
    tracklet = dataset.find(args.key)
    layout = PatchLayout(run_config.data.height, run_config.data.width,
                         run_config.backbone.patch, run_config.backbone.stride)
    grouping = PartGrouping.from_config(run_config.parts)
    paths = dump_heatmaps(tracklet, args.out, layout, grouping, run_config.parts.sigma_for(layout.H),
                          run_config.parts.conf_threshold, run_config.backbone.T)
    log(f"{len(paths)} heatmaps written to {args.out}")
    return 0


def cmd_report(args):
    setup_logging()
    run_dirs = [d for root in args.runs for d in find_runs(root)]
    table = ablation_report(run_dirs, tolerance=args.tolerance)
    print(table.to_string(index=False))
    if args.out:
        table.to_csv(args.out, index=False)
        log(f"report written to {args.out}")
    contradicting = table.loc[table["contradicts_full"], "variant"].tolist()
    if contradicting:
        log(f"finding: {', '.join(contradicting)} beat the full model by more than {args.tolerance}")
    return 0


def build_parser():
    parser = UsageParser(prog="keyreid", description="Keypoint-guided video person re-identification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic tracklet dataset")
    p.add_argument("--ids", type=positive_int, default=8, help="identities (default: 8)")
    p.add_argument("--cams", type=positive_int, default=2, help="cameras (default: 2)")
    p.add_argument("--tracklets", type=positive_int, default=2, help="tracklets per id and camera (default: 2)")
    p.add_argument("--frames", type=positive_int, default=8, help="frames per tracklet (default: 8)")
    p.add_argument("--height", type=positive_int, default=64, help="frame height (default: 64)")
    p.add_argument("--width", type=positive_int, default=32, help="frame width (default: 32)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int, default=None, help="shortcut for --train.epochs")
    p.add_argument("--seed", type=int, default=None, help="shortcut for --train.seed")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    add_config_arguments(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the query/gallery split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", default="eval", help="output directory (default: eval)")
    p.add_argument("--gallery", default=None, help="gallery file written by `embed` (default: embed the split)")
    p.add_argument("--max-rank", type=positive_int, default=None, help="CMC length (default: eval.max_rank)")
    p.add_argument("--dump-ranking", default=None, metavar="QUERY", help="query key or qN index to draw")
    p.add_argument("--top", type=positive_int, default=10, help="gallery entries in the strip (default: 10)")
    p.add_argument("--dump-attention", default=None, metavar="KEY", help="tracklet to dump attention for")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="write the gallery file of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--split", default="gallery", choices=["train", "query", "gallery"])
    p.add_argument("--out", required=True, help="gallery file")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("inspect-heatmaps", help="draw joint/part heatmaps of one tracklet")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--key", required=True, help="tracklet key (its directory in the manifest)")
    p.add_argument("--out", required=True, help="output directory")
    add_config_arguments(p)
    p.set_defaults(func=cmd_inspect_heatmaps)

    p = sub.add_parser("report", help="tabulate finished runs per ablation")
    p.add_argument("--runs", nargs="+", required=True, help="directories searched for training logs")
    p.add_argument("--out", default=None, help="CSV file")
    p.add_argument("--tolerance", type=float, default=0.02, help="mAP tolerance (default: 0.02)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"keyreid {args.command}: {e}", file=sys.stderr)
        return 1
    except (KeyReIdError, OSError) as e:
        print(f"keyreid {args.command}: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        log("stopped by user")
        return 2


if __name__ == "__main__":
    sys.exit(main())
