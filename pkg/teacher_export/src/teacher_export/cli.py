"""Command-line surface for the exporter."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backends import ToyBackend, make_backend
from .datasets import FolderDataset, make_toy_dataset, write_dataset_folder
from .export import export_dual, export_pairs, export_raw_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teacher-export")
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy-data", help="materialize the blob toy dataset")
    toy.add_argument("--out", required=True)
    toy.add_argument("--n", type=int, default=10)
    toy.add_argument("--seed", type=int, default=0)

    def common(p):
        p.add_argument("--model", default="toy",
                       help="'toy' or 'hf:<model-id>' (needs the hf extra)")
        p.add_argument("--dataset", required=True, help="dataset folder")
        p.add_argument("--split", default="all",
                       help="recorded in the manifest; folder datasets are one split")
        p.add_argument("--out", required=True)
        p.add_argument("--batch-size", type=int, default=16)

    dual = sub.add_parser("dual", help="export per-item dual-teacher embeddings")
    common(dual)
    dual.add_argument("--emit-raw", action="store_true",
                      help="also write student-facing raw features")

    pairs = sub.add_parser("pairs", help="export single-stream pair scores")
    common(pairs)
    pairs.add_argument("--pairs", default="dense",
                       help="'dense' or a file of 'image_id text_id' lines")
    return parser


def _load_pairs(spec: str):
    if spec == "dense":
        return "dense"
    return [tuple(int(v) for v in line.split())
            for line in Path(spec).read_text().splitlines() if line.strip()]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "toy-data":
        write_dataset_folder(make_toy_dataset(args.n, args.seed), args.out)
        print(f"toy dataset with {args.n} items written to {args.out}")
        return 0
    dataset = FolderDataset.load(args.dataset)
    backend = make_backend(args.model)
    if args.command == "dual":
        paths = export_dual(dataset, backend, args.out, args.batch_size)
        if args.emit_raw:
            if not isinstance(backend, ToyBackend):
                raise SystemExit("--emit-raw is only wired for the toy backend")
            paths.update(export_raw_features(dataset, backend, args.out))
        for name, path in paths.items():
            print(f"{name}: {path}")
        return 0
    if args.command == "pairs":
        paths = export_pairs(dataset, backend, args.out, _load_pairs(args.pairs),
                             args.batch_size)
        for name, path in paths.items():
            print(f"{name}: {path}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
