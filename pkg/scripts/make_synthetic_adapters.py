#!/usr/bin/env python3
"""Generate synthetic LoRA adapter checkpoints for demos and experiments.

Writes N aligned adapter files (plus an optional base checkpoint and a
manifest) into a directory, ready for the domerge CLI:

    python scripts/make_synthetic_adapters.py --out-dir /tmp/adapters
    domerge merge /tmp/adapters/adapter0.safetensors \
        /tmp/adapters/adapter1.safetensors --output /tmp/merged.safetensors
"""

import argparse
import json
from pathlib import Path

import numpy as np

from domerge import TensorRecord, save_checkpoint


def build_layer_keys(layers: int) -> list[str]:
    keys = []
    for i in range(layers):
        block = f"model.blocks.{i // 2}"
        keys.append(f"{block}.attn.q" if i % 2 == 0 else f"{block}.ffn.up")
    return keys


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", type=Path, required=True)
    parser.add_argument("--adapters", type=int, default=3)
    parser.add_argument("--layers", type=int, default=4)
    parser.add_argument("--rank", type=int, default=4)
    parser.add_argument("--rows", type=int, default=32)
    parser.add_argument("--cols", type=int, default=24)
    parser.add_argument("--dtype", choices=("f64", "f32", "f16", "bf16"), default="f32")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--with-base", action="store_true", help="also write base.safetensors")
    args = parser.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    keys = build_layer_keys(args.layers)
    manifest = []
    for i in range(args.adapters):
        rng = np.random.default_rng((args.seed, i))
        records = {}
        for key in keys:
            b = rng.standard_normal((args.rows, args.rank))
            a = rng.standard_normal((args.rank, args.cols))
            bk, ak = f"{key}.lora_B.weight", f"{key}.lora_A.weight"
            records[bk] = TensorRecord.from_array(bk, b, args.dtype)
            records[ak] = TensorRecord.from_array(ak, a, args.dtype)
        path = args.out_dir / f"adapter{i}.safetensors"
        save_checkpoint(records, path)
        manifest.append({"path": path.name, "name": f"adapter{i}", "scaling": 1.0})
        print(f"wrote {path}")

    if args.with_base:
        rng = np.random.default_rng((args.seed, int.from_bytes(b"base", "big")))
        records = {}
        for key in keys:
            k = key + ".weight"
            records[k] = TensorRecord.from_array(
                k, rng.standard_normal((args.rows, args.cols)), args.dtype
            )
        path = args.out_dir / "base.safetensors"
        save_checkpoint(records, path)
        print(f"wrote {path}")

    manifest_path = args.out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {manifest_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
