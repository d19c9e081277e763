#!/usr/bin/env python3
"""Export torchvision backbone weights into the protomsl tensor archive format.

    python3 tools/export_torchvision_weights.py --arch vgg19 --out vgg19.pmsl
    protomsl train --backbone vgg19 --pretrained vgg19.pmsl ...

With --random-init no download happens; together with --parity the script also
writes a reference input/output pair used by the parity test.
"""

import argparse
import json
import struct
import sys

import numpy as np
import torch
import torchvision

MAGIC = b"PMSLARCH"
CONTAINER_VERSION = 1


def write_archive(path, tensors, meta):
    header = {"meta": meta, "tensors": []}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        header["tensors"].append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CONTAINER_VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def build(arch, random_init, seed):
    torch.manual_seed(seed)
    if arch == "vgg19":
        model = torchvision.models.vgg19(weights=None if random_init else "IMAGENET1K_V1")
        feature_net = model.features
        prefix = "features."
    elif arch == "resnet18":
        model = torchvision.models.resnet18(weights=None if random_init else "IMAGENET1K_V1")
        feature_net = torch.nn.Sequential(*list(model.children())[:-2])
        prefix = ""
    else:
        raise SystemExit(f"unsupported arch {arch}")
    if random_init:
        # non-trivial batch-norm statistics so the parity check exercises them
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.data.uniform_(0.5, 1.5)
                m.bias.data.uniform_(-0.2, 0.2)
    model.eval()
    state = {}
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked") or name.startswith("fc.") or name.startswith("classifier."):
            continue
        if not name.startswith(prefix):
            continue
        state[name] = t.detach().cpu().numpy()
    return feature_net, state


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--arch", required=True, choices=["vgg19", "resnet18"])
    ap.add_argument("--out", required=True)
    ap.add_argument("--random-init", action="store_true", help="skip the ImageNet download")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--parity", help="also write a reference input/output archive here")
    ap.add_argument("--parity-size", type=int, default=64)
    args = ap.parse_args(argv)

    feature_net, state = build(args.arch, args.random_init, args.seed)
    write_archive(args.out, state, {"arch": args.arch, "source": "torchvision " + torchvision.__version__,
                                    "random_init": args.random_init})
    print(f"{len(state)} tensors written to {args.out}")

    if args.parity:
        x = torch.randn(1, 3, args.parity_size, args.parity_size, generator=torch.Generator().manual_seed(args.seed + 1))
        with torch.no_grad():
            y = feature_net(x)
        write_archive(args.parity, {"input": x.numpy(), "output": y.numpy()}, {"arch": args.arch})
        print(f"reference output {tuple(y.shape)} written to {args.parity}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
