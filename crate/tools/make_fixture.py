#!/usr/bin/env python3
"""Train the small fixture CNN and export it as a model bundle + EvalSet.

The training data is scikit-learn's bundled 8x8 handwritten digits set, so no
network access is needed. Output layout (under --out):

    model/manifest.json + *.bin      model bundle (adfp-bundle/1)
    eval/eval.json + images.bin + labels.bin
    golden.json                      framework accuracy + logits of a fixed batch
"""

import argparse
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.datasets import load_digits

FORMAT_VERSION = "adfp-bundle/1"
EVAL_FORMAT_VERSION = "adfp-evalset/1"


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def write_blob(dirpath, name, array, dtype="<f4"):
    data = np.ascontiguousarray(array, dtype=dtype).tobytes()
    with open(os.path.join(dirpath, name), "wb") as f:
        f.write(data)
    return fnv1a64(data)


class FixtureNet(nn.Module):
    def __init__(self, widths=(16, 32, 32, 64), strides=(1, 2, 1, 2), classes=10):
        super().__init__()
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        cin = 1
        for w, s in zip(widths, strides):
            self.convs.append(nn.Conv2d(cin, w, 3, stride=s, padding=1, bias=False))
            self.bns.append(nn.BatchNorm2d(w, eps=1e-5))
            cin = w
        self.strides = strides
        self.fc = nn.Linear(cin, classes)

    def forward(self, x):
        for conv, bn in zip(self.convs, self.bns):
            x = F.relu(bn(conv(x)))
        x = x.mean(dim=(2, 3))
        return self.fc(x)


def export_model(net, dirpath, input_shape, classes):
    os.makedirs(dirpath, exist_ok=True)
    layers = []
    for i, (conv, bn) in enumerate(zip(net.convs, net.bns)):
        name = f"conv{i + 1}"
        checks = {}
        w = conv.weight.detach().numpy()
        blobs = {"weight": f"{name}.weight.bin"}
        checks[blobs["weight"]] = write_blob(dirpath, blobs["weight"], w)
        bn_entry = {"eps": float(bn.eps)}
        for key, tensor in (
            ("gamma", bn.weight),
            ("beta", bn.bias),
            ("mean", bn.running_mean),
            ("var", bn.running_var),
        ):
            fname = f"{name}.bn.{key}.bin"
            checks[fname] = write_blob(dirpath, fname, tensor.detach().numpy())
            bn_entry[key] = fname
        layers.append(
            {
                "kind": "conv",
                "name": name,
                "dims": list(w.shape),
                "stride": conv.stride[0],
                "padding": conv.padding[0],
                "activation": "relu",
                "blobs": blobs,
                "bn": bn_entry,
                "checksums": checks,
            }
        )
    layers.append({"kind": "global_avg_pool", "name": "gap"})
    layers.append({"kind": "flatten", "name": "flatten"})
    w = net.fc.weight.detach().numpy()
    b = net.fc.bias.detach().numpy()
    blobs = {"weight": "fc.weight.bin", "bias": "fc.bias.bin"}
    checks = {
        blobs["weight"]: write_blob(dirpath, blobs["weight"], w),
        blobs["bias"]: write_blob(dirpath, blobs["bias"], b),
    }
    layers.append(
        {
            "kind": "linear",
            "name": "fc",
            "dims": list(w.shape),
            "activation": "none",
            "blobs": blobs,
            "bn": None,
            "checksums": checks,
        }
    )
    c, h, wd = input_shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_classes": classes,
        "input": {"c": c, "h": h, "w": wd},
        "layers": layers,
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def export_evalset(dirpath, images, labels, classes, mean, std):
    os.makedirs(dirpath, exist_ok=True)
    n, c, h, w = images.shape
    img_sum = write_blob(dirpath, "images.bin", images)
    lab_sum = write_blob(dirpath, "labels.bin", labels, dtype="<u2")
    manifest = {
        "format_version": EVAL_FORMAT_VERSION,
        "n": n,
        "c": c,
        "h": h,
        "w": w,
        "num_classes": classes,
        "normalization": {"mean": [mean], "std": [std]},
        "images": {"blob": "images.bin", "checksum": img_sum},
        "labels": {"blob": "labels.bin", "checksum": lab_sum},
    }
    with open(os.path.join(dirpath, "eval.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def shift_augment(x, rng):
    # random +-1 pixel translations with zero fill
    out = torch.zeros_like(x)
    for i in range(x.shape[0]):
        dy, dx = rng.integers(-1, 2, size=2)
        src = x[i, :, max(0, -dy) : 8 - max(0, dy), max(0, -dx) : 8 - max(0, dx)]
        out[i, :, max(0, dy) : max(0, dy) + src.shape[1], max(0, dx) : max(0, dx) + src.shape[2]] = src
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="crates/core/fixtures/digits")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--eval-size", type=int, default=1000)
    ap.add_argument("--golden-batch", type=int, default=16)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    torch.set_num_threads(1)

    digits = load_digits()
    raw = digits.images.astype(np.float64) / 16.0
    labels = digits.target.astype(np.int64)
    perm = rng.permutation(len(raw))
    eval_idx, train_idx = perm[: args.eval_size], perm[args.eval_size :]

    mean = float(raw[train_idx].mean())
    std = float(raw[train_idx].std())
    norm = ((raw - mean) / std).astype(np.float32)[:, None, :, :]

    x_train = torch.from_numpy(norm[train_idx])
    y_train = torch.from_numpy(labels[train_idx])
    x_eval = torch.from_numpy(norm[eval_idx])
    y_eval = labels[eval_idx]

    net = FixtureNet()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3, weight_decay=5e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.epochs)
    for epoch in range(args.epochs):
        net.train()
        order = torch.from_numpy(rng.permutation(len(x_train)))
        for start in range(0, len(order), 64):
            idx = order[start : start + 64]
            xb = shift_augment(x_train[idx], rng)
            loss = F.cross_entropy(net(xb), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()

    net.eval()
    with torch.no_grad():
        logits = net(x_eval).numpy()
    acc = float((logits.argmax(axis=1) == y_eval).mean())
    print(f"framework accuracy on eval set: {acc:.4f}")

    export_model(net, os.path.join(args.out, "model"), (1, 8, 8), 10)
    export_evalset(
        os.path.join(args.out, "eval"),
        norm[eval_idx],
        y_eval.astype(np.uint16),
        10,
        mean,
        std,
    )
    golden = {
        "framework_accuracy": acc,
        "batch_indices": list(range(args.golden_batch)),
        "logits": [[float(v) for v in row] for row in logits[: args.golden_batch]],
    }
    with open(os.path.join(args.out, "golden.json"), "w") as f:
        json.dump(golden, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
