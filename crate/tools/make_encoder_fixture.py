#!/usr/bin/env python3
"""Regenerate tests/fixtures/torch_encoder_w4.mccw.

A VGG19-shaped encoder with base width 4 and random weights, run by torch
with reflection padding and ImageNet normalization. The file holds the
weights, an input image and the reference relu1_1..relu4_1 activations.
"""

import struct
import sys

import torch
import torch.nn.functional as F

WIDTH = 4
# (name, in, out); a None entry is a 2x2 max pool, a string after a conv tags its relu
PLAN = [
    ("conv1_1", 3, 1), "relu1_1", ("conv1_2", 1, 1), None,
    ("conv2_1", 1, 2), "relu2_1", ("conv2_2", 2, 2), None,
    ("conv3_1", 2, 4), "relu3_1", ("conv3_2", 4, 4), ("conv3_3", 4, 4), ("conv3_4", 4, 4), None,
    ("conv4_1", 4, 8), "relu4_1",
]


def record(tag, tensor):
    values = tensor.detach().to(torch.float32).contiguous()
    out = struct.pack("<I", len(tag)) + tag.encode()
    out += struct.pack("<BI", 0, values.dim())
    out += b"".join(struct.pack("<Q", d) for d in values.shape)
    return out + values.numpy().astype("<f4").tobytes()


def main(path):
    torch.manual_seed(0)
    records = []
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    x = torch.rand(1, 3, 24, 32)
    records.append(record("check.input", x))
    h = (x - mean) / std
    for step in PLAN:
        if step is None:
            h = F.max_pool2d(h, 2)
        elif isinstance(step, str):
            records.append(record(f"check.{step}", h))
        else:
            name, cin, cout = step
            cin = 3 if cin == 3 else cin * WIDTH
            cout *= WIDTH
            w = torch.randn(cout, cin, 3, 3) * (2.0 / (9 * cin)) ** 0.5
            b = torch.randn(cout) * 0.05
            records.append(record(f"encoder.{name}.weight", w))
            records.append(record(f"encoder.{name}.bias", b))
            h = F.relu(F.conv2d(F.pad(h, (1, 1, 1, 1), mode="reflect"), w, b))
    with open(path, "wb") as f:
        f.write(b"MCCW1" + struct.pack("<I", len(records)) + b"".join(records))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/torch_encoder_w4.mccw")
