#!/usr/bin/env python3
"""Convert torchvision's pretrained VGG19 into an MCCW1 encoder file.

    python tools/convert_vgg19.py vgg19_encoder.mccw

Needs torch and torchvision. Only the convolutions up to conv4_1 are kept.
Point the `encoder` training key at the output to replace the random
stand-in.
"""

import struct
import sys

import torch
import torchvision

# index into vgg19().features for each convolution the encoder uses
LAYERS = {
    "conv1_1": 0,
    "conv1_2": 2,
    "conv2_1": 5,
    "conv2_2": 7,
    "conv3_1": 10,
    "conv3_2": 12,
    "conv3_3": 14,
    "conv3_4": 16,
    "conv4_1": 19,
}


def record(tag, tensor):
    values = tensor.detach().to(torch.float32).contiguous().cpu()
    out = struct.pack("<I", len(tag)) + tag.encode()
    out += struct.pack("<BI", 0, values.dim())
    out += b"".join(struct.pack("<Q", d) for d in values.shape)
    return out + values.numpy().astype("<f4").tobytes()


def main(path):
    weights = torchvision.models.VGG19_Weights.IMAGENET1K_V1
    features = torchvision.models.vgg19(weights=weights).features
    records = []
    for name, index in LAYERS.items():
        conv = features[index]
        records.append(record(f"encoder.{name}.weight", conv.weight))
        records.append(record(f"encoder.{name}.bias", conv.bias))
    with open(path, "wb") as f:
        f.write(b"MCCW1" + struct.pack("<I", len(records)) + b"".join(records))


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
