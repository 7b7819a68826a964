#!/usr/bin/env python3
"""Export torchvision ImageNet weights as <model>.safetensors for --weights-dir.

Needs torch, torchvision and safetensors. Downloads the weights on first use
(into the usual torch hub cache). With --random the models keep their random
initialization, which is enough to check that names and shapes line up.
With --reference the models get a 2-way head and every export is paired with
<model>.reference.safetensors holding a fixed input batch and the eval-mode
logits torchvision computes for it; the ignored `torchvision_reference_logits`
test replays them.

    python scripts/export_torchvision_weights.py weights/
    ladi-flood train --weights-dir weights/ --model resnet101 ...
"""

import argparse
import pathlib

import torch
import torchvision.models as tvm
from safetensors.torch import save_file

MODELS = {
    "resnet34": (tvm.resnet34, tvm.ResNet34_Weights.IMAGENET1K_V1),
    "resnet50": (tvm.resnet50, tvm.ResNet50_Weights.IMAGENET1K_V1),
    "resnet101": (tvm.resnet101, tvm.ResNet101_Weights.IMAGENET1K_V1),
    "alexnet": (tvm.alexnet, tvm.AlexNet_Weights.IMAGENET1K_V1),
    "densenet161": (tvm.densenet161, tvm.DenseNet161_Weights.IMAGENET1K_V1),
    "mobilenetv2": (tvm.mobilenet_v2, tvm.MobileNet_V2_Weights.IMAGENET1K_V1),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--models", nargs="*", default=list(MODELS), choices=list(MODELS))
    ap.add_argument("--random", action="store_true", help="skip the download and export random weights")
    ap.add_argument("--reference", action="store_true", help="random 2-way models plus reference logits")
    args = ap.parse_args()
    torch.manual_seed(0)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name in args.models:
        ctor, weights = MODELS[name]
        if args.reference:
            model = ctor(weights=None, num_classes=2).eval()
        else:
            model = ctor(weights=None if args.random else weights)
        state = {
            k: v.detach().to(torch.float32).contiguous()
            for k, v in model.state_dict().items()
            if not k.endswith("num_batches_tracked")
        }
        if args.reference:
            # non-trivial batch-norm statistics so eval mode is exercised
            for k, v in state.items():
                if k.endswith("running_var"):
                    v.uniform_(0.5, 2.0)
                elif k.endswith("running_mean"):
                    v.normal_(0.0, 0.1)
            model.load_state_dict(state, strict=False)
            xs = torch.randn(2, 3, 96, 96)
            with torch.no_grad():
                logits = model(xs)
            save_file({"input": xs, "logits": logits}, str(args.out_dir / f"{name}.reference.safetensors"))
        path = args.out_dir / f"{name}.safetensors"
        save_file(state, str(path))
        n = sum(p.numel() for p in model.parameters())
        print(f"{name}: {len(state)} tensors, {n} parameters -> {path}")


if __name__ == "__main__":
    main()
