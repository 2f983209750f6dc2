#!/usr/bin/env python3
"""Export torchvision ImageNet backbones to safetensors for featimit.

    python scripts/export_torchvision_weights.py wide_resnet50 resnet50
    python scripts/export_torchvision_weights.py resnet18 --random --out /tmp/w

Files land in $FEATIMIT_WEIGHTS_DIR (default ~/.cache/featimit) as
<arch>.safetensors, which is where `weights: registry` looks.
"""

import argparse
import os
from pathlib import Path

import torch
import torchvision

ARCHS = {
    "resnet18": ("resnet18", "ResNet18_Weights"),
    "resnet50": ("resnet50", "ResNet50_Weights"),
    "wide_resnet50": ("wide_resnet50_2", "Wide_ResNet50_2_Weights"),
}


def default_dir() -> Path:
    env = os.environ.get("FEATIMIT_WEIGHTS_DIR")
    return Path(env) if env else Path.home() / ".cache" / "featimit"


def export(arch: str, out: Path, random: bool) -> Path:
    ctor_name, weights_name = ARCHS[arch]
    ctor = getattr(torchvision.models, ctor_name)
    weights = None if random else getattr(torchvision.models, weights_name).IMAGENET1K_V1
    model = ctor(weights=weights).eval()
    tensors = {
        k: v.detach().to(torch.float32).contiguous()
        for k, v in model.state_dict().items()
        if v.is_floating_point()
    }
    from safetensors.torch import save_file

    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{arch}.safetensors"
    save_file(tensors, str(path), metadata={"source": f"torchvision.{ctor_name}"})
    return path


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("arch", nargs="+", choices=sorted(ARCHS))
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--random", action="store_true", help="skip the download; random init")
    args = p.parse_args()
    out = args.out or default_dir()
    for arch in args.arch:
        print(export(arch, out, args.random))


if __name__ == "__main__":
    main()
