"""Inference speed of the full path (resize, forward, postprocess, upsample).

    python scripts/fps.py --layers 1 2 3 --shorter 640 --longest 853
"""
import argparse

import torch

from shadowpairs.evaluation import measure_fps, model_runner
from shadowpairs.experiments import DESK_MODEL
from shadowpairs.features import ExtractorConfig
from shadowpairs.model import ModelConfig, PairDetector
from shadowpairs.synthetic import generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--layers", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--channels", type=int, default=DESK_MODEL.extractor.channel_count)
    p.add_argument("--shorter", type=int, default=640)
    p.add_argument("--longest", type=int, default=853)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--warmup", type=int, default=5)
    args = p.parse_args()
    torch.set_num_threads(1)  # the measured path runs single-threaded
    images = [s.image for s in generate_dataset(seed=0, n=args.samples)]
    for layers in args.layers:
        ext = ExtractorConfig(**{**DESK_MODEL.extractor.__dict__, "channel_count": args.channels})
        model = PairDetector(ModelConfig(extractor=ext, num_layers=layers, n_activation=DESK_MODEL.n_activation, n_auxiliary=DESK_MODEL.n_auxiliary))
        rep = measure_fps(model_runner(model, args.shorter, args.longest), images, warmup=args.warmup)
        print(f"layers={layers}  {rep.fps:7.2f} fps  ({1000 * rep.mean_seconds:.1f} +- {1000 * rep.std_seconds:.1f} ms over {rep.samples} images)")


if __name__ == "__main__":
    main()
