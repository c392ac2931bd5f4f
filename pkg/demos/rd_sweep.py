"""Trace a small rate-distortion curve by training one model per target rate.

Each model gets its own bit-rate target. The rate term pulls the model towards
that target. Short independent runs differ from each other by more than their
rates separate them. So the sweep trains one base model at the top rate and
fine-tunes a copy of it for every target. Every model then codes the same
held-out images, and we tabulate the measured rate against two quality
measures. A higher target should buy a lower perceptual distance.

Run it with ``python demos/rd_sweep.py``; expect several minutes on one core.
"""

import numpy as np

from dpc import CodecConfig, TrainConfig, compress_array, decompress_bytes, dpl, ms_ssim, sweep_rd_points
from dpc.data import synthetic_image, toy_corpus
from dpc.imageio import to_float, to_uint8

TARGETS = (0.23, 0.5, 1.0)


def main():
    corpus = toy_corpus(1000, 32, seed=0)
    rng = np.random.default_rng(7)
    held_out = [synthetic_image(rng, 64, 64) for _ in range(6)]

    base = TrainConfig()
    finetune = TrainConfig(epochs=2, decay_every_epochs=1)
    results = sweep_rd_points(corpus, base, TARGETS, CodecConfig(K=32), finetune=finetune)

    print(f"{'target':>7} {'bpp':>7} {'ms-ssim':>8} {'dpl':>8}")
    for target, params, _ in results:
        rates, quality, distance = [], [], []
        for x in held_out:
            packed = compress_array(x, params)
            x_hat = to_float(to_uint8(decompress_bytes(packed.data, params)))
            rates.append(packed.bpp)
            quality.append(ms_ssim(x, x_hat))
            distance.append(dpl(x, x_hat))
        print(f"{target:7.2f} {np.mean(rates):7.3f} {np.mean(quality):8.4f} {np.mean(distance):8.4f}")


if __name__ == "__main__":
    main()
