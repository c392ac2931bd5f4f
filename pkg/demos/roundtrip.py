"""Train a tiny codec on synthetic images, then compress and restore one image.

This is the shortest path through the whole library:

1. Cut a small patch corpus from the built-in toy image generator.
2. Train on the default 6-epoch schedule (a couple of minutes on one core).
3. Code a held-out 64x64 image to container bytes.
4. Decode the bytes back to pixels and report the rate and quality.

Run it with ``python demos/roundtrip.py``.
"""

import numpy as np

from dpc import CodecConfig, TrainConfig, compress_array, decompress_bytes, dpl, ms_ssim, psnr, train
from dpc.data import synthetic_image, toy_corpus
from dpc.imageio import to_float, to_uint8


def main():
    corpus = toy_corpus(1000, 32, seed=0)
    print(f"corpus: {corpus.shape[0]} patches of {corpus.shape[2]}x{corpus.shape[3]}")

    # The rate target steers the importance map; K is the number of latent channels.
    config = TrainConfig(target_bpp=0.5)
    params, log = train(corpus, config, CodecConfig(K=32))
    for epoch in range(config.epochs):
        steps = [r for r in log if r["epoch"] == epoch]
        print(f"epoch {epoch}: loss {np.mean([r['L'] for r in steps]):.4f}, rate {np.mean([r['R_bpp'] for r in steps]):.3f} bpp")

    image = synthetic_image(np.random.default_rng(99), 64, 64)
    packed = compress_array(image, params)
    print(f"container: {len(packed.data)} bytes, {packed.bpp:.3f} bpp coded (model predicted {packed.predicted_bits:.0f} symbol bits)")

    restored = to_float(to_uint8(decompress_bytes(packed.data, params)))
    print(f"psnr {psnr(image, restored):.2f} dB, ms-ssim {ms_ssim(image, restored):.4f}, dpl {dpl(image, restored):.4f}")

    # Decoding is deterministic, so the same bytes always give the same pixels.
    again = decompress_bytes(packed.data, params)
    print("repeat decode identical:", np.array_equal(to_uint8(again), to_uint8(restored)))


if __name__ == "__main__":
    main()
