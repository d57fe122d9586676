"""Rewrite the committed golden files in tests/data.

Run only when the bitstream format or the toy models change on purpose:
``python3 tests/make_golden.py``.
"""

from pathlib import Path

import numpy as np

from lcodec import codec, entropy, toy
from lcodec.imageio import write_ppm

DATA = Path(__file__).parent / "data"
GOLDEN_LAMBDA = 0.02


def golden_setup():
    rng = np.random.default_rng(2024)
    imgs = [toy.synthetic_image(48, 48, rng) for _ in range(6)]
    enc, dec = toy.toy_codec(4, 24.0, calib_images=imgs)
    models = entropy.train_entropy_model([codec.analysis(im, enc) for im in imgs])
    src = toy.synthetic_image(40, 56, rng)
    return enc, dec, models, src


def main():
    enc, dec, models, src = golden_setup()
    DATA.mkdir(exist_ok=True)
    enc.save(DATA / "golden_enc.qmdl")
    dec.save(DATA / "golden_dec.qmdl")
    models.save(DATA / "golden.qems")
    write_ppm(DATA / "golden_src.ppm", src)
    res = codec.encode_image(src, enc, dec, models, GOLDEN_LAMBDA, rdoq=True)
    (DATA / "golden.qbit").write_bytes(res.bitstream)
    write_ppm(DATA / "golden_decoded.ppm", codec.decode_image(res.bitstream, dec, models))


if __name__ == "__main__":
    main()
