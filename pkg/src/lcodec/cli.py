"""Command-line interface: ``lcodec <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from lcodec import codec, entropy, toy
from lcodec.errors import CodecError
from lcodec.imageio import read_ppm, write_ppm
from lcodec.integerize import FloatModel, distillation_report, integerize, select_shifts
from lcodec.metrics import RDCurve, bd_rate, psnr
from lcodec.nn import DECODER, ModelGraph
from lcodec.qtensor import QTensor

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sorted_files(directory, suffix: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == suffix)
    if not files:
        raise CodecError(f"no {suffix} files in {d}")
    return files


def _load_latents(directory) -> list[np.ndarray]:
    return [QTensor.load(p).data.astype(np.int64) for p in _sorted_files(directory, ".qtns")]


def _fmt_float(x: float, digits: int) -> str:
    return "inf" if math.isinf(x) else f"{x:.{digits}f}"


# -- commands ---------------------------------------------------------------


def cmd_integerize(args) -> None:
    model = FloatModel.load(args.float_model)
    if model.role == DECODER:
        calib = [QTensor.load(p).to_real() for p in _sorted_files(args.calib, ".qtns")]
    else:
        calib = [read_ppm(p).transpose(2, 0, 1) / 255.0 for p in _sorted_files(args.calib, ".ppm")]
    shifts = select_shifts(model, calib)
    graph = integerize(model, shifts)
    graph.save(args.out)
    print(distillation_report(model, graph, calib).format())


def cmd_dump_latents(args) -> None:
    enc = ModelGraph.load(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in _sorted_files(args.images, ".ppm"):
        lat = codec.analysis(read_ppm(p), enc)
        QTensor(lat, 0).save(out / (p.stem + ".qtns"))
        print(f"{p.name}: latent {lat.shape[0]}x{lat.shape[1]}x{lat.shape[2]}")


def cmd_train_entropy(args) -> None:
    lats = _load_latents(args.latents)
    models = entropy.train_entropy_model(lats, variant=args.variant, skip_ordering=args.skip_ordering)
    models.save(args.out)
    factorized = entropy.train_entropy_model(lats, variant=entropy.FACTORIZED)
    bits = sum(entropy.estimate_bits(x, models) for x in lats)
    fbits = sum(entropy.estimate_bits(x, factorized) for x in lats)
    print(f"channels: {models.num_channels}  order: {' '.join(map(str, models.order))}")
    print(f"training-set bits: {bits:.0f} ({args.variant}) vs {fbits:.0f} (factorized)")
    print(f"wrote {args.out} ({len(models.to_bytes())} bytes)")


def _encode_one(img, enc, dec, models, lam, rdoq, passes, parallel=False, convention="rdoq"):
    weight = lam
    if convention == "training":
        weight = codec.rdoq_lambda(lam, img.shape[0] * img.shape[1])
    return codec.encode_image(img, enc, dec, models, weight, rdoq=rdoq, passes=passes, parallel=parallel,
                              lambda_tag=lam)


def cmd_encode(args) -> None:
    enc = ModelGraph.load(args.model_enc)
    dec = ModelGraph.load(args.model_dec)
    models = entropy.EntropyModelSet.load(args.entropy)
    img = read_ppm(args.input)
    res = _encode_one(img, enc, dec, models, args.lam, args.rdoq, args.passes, args.parallel, args.lambda_convention)
    Path(args.output).write_bytes(res.bitstream)
    if args.dump_latent:
        QTensor(res.latent, 0).save(args.dump_latent)
    print(f"bytes: {len(res.bitstream)}  bpp: {res.bpp:.6f}  psnr: {_fmt_float(res.psnr, 4)} dB  "
          f"rd_cost: {res.rd_cost:.6f}  clamped: {res.clamped}")
    if res.rdoq is not None:
        st = res.rdoq
        print(f"rdoq: moves/pass {st.moves_per_pass}  probes {st.probes}  deactivations {st.deactivations}  "
              f"rolled back {st.rolled_back}  cost {st.initial.cost:.6f} -> {st.final.cost:.6f}")


def cmd_decode(args) -> None:
    dec = ModelGraph.load(args.model_dec)
    models = entropy.EntropyModelSet.load(args.entropy)
    img, lat = codec.decode_image(Path(args.input).read_bytes(), dec, models, return_latent=True)
    write_ppm(args.output, img)
    if args.dump_latent:
        QTensor(lat, 0).save(args.dump_latent)
    print(f"decoded {img.shape[1]}x{img.shape[0]} -> {args.output}")


def _eval_job(job):
    path, lam, enc_b, dec_b, ems_b, rdoq, passes, convention = job
    enc, dec = ModelGraph.from_bytes(enc_b), ModelGraph.from_bytes(dec_b)
    models = entropy.EntropyModelSet.from_bytes(ems_b)
    img = read_ppm(path)
    res = _encode_one(img, enc, dec, models, lam, rdoq, passes, convention=convention)
    recon = codec.decode_image(res.bitstream, dec, models)
    return Path(path).name, lam, res.bpp, psnr(recon, img)


def eval_rows(images, lambdas, enc, dec, models, rdoq=False, passes=3, jobs=1, convention="rdoq"):
    """RD rows ``(image, lambda, bpp, psnr)`` plus per-lambda means (image ``"mean"``)."""
    blobs = (enc.to_bytes(), dec.to_bytes(), models.to_bytes())
    work = [(str(p), lam, *blobs, rdoq, passes, convention) for p in images for lam in lambdas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_eval_job, work))
    else:
        rows = [_eval_job(w) for w in work]
    rows.sort(key=lambda r: (r[0], r[2], r[1]))
    means = []
    for lam in lambdas:
        sel = [r for r in rows if r[1] == lam]
        means.append(("mean", lam, float(np.mean([r[2] for r in sel])), float(np.mean([r[3] for r in sel]))))
    means.sort(key=lambda r: (r[2], r[1]))
    return rows + means


def write_curve_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "lambda", "bpp", "psnr"])
    for name, lam, bpp, q in rows:
        w.writerow([name, f"{lam:.6g}", f"{bpp:.6f}", _fmt_float(q, 4)])
    return buf.getvalue()


def read_curve_csv(path, label: str = "") -> RDCurve:
    """RD curve from an eval CSV, using the ``mean`` rows when present."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"bpp", "psnr"} <= set(reader.fieldnames):
            raise CodecError(f"{path}: missing bpp/psnr columns")
        rows = list(reader)
    if any(r.get("image") == "mean" for r in rows):
        rows = [r for r in rows if r.get("image") == "mean"]
    try:
        pts = sorted((float(r["bpp"]), float(r["psnr"])) for r in rows)
    except ValueError as exc:
        raise CodecError(f"{path}: {exc}") from None
    try:
        return RDCurve.from_arrays([p[0] for p in pts], [p[1] for p in pts], label or str(path))
    except ValueError as exc:
        raise CodecError(f"{path}: {exc}") from None


def cmd_eval(args) -> None:
    enc = ModelGraph.load(args.model_enc)
    dec = ModelGraph.load(args.model_dec)
    models = entropy.EntropyModelSet.load(args.entropy)
    images = _sorted_files(args.images, ".ppm")
    rows = eval_rows(images, args.lambdas, enc, dec, models, args.rdoq, args.passes, args.jobs,
                     args.lambda_convention)
    text = write_curve_csv(rows)
    Path(args.out).write_text(text)
    for name, lam, bpp, q in rows:
        if name == "mean":
            print(f"lambda {lam:.6g}: bpp {bpp:.6f}  psnr {_fmt_float(q, 4)}")


def cmd_bdrate(args) -> None:
    anchor = read_curve_csv(args.anchor)
    test = read_curve_csv(args.test)
    try:
        value = bd_rate(anchor, test)
    except ValueError as exc:
        raise CodecError(str(exc)) from None
    print(f"{value:.4f}")


def cmd_make_toy(args) -> None:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    imgs = [toy.synthetic_image(args.size, args.size, rng) for _ in range(args.images)]
    for n, im in enumerate(imgs):
        write_ppm(out / "images" / f"img{n:03d}.ppm", im)
    fenc, fdec = toy.toy_float_models(args.channels, args.gain)
    fenc.save(out / "enc.fmdl")
    fdec.save(out / "dec.fmdl")
    enc, dec = toy.toy_codec(args.channels, args.gain, calib_images=imgs)
    enc.save(out / "enc.qmdl")
    dec.save(out / "dec.qmdl")
    print(f"wrote toy models and {len(imgs)} images to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcodec", description="Low-complexity learned image codec tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("integerize", help="convert a float model (FMDL) to 16-bit integers (QMDL)")
    s.add_argument("--float-model", required=True)
    s.add_argument("--calib", required=True, help="directory of .ppm images (encoder) or .qtns latents (decoder)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_integerize)

    s = sub.add_parser("dump-latents", help="encode images to rounded latents (QTNS)")
    s.add_argument("--model", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_latents)

    s = sub.add_parser("train-entropy", help="fit the context entropy model on a latent dataset")
    s.add_argument("--latents", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--skip-ordering", action="store_true")
    s.add_argument("--variant", choices=[entropy.K2, entropy.K1, entropy.FACTORIZED], default=entropy.K2)
    s.set_defaults(func=cmd_train_entropy)

    def codec_args(s, encoder=True):
        if encoder:
            s.add_argument("--model-enc", required=True)
        s.add_argument("--model-dec", required=True)
        s.add_argument("--entropy", required=True)

    def lambda_convention(s):
        s.add_argument("--lambda-convention", choices=["rdoq", "training"], default="rdoq",
                       help="rdoq: cost = MSE + lambda * bits; training: lambda weighs MSE against bpp "
                            "(bpp + lambda * MSE) and is converted per image")

    s = sub.add_parser("encode", help="compress a PPM image")
    codec_args(s)
    s.add_argument("--lambda", dest="lam", type=float, default=codec.LAMBDAS[0])
    s.add_argument("--rdoq", action="store_true")
    s.add_argument("--passes", type=int, default=3)
    s.add_argument("--parallel", action="store_true", help="RDOQ over channels in parallel")
    lambda_convention(s)
    s.add_argument("--dump-latent", help="write the coded latent as QTNS")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="decompress a QBIT bitstream to PPM")
    codec_args(s, encoder=False)
    s.add_argument("--dump-latent", help="write the decoded latent as QTNS")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="RD curve over a directory of images")
    codec_args(s)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambdas", type=float, nargs="+", default=list(codec.LAMBDAS))
    s.add_argument("--rdoq", action="store_true")
    s.add_argument("--passes", type=int, default=3)
    s.add_argument("--jobs", type=int, default=1)
    lambda_convention(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bdrate", help="Bjontegaard delta rate of test vs anchor (percent)")
    s.add_argument("anchor")
    s.add_argument("test")
    s.set_defaults(func=cmd_bdrate)

    s = sub.add_parser("make-toy", help="write the toy models and synthetic images")
    s.add_argument("--out", required=True)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--gain", type=float, default=24.0)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "passes", 1) < 1:
            raise UsageError("--passes must be >= 1")
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CodecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
