"""Command-line front end: ``ctseg <subcommand> [flags]``.

Exit status: 0 on success, 1 on usage errors, 2 on data or numerics errors.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import metrics, phantom, report, segnet, trainer, volumes
from .errors import CTSegError, DataError

PREP_FIELDS = ("case_id", "cohort", "split", "image_path", "hu_path", "mask_path", "crop_path")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _widths(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("widths must be three comma-separated integers") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("widths must be three comma-separated integers")
    return vals


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def _write_rows(path, fields, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _split_of(row):
    if row.get("split"):
        return row["split"]
    return "train" if row["case_id"].startswith("train") else "test"


def _select(rows, split):
    return [r for r in rows if split == "all" or r["split"] == split]


def _load_prepared(row, base, with_mask=True):
    img = volumes.read_nifti(os.path.join(base, row["image_path"]))
    images = np.ascontiguousarray(np.transpose(img.data, (2, 0, 1)))
    mask = None
    if with_mask and row.get("mask_path"):
        m = volumes.read_mask(os.path.join(base, row["mask_path"]))
        mask = np.ascontiguousarray(np.transpose(m.data, (2, 0, 1)))
    return img, images, mask


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_phantom(args):
    spec = phantom.PhantomSpec()
    if args.slices:
        spec = phantom.PhantomSpec(shape=(spec.shape[0], spec.shape[1], args.slices))
    path = phantom.generate_corpus(args.out, args.n_train, args.n_normal, args.n_covid, args.seed, spec)
    print(path)


def cmd_preprocess(args):
    rows = _read_rows(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    out_rows = []
    for row in rows:
        cid = row["case_id"]
        split = _split_of(row)
        vol = volumes.read_nifti(os.path.join(base, row["volume_path"]))
        mask = volumes.read_mask(os.path.join(base, row["mask_path"])) if row.get("mask_path") else None
        crop = args.crop
        if crop == "auto":
            # reference-mask crop only where the mask would exist at training time
            crop = "mask" if split == "train" and mask is not None else "body"
        case = volumes.preprocess_case(vol, mask, crop=crop)
        names = {"image_path": f"{cid}_img.nii", "hu_path": f"{cid}_hu.nii",
                 "mask_path": f"{cid}_mask.nii" if mask is not None else "", "crop_path": f"{cid}_crop.txt"}
        volumes.write_nifti(case.as_volume("images"), os.path.join(args.out, names["image_path"]), "normalized")
        volumes.write_nifti(case.as_volume("hu"), os.path.join(args.out, names["hu_path"]), "resized HU")
        if mask is not None:
            volumes.write_nifti(case.as_volume("mask"), os.path.join(args.out, names["mask_path"]), "lung mask")
        with open(os.path.join(args.out, names["crop_path"]), "w", encoding="utf-8") as fh:
            fh.write(case.record.to_text())
        out_rows.append({"case_id": cid, "cohort": row.get("cohort", ""), "split": split, **names})
    path = os.path.join(args.out, "manifest.csv")
    _write_rows(path, PREP_FIELDS, out_rows)
    print(path)


def cmd_train(args):
    overrides = {}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        config = trainer.TrainConfig.from_file(args.config, **overrides)
    else:
        config = trainer.TrainConfig(**overrides).validate()
    rows = _select(_read_rows(args.data), "train")
    if not rows:
        raise DataError("no training rows in the preprocessed manifest")
    base = os.path.dirname(os.path.abspath(args.data))
    subjects = []
    for row in rows:
        _, images, mask = _load_prepared(row, base)
        if mask is None:
            raise DataError(f"{row['case_id']}: training case without a mask")
        subjects.append(trainer.Subject(row["case_id"], images, mask))
    net = segnet.NetConfig(group_channels=args.widths, seed=config.seed)
    dtype = np.float32 if args.float32 else np.float64
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    params, rep = trainer.train(config, subjects, net, dtype, out_dir=args.out, resume=args.resume, log=log)
    os.makedirs(args.out, exist_ok=True)
    rep.write_csv(os.path.join(args.out, "train_log.csv"))
    model = os.path.join(args.out, "model.ckpt")
    segnet.save_checkpoint(params, model)
    print(model)


def predict_stack(params, images, batch_size=17):
    dtype = params["stem.conv.w"].dtype
    out = []
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size, None].astype(dtype)
        out.append(segnet.predict_mask(segnet.forward(params, x, mode="infer")))
    return np.concatenate(out)


def cmd_infer(args):
    dtype = np.float32 if args.float32 else np.float64
    params = segnet.load_checkpoint(args.checkpoint, dtype=dtype)
    base = os.path.dirname(os.path.abspath(args.data))
    os.makedirs(args.out, exist_ok=True)
    for row in _select(_read_rows(args.data), args.split):
        cid = row["case_id"]
        img, images, _ = _load_prepared(row, base, with_mask=False)
        pred = predict_stack(params, images)
        vol = volumes.BinaryMask(np.transpose(pred, (1, 2, 0)), img.spacing, img.origin)
        volumes.write_nifti(vol, os.path.join(args.out, f"{cid}_pred.nii"), "predicted lung mask")
        if args.export_original:
            with open(os.path.join(base, row["crop_path"]), encoding="utf-8") as fh:
                record = volumes.CropRecord.from_text(fh.read())
            volumes.write_nifti(volumes.restore_mask(pred, record),
                                os.path.join(args.out, f"{cid}_pred_orig.nii"), "predicted lung mask")
    print(args.out)


def cmd_evaluate(args):
    base = os.path.dirname(os.path.abspath(args.data))
    cases = []
    for row in sorted(_select(_read_rows(args.data), args.split), key=lambda r: r["case_id"]):
        cid = row["case_id"]
        if not row.get("mask_path"):
            raise DataError(f"{cid}: no reference mask to evaluate against")
        img, _, _ = _load_prepared(row, base, with_mask=False)
        ref = volumes.read_mask(os.path.join(base, row["mask_path"]))
        hu = volumes.read_nifti(os.path.join(base, row["hu_path"]))
        pred = volumes.read_mask(os.path.join(args.pred_dir, f"{cid}_pred.nii"))
        # the domain is the whole preprocessed crop grid
        cases.append(metrics.evaluate_case(ref, pred, hu, img, None, ref.spacing, cid, row.get("cohort", "")))
    metrics.write_csv(cases, args.out)
    print(args.out)


def cmd_report(args):
    cases = metrics.read_csv(args.metrics)
    paths = report.write_report(cases, args.out)
    for p in paths.values():
        print(p)


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="ctseg", description="Lung segmentation on CT volumes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic CT corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=40)
    s.add_argument("--n-normal", type=int, default=10)
    s.add_argument("--n-covid", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--slices", type=int, default=None, help="axial slices per phantom")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="crop, resize and normalise a manifest of volumes")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--crop", choices=("body", "auto", "mask"), default="body",
                   help="crop box: body (default), mask, or auto (mask for training cases)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train the network on preprocessed training cases")
    s.add_argument("--data", required=True, help="preprocessed manifest.csv")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key = value training config file")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--widths", type=_widths, default=(16, 32, 64), help="channels per dilation group")
    s.add_argument("--float32", action="store_true", help="train in 32-bit precision")
    s.add_argument("--resume", help="state.npz of an interrupted run")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict lung masks")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", help="train, test or all")
    s.add_argument("--float32", action="store_true")
    s.add_argument("--export-original", action="store_true", help="also write masks on the original grid")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="per-case metrics CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="cohort summary, boxplot data and outliers")
    s.add_argument("--metrics", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    try:
        args.func(args)
    except (CTSegError, ArithmeticError, OSError) as exc:
        print(f"ctseg {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0
