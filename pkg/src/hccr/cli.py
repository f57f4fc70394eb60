"""Command-line front end for the recognition pipeline.

Subcommands: synth (generate a glyph dataset), train, eval, extract
(dump stacked feature planes), ensemble (average several models), and
inspect (report a saved model's depth and size). Every invocation prints
its resolved configuration before acting. Exit codes: 0 success, 1
runtime or data error, 2 usage error.
"""

import argparse
import sys
from pathlib import Path

from . import tensor_core as tc
from .directional_features import MODE_CHANNELS, canonical_mode, stack_input
from .network_builder import (
    build_hccr_alexnet,
    build_hccr_googlenet,
    count_inception_modules,
    count_layers,
    count_parameters,
)
from .pipeline_data import (
    PREPROC_PRESETS,
    load_gnt,
    load_image_dir,
    preprocess_dataset,
    shuffle_split,
    synth_glyphs,
    write_gnt,
    write_manifest,
    write_pgm,
)
from .train_eval import (
    TrainConfig,
    ensemble_predict,
    evaluate_topk,
    format_training_log,
    load_model,
    report_keyvalues,
    report_table,
    save_model,
    serialized_size_report,
    train,
)

NETS = ("googlenet-small", "googlenet-full", "alexnet-small", "alexnet-full")
MODES = ("original", "original+gabor", "original+gradient", "original+hog",
         "gabor-only")
TRAIN_FRACTION = 0.8


class UsageError(Exception):
    """Bad flag combination detected after parsing; exits with code 2."""


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _nonneg_float(text):
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _print_config(args, keys):
    parts = [f"{key.replace('_', '-')}={getattr(args, key)}" for key in keys]
    print(f"config: subcommand={args.command} " + " ".join(parts))


def _load_raw(args):
    if (args.data is None) == (args.gnt is None):
        raise UsageError("exactly one of --data or --gnt is required")
    return load_image_dir(args.data) if args.data else load_gnt(args.gnt)


def _build_net(name, class_count, mode):
    channels = MODE_CHANNELS[canonical_mode(mode)]
    family, size = name.rsplit("-", 1)
    scale = f"reference-{size}"
    if family == "googlenet":
        return build_hccr_googlenet(scale, class_count=class_count,
                                    in_channels=channels)
    return build_hccr_alexnet(scale, class_count=class_count,
                              in_channels=channels)


def _preset_for_spec(spec):
    """Preprocessing preset implied by a model's topology and input size."""
    family = "googlenet" if count_inception_modules(spec) else "alexnet"
    size = "full" if spec.input_shape[1] > 32 else "small"
    return PREPROC_PRESETS[f"{family}-{size}"]


def _eval_subset(dataset, spec, split, seed):
    prepared = preprocess_dataset(dataset, _preset_for_spec(spec))
    train_part, test_part = shuffle_split(prepared, TRAIN_FRACTION, seed)
    return train_part if split == "train" else test_part


def _check_mode_channels(mode, spec, flag="--mode"):
    channels = MODE_CHANNELS[canonical_mode(mode)]
    if channels != spec.input_shape[0]:
        raise UsageError(f"{flag} {mode} stacks {channels} channel(s) but the "
                         f"model expects {spec.input_shape[0]}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    _print_config(args, ("classes", "per_class", "noise", "seed", "out", "gnt"))
    if args.out is None and args.gnt is None:
        raise UsageError("at least one of --out or --gnt is required")
    data = synth_glyphs(args.classes, args.per_class, noise=args.noise,
                        seed=args.seed)
    if args.out is not None:
        root = Path(args.out)
        root.mkdir(parents=True, exist_ok=True)
        counters = {}
        for sample in data.samples:
            class_dir = root / sample.class_name
            class_dir.mkdir(exist_ok=True)
            index = counters.get(sample.class_name, 0)
            counters[sample.class_name] = index + 1
            write_pgm(class_dir / f"{index:04d}.pgm", sample.image)
        write_manifest(data, root / "manifest.tsv")
        print(f"wrote {len(data.samples)} images in {data.class_count} "
              f"classes under {root}")
    if args.gnt is not None:
        written = write_gnt(data, args.gnt)
        print(f"wrote {written} bytes to {args.gnt}")
    return 0


def cmd_train(args):
    _print_config(args, ("net", "data", "gnt", "mode", "epochs", "batch",
                         "lr", "momentum", "seed", "out"))
    raw = _load_raw(args)
    prepared = preprocess_dataset(raw, PREPROC_PRESETS[args.net])
    train_set, val_set = shuffle_split(prepared, TRAIN_FRACTION, args.seed)
    spec = _build_net(args.net, prepared.class_count, args.mode)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                         lr=args.lr, momentum=args.momentum, seed=args.seed,
                         mode=args.mode)
    params, log = train(spec, train_set, config, val_set)
    print(format_training_log(log))
    if log:
        print(f"final val_top1={log[-1].val_top1:.2f}")
    if args.out is not None:
        written = save_model(spec, params, args.out)
        print(f"saved {args.out} ({written} bytes)")
    return 0


def cmd_eval(args):
    _print_config(args, ("model", "data", "gnt", "mode", "split", "seed",
                         "batch"))
    if len(args.model) != 1:
        raise UsageError("eval takes exactly one --model")
    spec, params = load_model(args.model[0])
    _check_mode_channels(args.mode, spec)
    subset = _eval_subset(_load_raw(args), spec, args.split, args.seed)
    report = evaluate_topk(spec, params, subset, ks=(1, 2, 5, 10),
                           mode=args.mode, batch_size=args.batch)
    print(report_keyvalues(report))
    print(report_table(report))
    return 0


def cmd_extract(args):
    _print_config(args, ("data", "gnt", "mode", "out"))
    raw = _load_raw(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plane_count = None
    for index, sample in enumerate(raw.samples):
        stack = stack_input(sample.image, args.mode)
        tc.write_dtns(out / f"{index:05d}_{sample.class_name}.dtns",
                      stack.planes)
        if index == 0:
            plane_count = stack.planes.shape[0]
            for j, plane in enumerate(stack.planes):
                write_pgm(out / f"plane{j:02d}.pgm", plane)
    print(f"wrote {len(raw.samples)} tensors ({plane_count} planes each) "
          f"under {out}")
    return 0


def _infer_mode(spec):
    channels = spec.input_shape[0]
    if channels == 1:
        return "original"
    if channels == 8:
        return "gabor-only"
    return "original+gabor"


def cmd_ensemble(args):
    _print_config(args, ("model", "data", "gnt", "mode", "split", "seed",
                         "batch"))
    loaded = [load_model(path) for path in args.model]
    if args.mode is None:
        modes = [_infer_mode(spec) for spec, _ in loaded]
    elif len(args.mode) == 1:
        modes = [args.mode[0]] * len(loaded)
    elif len(args.mode) == len(loaded):
        modes = list(args.mode)
    else:
        raise UsageError(f"got {len(args.mode)} --mode values for "
                         f"{len(args.model)} models; give one or one each")
    members = []
    for (spec, params), mode in zip(loaded, modes):
        _check_mode_channels(mode, spec)
        members.append((spec, params, mode))
    subset = _eval_subset(_load_raw(args), loaded[0][0], args.split, args.seed)
    images = [s.image for s in subset.samples]
    labels = subset.labels()
    for i, member in enumerate(members):
        probs = ensemble_predict([member], images, batch_size=args.batch)
        top1 = 100.0 * float((probs.argmax(axis=1) == labels).mean())
        print(f"member{i} top1={top1:.2f} mode={member[2]} ({args.model[i]})")
    probs = ensemble_predict(members, images, batch_size=args.batch)
    top1 = 100.0 * float((probs.argmax(axis=1) == labels).mean())
    print(f"ensemble top1={top1:.2f} members={len(members)}")
    return 0


def cmd_inspect(args):
    _print_config(args, ("model",))
    if len(args.model) != 1:
        raise UsageError("inspect takes exactly one --model")
    path = args.model[0]
    spec, _ = load_model(path)
    size = serialized_size_report(spec)
    print(f"weighted_layers={count_layers(spec, 'weighted')}")
    print(f"weighted_pooling_io_layers="
          f"{count_layers(spec, 'weighted+pooling+io')}")
    print(f"inception_modules={count_inception_modules(spec)}")
    print(f"parameters={count_parameters(spec)}")
    print(f"file_bytes={Path(path).stat().st_size}")
    print(f"projected_bytes={size.projected_bytes}")
    print(f"size_human={size.human}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_data_flags(sub):
    sub.add_argument("--data", metavar="PATH", default=None,
                     help="dataset directory of per-class PGM folders")
    sub.add_argument("--gnt", metavar="PATH", default=None,
                     help="binary GNT sample file")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hccr",
        description="Offline handwritten-character recognition toolkit.")
    subs = parser.add_subparsers(dest="command", required=True,
                                 metavar="SUBCOMMAND")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    synth = subs.add_parser("synth", formatter_class=fmt,
                            help="generate a synthetic glyph dataset")
    synth.add_argument("--classes", type=_positive_int, required=True,
                       help="number of glyph classes (1-100)")
    synth.add_argument("--per-class", type=_positive_int, required=True,
                       help="samples per class")
    synth.add_argument("--noise", type=_nonneg_float, default=0.0,
                       help="uniform pixel noise amplitude")
    synth.add_argument("--seed", type=_nonneg_int, default=0,
                       help="generation seed")
    synth.add_argument("--out", metavar="PATH", default=None,
                       help="directory for per-class PGM folders + manifest")
    synth.add_argument("--gnt", metavar="PATH", default=None,
                       help="also write the dataset as one GNT file")
    synth.set_defaults(func=cmd_synth)

    tr = subs.add_parser("train", formatter_class=fmt,
                         help="train a network and save it")
    tr.add_argument("--net", choices=NETS, required=True,
                    help="architecture and scale")
    _add_data_flags(tr)
    tr.add_argument("--mode", choices=MODES, default="original",
                    help="input feature stacking")
    tr.add_argument("--epochs", type=_nonneg_int, default=20,
                    help="training epochs")
    tr.add_argument("--batch", type=_positive_int, default=64,
                    help="minibatch size")
    tr.add_argument("--lr", type=_nonneg_float, default=0.01,
                    help="initial learning rate")
    tr.add_argument("--momentum", type=_nonneg_float, default=0.9,
                    help="SGD momentum")
    tr.add_argument("--seed", type=_nonneg_int, default=0,
                    help="seed for init, shuffling, and the held-out split")
    tr.add_argument("--out", metavar="PATH", default=None,
                    help="model file to write")
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", formatter_class=fmt,
                         help="evaluate a saved model")
    ev.add_argument("--model", metavar="PATH", action="append", required=True,
                    help="saved model file")
    _add_data_flags(ev)
    ev.add_argument("--mode", choices=MODES, default="original",
                    help="input feature stacking (must match the model)")
    ev.add_argument("--split", choices=("train", "test"), default="test",
                    help="which side of the held-out split to score")
    ev.add_argument("--seed", type=_nonneg_int, default=0,
                    help="split seed; match the training run to reuse its split")
    ev.add_argument("--batch", type=_positive_int, default=128,
                    help="evaluation batch size")
    ev.set_defaults(func=cmd_eval)

    ex = subs.add_parser("extract", formatter_class=fmt,
                         help="dump stacked feature planes as DTNS tensors")
    _add_data_flags(ex)
    ex.add_argument("--mode", choices=MODES, default="original+gabor",
                    help="which planes to stack")
    ex.add_argument("--out", metavar="PATH", required=True,
                    help="output directory (first sample also gets PGM previews)")
    ex.set_defaults(func=cmd_extract)

    en = subs.add_parser("ensemble", formatter_class=fmt,
                         help="average several models' probabilities")
    en.add_argument("--model", metavar="PATH", action="append", required=True,
                    help="member model file (repeat per member)")
    _add_data_flags(en)
    en.add_argument("--mode", choices=MODES, action="append", default=None,
                    help="member input mode; one value for all members or one "
                         "per member; default infers from each model's "
                         "channel count")
    en.add_argument("--split", choices=("train", "test"), default="test",
                    help="which side of the held-out split to score")
    en.add_argument("--seed", type=_nonneg_int, default=0,
                    help="split seed; match the training run to reuse its split")
    en.add_argument("--batch", type=_positive_int, default=128,
                    help="evaluation batch size")
    en.set_defaults(func=cmd_ensemble)

    ins = subs.add_parser("inspect", formatter_class=fmt,
                          help="report a saved model's depth and size")
    ins.add_argument("--model", metavar="PATH", action="append", required=True,
                     help="saved model file")
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as error:
        print(f"usage error: {error}", file=sys.stderr)
        return 2
    except (OSError, ValueError, tc.ShapeError) as error:
        print(f"error: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
