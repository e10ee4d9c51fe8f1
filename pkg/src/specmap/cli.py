"""Batch command-line driver.

Subcommands cover the whole pipeline: corpus synthesis, the two pretraining
stages, mimic refinement, enhancement of single inputs, split evaluation,
and spectrogram image export. Exit codes: 0 ok, 2 usage, 3 I/O, 4 training
divergence, 5 artifact/data mismatch.

Option precedence is flags > config file (key=value lines via --config) >
built-in defaults; the effective configuration is echoed into every
checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dsp, formats, models, synth, training
from .ops import ShapeError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5


class MismatchError(RuntimeError):
    """Loaded artifacts do not fit each other or the data."""


# ---------------------------------------------------------------------------
# option resolution


def _read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise formats.FormatError(f"config line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


class Settings:
    """flags > config file > defaults, with the result remembered for echo."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
        self.effective: dict[str, str] = {}

    def get(self, key: str, default, cast=None):
        flag = getattr(self.args, key.replace("-", "_"), None)
        if flag is not None:
            value = flag
        elif key in self.file_cfg:
            value = self.file_cfg[key]
        else:
            value = default
        if cast is not None and value is not None:
            value = cast(value)
        self.effective[key] = value
        return value


def _echo_config(settings: Settings, command: str) -> dict:
    echo = {"command": command}
    for key, value in settings.effective.items():
        echo[f"cli_{key.replace('-', '_')}"] = value
    return echo


# ---------------------------------------------------------------------------
# artifact helpers


def _manifest_path(data_arg) -> Path:
    path = Path(data_arg)
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return path


def _load_model(path, expected_role: str):
    ck = formats.load_checkpoint(path)
    role = ck.config.get("role")
    if role != expected_role:
        raise MismatchError(f"{path}: holds a {role or 'unknown'} model, expected {expected_role}")
    if expected_role == "mapper":
        model = models.mapper_from_config(ck.config)
    else:
        model = models.classifier_from_config(ck.config)
    training.restore_training_state(ck, model)
    return model, ck


def _int_pair_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


# ---------------------------------------------------------------------------
# synth-data


def cmd_synth_data(args) -> int:
    settings = Settings(args)
    sizes = {
        "train": settings.get("train", 200, int),
        "dev": settings.get("dev", 69, int),
        "test": settings.get("test", 55, int),
    }
    classes = settings.get("classes", synth.DEFAULT_NUM_CLASSES, int)
    seed = settings.get("seed", 0, int)
    for split, size in sizes.items():
        if size < 1:
            _usage_error(args, f"--{split} must be at least 1")
    if classes < 2:
        _usage_error(args, "--classes must be at least 2")
    manifest = synth.build_corpus(args.out, sizes, num_classes=classes, seed=seed)
    print(manifest)
    return EXIT_OK


def _usage_error(args, message: str):
    args.parser.error(message)


# ---------------------------------------------------------------------------
# training commands


def _train_config(settings: Settings, **overrides) -> training.TrainConfig:
    cfg = training.TrainConfig(
        epochs=settings.get("epochs", overrides.pop("epochs", 5), int),
        lr0=settings.get("lr", overrides.pop("lr", 1e-4), float),
        alpha=overrides.pop("alpha", 0.0),
        seed=settings.get("seed", 0, int),
        batch_frames=settings.get("batch-frames", 128, int),
        batch_utts=settings.get("batch-utts", 2, int),
        lr_mode=overrides.pop("lr_mode", "exp"),
        **overrides,
    )
    return cfg


def cmd_train_classifier(args) -> int:
    settings = Settings(args)
    manifest = _manifest_path(args.data)
    num_classes = data_mod.manifest_num_classes(manifest)
    train = data_mod.load_split(manifest, "train")
    dev = data_mod.load_split(manifest, "dev")

    seed = settings.get("seed", 0, int)
    if args.arch == "dnn":
        classifier = models.DnnClassifier(
            hidden=settings.get("hidden", 64, int),
            num_classes=num_classes, seed=seed)
        cfg = _train_config(settings, epochs=30, lr=1e-5)
    else:
        classifier = models.WrbnClassifier(
            channels=_int_pair_list(settings.get("channels", "8,16,32", str)),
            lstm_hidden=settings.get("lstm-hidden", 64, int),
            linear_width=settings.get("linear-width", 64, int),
            dropout_rate=settings.get("dropout", 0.2, float),
            num_classes=num_classes, seed=seed)
        cfg = _train_config(settings, epochs=8, lr=1e-4)

    result = training.pretrain_classifier(classifier, train, dev, cfg)
    dev_ce, dev_acc = training.classifier_metrics(classifier, dev)
    adam = training.Adam(classifier.params)
    training.save_training_state(args.out, classifier, adam, epoch=cfg.epochs,
                                 extra_config=_echo_config(settings, "train-classifier"))
    formats.write_trace(_trace_path(args), result.trace)
    print(f"final dev cross-entropy {dev_ce:.6f} (frame accuracy {dev_acc:.4f})")
    return EXIT_OK


def _trace_path(args) -> Path:
    if getattr(args, "trace", None):
        return Path(args.trace)
    return Path(str(args.out) + ".trace.csv")


def cmd_pretrain_mapper(args) -> int:
    settings = Settings(args)
    manifest = _manifest_path(args.data)
    train = data_mod.load_split(manifest, "train")
    dev = data_mod.load_split(manifest, "dev")
    seed = settings.get("seed", 0, int)
    lr_mode = settings.get("lr-mode", "exp", str)
    cfg = _train_config(settings, epochs=5, lr=1e-4, lr_mode=lr_mode)

    adam = None
    start_epoch = 0
    if args.resume:
        mapper, ck = _load_model(args.resume, "mapper")
        if ck.config.get("arch") != args.arch:
            raise MismatchError(f"cannot resume {ck.config.get('arch')} checkpoint as {args.arch}")
        adam = training.Adam(mapper.params)
        training.restore_training_state(ck, mapper, adam)
        start_epoch = ck.counters.get("epoch", 0)
    elif args.init_from:
        mapper, ck = _load_model(args.init_from, "mapper")
        if ck.config.get("arch") != args.arch:
            raise MismatchError(f"cannot initialise {args.arch} from a "
                                f"{ck.config.get('arch')} checkpoint")
    elif args.arch == "dnn":
        mapper = models.DnnMapper(hidden=settings.get("hidden", 128, int),
                                  dropout_rate=settings.get("dropout", 0.3, float),
                                  seed=seed)
    else:
        mapper = models.ResnetMapper(filters=_int_pair_list(settings.get("filters", "16,16,32,32", str)),
                                     fc_width=settings.get("fc-width", 128, int),
                                     dropout_rate=settings.get("dropout", 0.1, float),
                                     seed=seed)

    adam = adam or training.Adam(mapper.params)
    result = training.pretrain_mapper(mapper, train, dev, cfg, adam=adam,
                                      start_epoch=start_epoch)
    training.save_training_state(args.out, mapper, adam, epoch=cfg.epochs,
                                 extra_config=_echo_config(settings, "pretrain-mapper"))
    formats.write_trace(_trace_path(args), result.trace)
    dev_fid = training.split_fidelity(dev, training.map_split(mapper, dev))
    print(f"final dev fidelity {dev_fid:.6f}")
    return EXIT_OK


def cmd_train_mimic(args) -> int:
    settings = Settings(args)
    manifest = _manifest_path(args.data)
    num_classes = data_mod.manifest_num_classes(manifest)
    train = data_mod.load_split(manifest, "train")
    dev = data_mod.load_split(manifest, "dev")

    mapper, _ = _load_model(args.mapper, "mapper")
    classifier, clf_ck = _load_model(args.classifier, "classifier")
    classifier.set_frozen(True)
    if classifier.num_classes != num_classes:
        raise MismatchError(f"classifier targets {classifier.num_classes} classes, "
                            f"corpus has {num_classes}")

    alpha_default = 0.1 if classifier.arch == "dnn" else 0.05
    alpha = settings.get("alpha", alpha_default, float)
    cfg = _train_config(settings, epochs=5, lr=1e-4, alpha=alpha)
    result = training.train_mimic(mapper, classifier, train, dev, cfg)
    adam = training.Adam(mapper.params)
    training.save_training_state(args.out, mapper, adam, epoch=cfg.epochs,
                                 extra_config=_echo_config(settings, "train-mimic"))
    formats.write_trace(_trace_path(args), result.trace)
    dev_fid = training.split_fidelity(dev, training.map_split(mapper, dev))
    print(f"final dev fidelity {dev_fid:.6f} (alpha {alpha})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# enhance


def _read_features(path) -> np.ndarray:
    """Mean-normalized log-magnitude frames from a WAV or SMAP input."""
    head = Path(path).read_bytes()[:4]
    if head == b"RIFF":
        spect = dsp.spectrogram(formats.read_wav(path))
    elif head == formats.SMAP_MAGIC:
        matrix = formats.read_smap(path)
        if matrix.shape[1] != dsp.BINS:
            raise MismatchError(f"{path}: {matrix.shape[1]} columns, expected {dsp.BINS}")
        spect = dsp.Spectrogram(matrix)
    else:
        raise formats.FormatError(f"{path}: neither a wav nor a smap file")
    return dsp.mean_normalize(spect).frames


def cmd_enhance(args) -> int:
    mapper, _ = _load_model(args.mapper, "mapper")
    frames = _read_features(args.infile)
    if mapper.arch == "dnn":
        rows = dsp.with_deltas(frames)
        mapped = _batched_forward(mapper, rows)
    else:
        spliced = dsp.splice(frames)
        images = spliced.reshape(len(spliced), 1, dsp.CONTEXT * 2 + 1, dsp.BINS)
        mapped = _batched_forward(mapper, images)
    formats.write_smap(args.out, mapped)
    print(f"{args.out}: {mapped.shape[0]} frames")
    return EXIT_OK


def _batched_forward(mapper, inputs, batch: int = 512) -> np.ndarray:
    outs = []
    for lo in range(0, len(inputs), batch):
        outs.append(mapper.forward(inputs[lo : lo + batch], mode="eval").data)
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# eval


def build_report(mapper, classifier, data: data_mod.SplitData, split: str) -> dict:
    """Overall and per-SNR fidelity/CE/accuracy; the overall row aggregates
    the per-SNR sums exactly."""
    mapped = data.noisy if mapper is None else training.map_split(mapper, data)
    logits = training.classifier_logits(classifier, data, mapped)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    frame_nll = -logp[np.arange(data.num_frames), data.labels]
    frame_hit = logits.argmax(axis=1) == data.labels
    frame_sqerr = ((mapped - data.clean) ** 2).mean(axis=1)

    buckets: dict[int, dict[str, float]] = {}
    for u, utt in enumerate(data.utts):
        rows = data.utt_rows(u)
        b = buckets.setdefault(utt.snr_db, {"frames": 0, "sqerr": 0.0, "nll": 0.0, "hits": 0.0})
        b["frames"] += len(rows)
        b["sqerr"] += float(frame_sqerr[rows].sum())
        b["nll"] += float(frame_nll[rows].sum())
        b["hits"] += float(frame_hit[rows].sum())

    def finish(b):
        return {
            "frames": int(b["frames"]),
            "fidelity": b["sqerr"] / b["frames"],
            "cross_entropy": b["nll"] / b["frames"],
            "frame_accuracy": b["hits"] / b["frames"],
        }

    total = {"frames": 0, "sqerr": 0.0, "nll": 0.0, "hits": 0.0}
    for b in buckets.values():
        for key in total:
            total[key] += b[key]
    return {
        "split": split,
        "enhancement": "passthrough" if mapper is None else mapper.arch,
        "overall": finish(total),
        "per_snr": {str(snr): finish(b) for snr, b in sorted(buckets.items())},
        "note": ("frame accuracy under the frozen classifier is a desk-scale proxy; "
                 "word-error-rate evaluation needs an external ASR stack and "
                 "licensed corpora, which are out of scope"),
    }


def cmd_eval(args) -> int:
    manifest = _manifest_path(args.data)
    num_classes = data_mod.manifest_num_classes(manifest)
    split_data = data_mod.load_split(manifest, args.split)
    classifier, _ = _load_model(args.classifier, "classifier")
    classifier.set_frozen(True)
    if classifier.num_classes != num_classes:
        raise MismatchError(f"classifier targets {classifier.num_classes} classes, "
                            f"corpus has {num_classes}")
    mapper = None
    if not args.passthrough:
        if not args.mapper:
            args.parser.error("eval needs --mapper unless --passthrough is given")
        mapper, _ = _load_model(args.mapper, "mapper")
    report = build_report(mapper, classifier, split_data, args.split)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-spectrogram


def cmd_export_spectrogram(args) -> int:
    matrix = formats.read_smap(args.infile)
    formats.write_pgm(args.out, matrix)
    print(f"{args.out}: {matrix.shape[0]} x {matrix.shape[1]} pixels (width x height)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specmap",
        description="Spectral-mapping speech enhancement with mimic training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=fn, parser=p)
        p.add_argument("--config", help="key=value overrides file")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        return p

    p = add("synth-data", cmd_synth_data, help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, help="train utterances (default 200)")
    p.add_argument("--dev", type=int, help="dev utterances (default 69)")
    p.add_argument("--test", type=int, help="test utterances (default 55)")
    p.add_argument("--classes", type=int, help="label classes (default 40)")

    p = add("train-classifier", cmd_train_classifier, help="pretrain a frame classifier on clean features")
    p.add_argument("--arch", required=True, choices=("dnn", "wrbn"))
    p.add_argument("--data", required=True, help="corpus directory or manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="trace CSV path (default <out>.trace.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-frames", type=int)
    p.add_argument("--batch-utts", type=int)
    p.add_argument("--hidden", type=int, help="dnn hidden width (default 64)")
    p.add_argument("--channels", help="wrbn channel profile (default 8,16,32)")
    p.add_argument("--lstm-hidden", type=int)
    p.add_argument("--linear-width", type=int)
    p.add_argument("--dropout", type=float)

    p = add("pretrain-mapper", cmd_pretrain_mapper, help="train a mapper on fidelity loss")
    p.add_argument("--arch", required=True, choices=("dnn", "resnet"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="trace CSV path")
    p.add_argument("--lr-mode", choices=("exp", "drop"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-utts", type=int)
    p.add_argument("--hidden", type=int, help="dnn mapper hidden width (default 128)")
    p.add_argument("--filters", help="resnet filter profile (default 16,16,32,32)")
    p.add_argument("--fc-width", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--resume", help="continue training from this checkpoint")
    p.add_argument("--init-from", help="start from this checkpoint's parameters with a fresh optimizer")

    p = add("train-mimic", cmd_train_mimic, help="refine a mapper with joint fidelity+mimic loss")
    p.add_argument("--mapper", required=True, help="pretrained mapper checkpoint")
    p.add_argument("--classifier", required=True, help="trained classifier checkpoint (frozen)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="trace CSV path")
    p.add_argument("--alpha", type=float, help="mimic weight (default 0.1 dnn / 0.05 wrbn)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-utts", type=int)

    p = add("enhance", cmd_enhance, help="map one noisy input to denoised features")
    p.add_argument("--mapper", required=True)
    p.add_argument("--in", dest="infile", required=True, help="wav or smap input")
    p.add_argument("--out", required=True, help="smap output")

    p = add("eval", cmd_eval, help="report fidelity and classifier metrics on a split")
    p.add_argument("--mapper")
    p.add_argument("--passthrough", action="store_true", help="evaluate raw noisy features")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=("dev", "test"))
    p.add_argument("--out", help="also write the report here")

    p = add("export-spectrogram", cmd_export_spectrogram, help="render a smap matrix as a PGM image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except training.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MismatchError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (formats.FormatError, FileNotFoundError, IsADirectoryError, PermissionError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
