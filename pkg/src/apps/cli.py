"""
medattn command line: synth, preprocess, train, eval, predict, sweep,
baseline, gradcheck and report.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
Diagnostics go to stderr; data goes to stdout or files.
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.checkpoint import load_checkpoint, load_text_assets, save_checkpoint, save_text_assets
from core.config import APP_NAME, CHECKPOINT_MANIFEST, AppConfig, load_config
from core.errors import EXIT_OK, EXIT_USAGE, ConfigError, MedattnError, NumericError, exit_code_for
from core.experiments import (
    ExperimentData,
    RunConfigs,
    SweepResult,
    bow_baseline,
    depth_sweep,
    emit_results,
    lr_sweep,
    noise_sweep,
    read_results,
    sample_fraction_sweep,
    split_dataset,
    transformer_report,
)
from core.metrics import ConfusionCounts, MetricsReport, evaluate_predictions, format_report, write_report_csv
from core.model import ModelConfig, TransformerClassifier, forward_batch, init_params
from core.synthetic import generate_corpus
from core.tensor import grad_check
from core.text_pipeline import (
    EncodedExample,
    PreprocessedCorpus,
    encode_note,
    load_encoded,
    preprocess_corpus,
    read_records,
    save_encoded,
    write_records,
)
from core.training import bce_loss, label_matrix, train, write_history
from utils.helpers import atomic_write_text

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5

# flag dest -> AppConfig key
FLAG_KEYS = {
    "seed": "seed",
    "docs": "n_docs",
    "labels": "n_labels",
    "max_len": "max_len",
    "min_freq": "min_freq",
    "min_tokens": "min_tokens",
    "min_age": "min_age",
    "lr": "learning_rate",
    "epochs": "max_epochs",
    "batch_size": "batch_size",
    "patience": "patience",
    "optimizer": "optimizer",
    "layers": "n_layers",
    "kind": "noise_kind",
    "data": "data",
    "out": "out",
}


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; route it to ConfigError (exit 1)"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _parse_set(values: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def resolve_config(args) -> AppConfig:
    """Defaults <- --config file <- --set pairs <- dedicated flags"""
    overrides = _parse_set(args.set)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = str(value)
    config = load_config(args.config, overrides)
    echo_config(config)
    return config


def echo_config(config: AppConfig, stream=None) -> None:
    """Provenance header on stderr; printed whatever the log level"""
    stream = stream or sys.stderr
    stream.write(f"{APP_NAME} run seed={config.seed}\n")
    for line in config.describe():
        stream.write(f"  {line}\n")


def _require(value: str, flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _require_path(value: str, flag: str) -> str:
    _require(value, flag)
    if not os.path.exists(value):
        raise ConfigError(f"{flag} path does not exist: {value}")
    return value


def _experiment_data(config: AppConfig, corpus: PreprocessedCorpus) -> ExperimentData:
    return split_dataset(
        corpus.examples, config.test_fraction, config.val_fraction, config.seed,
        vocab=corpus.vocab, label_space=corpus.label_space,
    )


def _run_configs(config: AppConfig, corpus: PreprocessedCorpus) -> RunConfigs:
    max_len = len(corpus.examples[0].ids)
    return RunConfigs(
        model=config.model_config(corpus.vocab.size, len(corpus.label_space), max_len=max_len),
        train=config.train_config(),
    )


def cmd_synth(args, config: AppConfig) -> int:
    records = generate_corpus(config.synth_config())
    text = write_records(records, config.out or None)
    if not config.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_preprocess(args, config: AppConfig) -> int:
    source = _require_path(args.input, "--input")
    out_dir = _require(config.out, "--out")
    corpus = preprocess_corpus(read_records(source), config.preprocess_settings())
    save_encoded(corpus, out_dir, config.max_len)
    logger.info("Encoded dataset written to %s", out_dir)
    return EXIT_OK


def _load_resume(path: str):
    """
    (last, best) for a previous train output. Accepts the output directory
    itself or its last/ subdirectory.
    """
    if os.path.isdir(os.path.join(path, "last")):
        return load_checkpoint(os.path.join(path, "last")), load_checkpoint(path)
    parent = os.path.dirname(os.path.normpath(path))
    best = load_checkpoint(parent) if os.path.exists(os.path.join(parent, CHECKPOINT_MANIFEST)) else None
    return load_checkpoint(path), best


def cmd_train(args, config: AppConfig) -> int:
    corpus = load_encoded(_require_path(config.data, "--data"))
    out_dir = _require(config.out, "--out")
    data = _experiment_data(config, corpus)
    configs = _run_configs(config, corpus)
    resume = resume_best = None
    if args.resume:
        resume, resume_best = _load_resume(_require_path(args.resume, "--resume"))
        if resume.model_config != configs.model:
            raise ConfigError("--resume checkpoint was trained with a different model config")
    result = train(data.train, configs.model, configs.train, validation=data.validation,
                   resume=resume, resume_best=resume_best)
    save_checkpoint(result.checkpoint, out_dir)
    save_checkpoint(result.last, os.path.join(out_dir, "last"))
    save_text_assets(out_dir, corpus.vocab, corpus.label_space)
    write_history(result.history, os.path.join(out_dir, "history.csv"))
    logger.info("Best checkpoint from epoch %d (val_loss %.5f) at %s",
                result.checkpoint.epoch, result.checkpoint.best_val_loss, out_dir)
    return EXIT_OK


def _eval_examples(args, config: AppConfig, corpus: PreprocessedCorpus) -> Sequence[EncodedExample]:
    if args.split == "all":
        return corpus.examples
    data = _experiment_data(config, corpus)
    return {"train": data.train, "validation": data.validation, "test": data.test}[args.split]


def cmd_eval(args, config: AppConfig) -> int:
    checkpoint = load_checkpoint(_require_path(args.checkpoint, "--checkpoint"))
    corpus = load_encoded(_require_path(config.data, "--data"))
    examples = _eval_examples(args, config, corpus)
    probs = forward_batch(examples, checkpoint.params, checkpoint.model_config)
    report = evaluate_predictions(probs, label_matrix(examples), checkpoint.train_config.threshold)
    sys.stdout.write(format_report([(args.name, report)]))
    if args.probs:
        lines = [
            json.dumps({"id": ex.record_id, "probabilities": dict(zip(corpus.label_space, row.tolist()))})
            for ex, row in zip(examples, probs)
        ]
        atomic_write_text(args.probs, "\n".join(lines) + "\n")
    if config.out:
        write_report_csv([(args.name, report)], config.out)
    return EXIT_OK


def cmd_predict(args, config: AppConfig) -> int:
    checkpoint_dir = _require_path(args.checkpoint, "--checkpoint")
    checkpoint = load_checkpoint(checkpoint_dir)
    vocab, label_space = load_text_assets(checkpoint_dir, args.vocab)
    if args.text is not None:
        text = args.text
    elif args.input:
        with open(_require_path(args.input, "--input"), "r", encoding="utf-8") as f:
            text = f.read()
    else:
        text = sys.stdin.read()
    example = encode_note(text, vocab, label_space, checkpoint.model_config.max_len)
    probs = forward_batch([example], checkpoint.params, checkpoint.model_config)[0]
    threshold = checkpoint.train_config.threshold
    payload = {
        "probabilities": dict(zip(label_space, probs.tolist())),
        "labels": [label for label, p in zip(label_space, probs) if p >= threshold],
        "threshold": threshold,
    }
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def cmd_sweep(args, config: AppConfig) -> int:
    corpus = load_encoded(_require_path(config.data, "--data"))
    out_path = _require(config.out, "--out")
    data = _experiment_data(config, corpus)
    configs = _run_configs(config, corpus)
    if args.sweep == "lr":
        results = lr_sweep(args.values or config.lr_rates, data, configs)
    elif args.sweep == "samples":
        results = sample_fraction_sweep(args.values or config.fractions, data, configs)
    elif args.sweep == "noise":
        results = noise_sweep(args.values or config.noise_levels, config.noise_kind, data, configs)
    else:
        results = depth_sweep([int(v) for v in args.values] if args.values else config.depths, data, configs)
    emit_results(results, out_path)
    sys.stdout.write(format_report(_sweep_rows(results)))
    return EXIT_OK


def _sweep_rows(results: Sequence[SweepResult]):
    """Sweep points as table rows named sweep=value"""
    empty = ConfusionCounts(0, 0, 0, 0)
    return [
        (f"{r.sweep}={r.value:g}", MetricsReport(r.accuracy, r.precision, r.recall, empty))
        for r in results
    ]


def cmd_baseline(args, config: AppConfig) -> int:
    corpus = load_encoded(_require_path(config.data, "--data"))
    data = _experiment_data(config, corpus)
    configs = _run_configs(config, corpus)
    rows = [("BoW", bow_baseline(data, configs)), ("Ours", transformer_report(data, configs))]
    sys.stdout.write(format_report(rows))
    if config.out:
        write_report_csv(rows, config.out)
    return EXIT_OK


def gradient_check(seed: int, step: float = GRADCHECK_STEP):
    """Full-model check of the loss gradient on a tiny configuration"""
    model_config = ModelConfig(vocab_size=50, n_labels=4, d_model=8, n_heads=2, n_layers=1,
                               d_ff=16, max_len=10, seed=seed)
    rng = np.random.default_rng(seed)
    examples = []
    for n_real in (10, 7):
        ids = [int(i) for i in rng.integers(2, model_config.vocab_size, size=n_real)]
        pad = model_config.max_len - n_real
        examples.append(EncodedExample(
            tuple(ids + [0] * pad), tuple([1] * n_real + [0] * pad),
            tuple(int(v) for v in rng.integers(0, 2, size=model_config.n_labels)),
        ))
    params = init_params(model_config)
    names = params.names()
    model = TransformerClassifier(model_config)
    targets = label_matrix(examples)

    def loss(leaves):
        return bce_loss(model.forward(examples, dict(zip(names, leaves))), targets)

    return grad_check(loss, [params[name] for name in names], step)


def cmd_gradcheck(args, config: AppConfig) -> int:
    result = gradient_check(config.seed, args.step)
    sys.stdout.write(f"max relative error: {result.max_error:.3e}\n")
    logger.info("worst coordinate: parameter #%d at %s (analytic %.6e, numeric %.6e)",
                result.param_index, result.coord, result.analytic, result.numeric)
    if not result.passed(args.tolerance):
        raise NumericError(f"gradient check failed: {result.max_error:.3e} >= {args.tolerance:g}")
    return EXIT_OK


def cmd_report(args, config: AppConfig) -> int:
    rows = []
    for path in args.results:
        results = read_results(_require_path(path, "results"))
        if not results:
            continue
        emit_results(results, path)
        rows.extend(_sweep_rows(results))
    if not rows:
        raise ConfigError("no sweep rows found in the given results files")
    sys.stdout.write(format_report(rows))
    return EXIT_OK


def _common_options() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="KEY=VALUE configuration file (dotenv syntax)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int, help="random seed (default 42)")
    noise = common.add_mutually_exclusive_group()
    noise.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    noise.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    return common


def _training_options() -> argparse.ArgumentParser:
    options = ArgumentParser(add_help=False)
    options.add_argument("--data", help="encoded dataset directory")
    options.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    options.add_argument("--epochs", type=int, help="maximum epochs (default 60)")
    options.add_argument("--batch-size", type=int, help="mini-batch size (default 16)")
    options.add_argument("--patience", type=int, help="early-stop patience, 0 disables (default 5)")
    options.add_argument("--optimizer", choices=("adam", "sgd"), help="optimizer (default adam)")
    options.add_argument("--layers", type=int, help="encoder layers (default 2)")
    return options


def build_parser() -> ArgumentParser:
    common = _common_options()
    training = _training_options()
    parser = ArgumentParser(prog=APP_NAME, description="Attention-based multi-label diagnosis prediction")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    commands.required = True

    synth = commands.add_parser("synth", parents=[common], help="generate a synthetic JSONL corpus")
    synth.add_argument("--docs", type=int, help="number of notes (default 2000)")
    synth.add_argument("--labels", type=int, help="number of labels (default 8)")
    synth.add_argument("--out", help="output JSONL (default stdout)")
    synth.set_defaults(handler=cmd_synth)

    pre = commands.add_parser("preprocess", parents=[common], help="JSONL notes -> encoded dataset")
    pre.add_argument("--input", required=True, help="input JSONL")
    pre.add_argument("--out", help="output directory")
    pre.add_argument("--max-len", type=int, help="sequence length (default 256)")
    pre.add_argument("--min-freq", type=int, help="vocabulary frequency floor (default 2)")
    pre.add_argument("--min-tokens", type=int, help="drop notes shorter than this (default 5)")
    pre.add_argument("--min-age", type=float, help="drop patients younger than this (default off)")
    pre.set_defaults(handler=cmd_preprocess)

    tr = commands.add_parser("train", parents=[common, training], help="train the Transformer")
    tr.add_argument("--out", help="checkpoint directory")
    tr.add_argument("--resume", help="previous train output (or its last/) to continue from")
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--data", help="encoded dataset directory")
    ev.add_argument("--split", choices=("test", "validation", "train", "all"), default="test",
                    help="which partition to score (default test)")
    ev.add_argument("--name", default="Ours", help="method name in the table (default Ours)")
    ev.add_argument("--probs", help="write per-example probabilities as JSONL")
    ev.add_argument("--out", help="write the report CSV")
    ev.set_defaults(handler=cmd_eval)

    pr = commands.add_parser("predict", parents=[common], help="label probabilities for one note")
    pr.add_argument("--checkpoint", required=True, help="checkpoint directory")
    pr.add_argument("--vocab", help="vocab.txt (default: the checkpoint's copy)")
    source = pr.add_mutually_exclusive_group()
    source.add_argument("--text", help="note text")
    source.add_argument("--input", help="file holding the note (default stdin)")
    pr.set_defaults(handler=cmd_predict)

    sw = commands.add_parser("sweep", parents=[common, training], help="run a sensitivity sweep")
    sw.add_argument("sweep", choices=("lr", "samples", "noise", "depth"))
    sw.add_argument("--values", type=float, nargs="+", help="swept values (default from config)")
    sw.add_argument("--kind", choices=("delete", "substitute", "typo"), help="noise kind (default substitute)")
    sw.add_argument("--out", help="results CSV; the SVG chart is written next to it")
    sw.set_defaults(handler=cmd_sweep)

    bl = commands.add_parser("baseline", parents=[common, training],
                             help="compare the Transformer with the bag-of-words baseline")
    bl.add_argument("--out", help="write the comparison CSV")
    bl.set_defaults(handler=cmd_baseline)

    gc = commands.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    gc.add_argument("--step", type=float, default=GRADCHECK_STEP, help="difference step (default 1e-5)")
    gc.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE,
                    help="maximum relative error (default 1e-4)")
    gc.set_defaults(handler=cmd_gradcheck)

    rp = commands.add_parser("report", parents=[common], help="tabulate and re-chart sweep CSVs")
    rp.add_argument("results", nargs="+", help="sweep CSV files")
    rp.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        sys.stderr.write(f"{APP_NAME}: error: {e}\n")
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)

    setup_logging(args.verbose, args.quiet)
    try:
        config = resolve_config(args)
        return args.handler(args, config)
    except MedattnError as e:
        logger.error("%s", e)
        return exit_code_for(e)
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return EXIT_USAGE
    except Exception:
        logger.exception("Unexpected failure")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
