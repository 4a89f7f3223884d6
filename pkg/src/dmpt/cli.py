"""Command line entry point: ``dmpt {gen-data,train,eval,attmap,sweep}``.

Every experiment key can be overridden with ``--key value`` (or
``--key=value``) after the sub-command.  Exit status: 0 success, 1 usage or
configuration error, 2 data or file-format error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness
from .config import ExperimentConfig
from .dataset import default_spec, generate_synthetic_dataset, load_dataset
from .errors import ConfigError, DmptError
from .prompts import PromptSet

logger = logging.getLogger("dmpt")


def parse_overrides(tokens):
    """``['--a', '1', '--b=2']`` -> ``{'a': '1', 'b': '2'}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


class _Parser(argparse.ArgumentParser):
    # usage errors share exit status 1 with configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="dmpt", description="Dual-modality prompt tuning on a frozen toy CLIP.", allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.add_argument("--config", help="flat key = value config file")
        return p

    add("gen-data", "write the synthetic shapes dataset to data_dir")
    add("train", "train one (variant, shots, seed) cell and save its prompt pack")
    p = add("eval", "evaluate a saved prompt pack on the query split")
    p.add_argument("--prompts", help="prompt pack (omit for an untrained model)")
    p = add("attmap", "export attention maps for query images")
    p.add_argument("--prompts", help="prompt pack (omit for an untrained model)")
    p.add_argument("--count", type=int, default=1, help="number of query images")
    p.add_argument("--out", default=None, help="output directory (default out_dir/attention)")
    p = add("sweep", "run every variant x shots x seed and write results.csv")
    p.add_argument("--results", default=None, help="results path (default out_dir/results.csv)")
    return parser


def load_config(args, extra):
    overrides = parse_overrides(extra)
    if args.config:
        return ExperimentConfig.from_file(args.config, overrides)
    return ExperimentConfig.from_strings(overrides)


def _model_for(config, prompts_path):
    task = harness.load_task(config)
    vocab = harness.load_vocabulary(config)
    weights = harness.load_backbone(config, vocab)
    prompts = None
    if prompts_path:
        prompts = PromptSet.load(prompts_path, weights.config, len(task.class_names))
    model = harness.build_model(config, task.class_names, weights, vocab, prompts)
    return model, task


def cmd_gen_data(config, args):
    spec = default_spec(
        config.n_classes,
        image_size=config.image_size,
        distractor_count=config.distractor_count,
        noise_std=config.noise_std,
        samples_per_class=config.samples_per_class,
    )
    n = generate_synthetic_dataset(spec, config.data_dir, config.data_seed)
    print(f"wrote {n} images to {config.data_dir}")


def cmd_train(config, args):
    os.makedirs(config.out_dir, exist_ok=True)
    vocab = harness.load_vocabulary(config)
    weights = harness.load_backbone(config, vocab)
    row, _, _ = harness.train_cell(config, load_dataset(config.data_dir), weights, vocab, config.out_dir)
    name = harness.cell_name(config.variant, config.shots, config.seed)
    print(f"{name}: accuracy {row.test_accuracy:.4f} ({row.epochs_run} epochs, {row.wall_seconds:.1f}s)")
    print(f"prompt pack: {os.path.join(config.out_dir, name + '.dptp')}")


def cmd_eval(config, args):
    model, task = _model_for(config, args.prompts)
    print(f"accuracy {harness.evaluate(task, model):.4f} on {len(task.query)} query images")


def cmd_attmap(config, args):
    model, task = _model_for(config, args.prompts)
    out = args.out or os.path.join(config.out_dir, "attention")
    os.makedirs(out, exist_ok=True)
    ps = model.weights.config.patch_size
    for i, sample in enumerate(task.query[: args.count]):
        path = os.path.join(out, f"{config.variant}_{i:03d}.pgm")
        harness.export_attention_map(sample.image, model, path)
        focus = harness.attention_focus(harness.attention_grid(model, sample.image)[0], sample.bbox, ps)
        print(f"{path}\tfocus {focus:.4f}")


def cmd_sweep(config, args):
    rows = harness.run_experiment(config, args.results)
    for (variant, shots), (mean, std, members) in harness.summarize(rows).items():
        print(f"{variant}\t{shots}-shot\t{mean:.4f} +- {std:.4f} over {len(members)} seeds")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attmap": cmd_attmap,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args, extra)
        COMMANDS[args.command](config, args)
    except DmptError as exc:
        print(f"dmpt: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dmpt: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
