#!/usr/bin/env python3


import abc
import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import metainfo
from bpe import BpeVocab
from casestudy import case_study_table
from checkpoint import (
    IncompatibleCheckpoint, WrongCheckpointVersionError, load_checkpoint, restore_state, save_checkpoint,
)
from configfile import VIEWS, ConfigError, ConfigFile, RunConfig, config_hash, get_cache_root
from dataset import DataError, DatasetManifest, MolDataset, load_dataset, open_cache, read_smiles
from featurecache import CacheStats, WrongCacheVersionError
from featurize import FormatError
from fusion import MissingCheckpoint, MissingFusionParams, alpha_rows, export_alpha
from model import MultiViewModel
from pipeline import (
    TrainingDiverged, checkpoint_alpha, embed_dataset, ensure_vocab, evaluate, finetune, grid_search, pretrain,
    train_vocab, view_list,
)
from tableformatter import TableFormatter

github_url = "https://github.com/molfusion/molfusion"
FUSION_CHOICES = ("attention", "mean", "max", "frozen")


class Const:
    OK = 0
    FAILED = 1


@dataclass
class CommandArgs:
    configfile: Optional[Path]
    command: "Command"
    debug: bool
    dry_run: bool
    table_formatter: TableFormatter
    seed: Optional[int] = None
    views: Optional[List[str]] = None
    fusion: Optional[str] = None
    checkpoint: Optional[Path] = None
    output: Optional[Path] = None
    plot: Optional[Path] = None
    grid: bool = False
    config: Optional[RunConfig] = field(default=None, repr=False)

    def overrides(self) -> Dict[str, object]:
        overrides: Dict[str, object] = {}
        if self.seed is not None:
            overrides["train.seed"] = self.seed
            overrides["finetune.seeds"] = [self.seed]
        if self.views is not None:
            overrides["model.views"] = self.views
        if self.fusion is not None:
            overrides["fusion.mode"] = self.fusion
        if self.checkpoint is not None:
            overrides["run.checkpoint"] = str(self.checkpoint)
        return overrides


def run_directory(config: RunConfig, stage: str) -> Path:
    return Path(config.run_dir) / f"{stage}-{config_hash(config)[:12]}"


def prepare_run_directory(config: RunConfig, stage: str) -> Path:
    run_dir = run_directory(config, stage)
    run_dir.mkdir(parents=True, exist_ok=True)
    ConfigFile(None).write_config(config, run_dir / "config.json")
    return run_dir


def print_table(cmd_args: CommandArgs, rows: List[Dict]):
    print(cmd_args.table_formatter.to_string(rows))


def write_table(path: Path, rows: List[Dict]):
    path.write_text(TableFormatter.create(TableFormatter.CSV).to_string(rows), encoding="utf-8")


class Command(abc.ABC):
    stage = ""
    needs_checkpoint = False

    def problems(self, config: RunConfig) -> List[str]:
        problems = DatasetManifest.from_config(config, self.stage).problems()
        if self.needs_checkpoint and not config.checkpoint:
            problems.append("run.checkpoint: a pretrained checkpoint is required")
        if config.checkpoint and not Path(config.checkpoint).exists() and self.stage != "pretrain":
            problems.append(f"run.checkpoint: {config.checkpoint} does not exist")
        return problems

    def plan(self, config: RunConfig) -> List[Dict]:
        manifest = DatasetManifest.from_config(config, self.stage)
        return [
            {"step": "dataset", "detail": str(manifest.csv_path)},
            {"step": "views", "detail": ",".join(view_list(config))},
            {"step": "fusion", "detail": config.fusion_mode},
            {"step": "run directory", "detail": str(run_directory(config, self.stage))},
        ]

    @abc.abstractmethod
    def execute(self, cmd_args: CommandArgs) -> int:
        pass


def load_for(config: RunConfig, stage: str, vocab: BpeVocab, label_columns=None,
             labelled: bool = True) -> MolDataset:
    manifest = DatasetManifest.from_config(config, stage)
    if label_columns is not None:
        manifest.label_columns = label_columns
    manifest.labelled = manifest.labelled and labelled
    cache = open_cache(get_cache_root(), manifest, config, vocab)
    return load_dataset(manifest, config, vocab, cache)


def pretrained(config: RunConfig):
    if not config.checkpoint:
        return None
    return load_checkpoint(Path(config.checkpoint), config)


class FeaturizeCommand(Command):
    stage = "pretrain"

    def problems(self, config: RunConfig) -> List[str]:
        if not config.pretrain_csv and not config.finetune_csv:
            return ["pretrain.csv / finetune.csv: no dataset configured"]
        return [problem for stage, path in [("pretrain", config.pretrain_csv), ("finetune", config.finetune_csv)]
                if path for problem in DatasetManifest.from_config(config, stage).problems()]

    def execute(self, cmd_args: CommandArgs) -> int:
        config = cmd_args.config
        stages = [stage for stage, path in [("pretrain", config.pretrain_csv), ("finetune", config.finetune_csv)]
                  if path]
        corpus = [smiles for stage in stages for smiles in read_smiles(DatasetManifest.from_config(config, stage))]
        if not corpus:
            print_table(cmd_args, [{"dataset": stage, **row} for stage in stages for row in CacheStats().rows()])
            return Const.OK
        vocab = ensure_vocab(config, corpus)
        exit_code = Const.OK
        rows = []
        for stage in stages:
            dataset = load_for(config, stage, vocab)
            rows.extend({"dataset": stage, **row} for row in dataset.stats.rows())
            if dataset.stats.failure_rate > config.max_failure_rate:
                logging.error("%s: %.1f%% of the rows failed to parse (limit %.1f%%)", stage,
                              100 * dataset.stats.failure_rate, 100 * config.max_failure_rate)
                exit_code = Const.FAILED
        print_table(cmd_args, rows)
        return exit_code


class TokenizeTrainCommand(Command):
    stage = "pretrain"

    def execute(self, cmd_args: CommandArgs) -> int:
        config = cmd_args.config
        smiles = read_smiles(DatasetManifest.from_config(config, self.stage))
        vocab = train_vocab(smiles, config.vocab_size, Path(config.vocab_path))
        print_table(cmd_args, [{"vocab": config.vocab_path, "alphabet": len(vocab.alphabet),
                                "merges": len(vocab.merges), "ids": len(vocab)}])
        return Const.OK


class PretrainCommand(Command):
    stage = "pretrain"

    def execute(self, cmd_args: CommandArgs) -> int:
        config = cmd_args.config
        vocab = ensure_vocab(config, read_smiles(DatasetManifest.from_config(config, self.stage)))
        dataset = load_for(config, self.stage, vocab)
        run_dir = prepare_run_directory(config, self.stage)
        checkpoint = pretrain(config, dataset, vocab, run_dir / "pretrain_log.csv")
        target = Path(config.checkpoint) if config.checkpoint else run_dir / "checkpoint.pt"
        save_checkpoint(target, checkpoint)
        print_table(cmd_args, [{"epoch": epoch, "loss": f"{loss:.6f}"}
                               for epoch, loss in enumerate(checkpoint.loss_trace)])
        print(f"Saved checkpoint to {target}")
        return Const.OK


class FinetuneCommand(Command):
    stage = "finetune"

    def execute(self, cmd_args: CommandArgs) -> int:
        config = cmd_args.config
        checkpoint = pretrained(config)
        vocab = checkpoint.vocab if checkpoint is not None \
            else ensure_vocab(config, read_smiles(DatasetManifest.from_config(config, self.stage)))
        dataset = load_for(config, self.stage, vocab)
        run_dir = prepare_run_directory(config, self.stage)
        if cmd_args.grid:
            config, points = grid_search(config, checkpoint, dataset, vocab)
            write_table(run_dir / "grid.csv", [point.row() for point in points])
        result = finetune(config, checkpoint, dataset, vocab, run_dir)
        rows = result.report.rows()
        write_table(run_dir / "metrics.csv", rows)
        print_table(cmd_args, rows)
        return Const.OK


class EvalCommand(Command):
    stage = "finetune"

    def problems(self, config: RunConfig) -> List[str]:
        problems = super().problems(config)
        if not run_directory(config, self.stage).is_dir():
            problems.append(f"no fine-tuning run for this config at {run_directory(config, self.stage)}")
        return problems

    def execute(self, cmd_args: CommandArgs) -> int:
        config = cmd_args.config
        run_dir = run_directory(config, self.stage)
        first = load_checkpoint(run_dir / f"finetuned_seed{config.finetune_seeds[0]}.pt", config)
        dataset = load_for(config, self.stage, first.vocab)
        rows = evaluate(config, run_dir, dataset).rows()
        write_table(run_dir / "eval.csv", rows)
        print_table(cmd_args, rows)
        return Const.OK


class CaseStudyCommand(Command):
    stage = "finetune"
    needs_checkpoint = True

    def execute(self, cmd_args: CommandArgs) -> int:
        config = cmd_args.config
        checkpoint = pretrained(config)
        dataset = load_for(config, self.stage, checkpoint.vocab, label_columns=[])
        views = view_list(config)
        backbone = MultiViewModel(checkpoint.config, len(checkpoint.vocab), checkpoint.vocab.pad_id)
        restore_state(backbone, checkpoint.state, config.checkpoint)
        stacked = embed_dataset(backbone, dataset.molecules, views, config.batch_size).double().numpy()
        embeddings = {view: stacked[:, VIEWS.index(view)] for view in views}
        chirality = None
        if config.chirality_label in dataset.label_columns:
            chirality = dataset.labels()[:, dataset.label_columns.index(config.chirality_label)]
        rows = case_study_table(embeddings, [molecule.graph for molecule in dataset.molecules], chirality,
                                config.probe_seed)
        run_dir = prepare_run_directory(config, "case-study")
        write_table(run_dir / "case_study.csv", rows)
        print_table(cmd_args, rows)
        return Const.OK


class ExportAttentionCommand(Command):
    stage = "finetune"
    needs_checkpoint = True

    def execute(self, cmd_args: CommandArgs) -> int:
        config = cmd_args.config
        checkpoint = pretrained(config)
        dataset = load_for(config, self.stage, checkpoint.vocab, labelled=False)
        alpha = checkpoint_alpha(checkpoint, dataset, view_list(config), config.batch_size)
        output = cmd_args.output or Path("attention.csv")
        export_alpha(alpha.tolist(), output, cmd_args.plot, title=dataset.manifest.name)
        print_table(cmd_args, alpha_rows(alpha.tolist()))
        return Const.OK


def parse_views(text: str) -> List[str]:
    views = [view.strip() for view in text.split(",") if view.strip()]
    unknown = [view for view in views if view not in VIEWS]
    if unknown or not views:
        raise argparse.ArgumentTypeError(f"expected a comma separated subset of {','.join(VIEWS)}")
    return views


def parse_args(argv: Optional[List[str]]) -> CommandArgs:
    parser = argparse.ArgumentParser(
        description="Multi-view molecular representation learning with attentive view fusion",
        epilog=f"Found a bug or need a feature? {github_url}")
    parser.add_argument("--config", type=Path, default=None, help="JSON file of dotted settings")
    parser.add_argument("--seed", type=int, default=None, help="overrides train.seed and finetune.seeds")
    parser.add_argument("--views", type=parse_views, default=None, help="subset of 2d,3d,fp,sm")
    parser.add_argument("--fusion", type=str, default=None, choices=FUSION_CHOICES)
    parser.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    parser.add_argument(
        "--format",
        type=str,
        default=TableFormatter.TEXT,
        choices=[TableFormatter.TEXT, TableFormatter.CSV, TableFormatter.FORMAT_JSON],
    )
    parser.add_argument("--debug", action="store_true")
    parser.add_argument("--version", action="version", version=f"{metainfo.version}")

    subparsers = parser.add_subparsers(help="Commands", required=True, dest="command")
    subparsers.add_parser("featurize", help="Parse and cache the views of the configured datasets") \
        .set_defaults(command=FeaturizeCommand())
    subparsers.add_parser("tokenize-train", help="Train the BPE vocabulary on the pretraining SMILES") \
        .set_defaults(command=TokenizeTrainCommand())
    subparsers.add_parser("pretrain", help="Contrastive multi-view pretraining") \
        .set_defaults(command=PretrainCommand())

    parser_finetune = subparsers.add_parser("finetune", help="Fine-tune on a labelled dataset")
    parser_finetune.set_defaults(command=FinetuneCommand())
    parser_finetune.add_argument("--checkpoint", type=Path, default=None)
    parser_finetune.add_argument("--grid", action="store_true",
                                 help="search the learning rate and dropout grid on the validation split first")

    subparsers.add_parser("eval", help="Evaluate the fine-tuned models of this config") \
        .set_defaults(command=EvalCommand())

    parser_case = subparsers.add_parser("case-study", help="Chirality and ring-count probes")
    parser_case.set_defaults(command=CaseStudyCommand())
    parser_case.add_argument("--checkpoint", type=Path, default=None)

    parser_export = subparsers.add_parser("export-attention", help="Export the dataset attention weights")
    parser_export.set_defaults(command=ExportAttentionCommand())
    parser_export.add_argument("--checkpoint", type=Path, default=None)
    parser_export.add_argument("--output", type=Path, default=Path("attention.csv"))
    parser_export.add_argument("--plot", type=Path, default=None, help="optional bar chart image")

    args = parser.parse_args() if argv is None else parser.parse_args(argv)
    return CommandArgs(
        configfile=args.config,
        command=args.command,
        debug=args.debug,
        dry_run=args.dry_run,
        table_formatter=TableFormatter.create(args.format),
        seed=args.seed,
        views=args.views,
        fusion=args.fusion,
        checkpoint=args.checkpoint if hasattr(args, "checkpoint") else None,
        output=args.output if hasattr(args, "output") else None,
        plot=args.plot if hasattr(args, "plot") else None,
        grid=args.grid if hasattr(args, "grid") else False,
    )


def resolve(cmd_args: CommandArgs) -> CommandArgs:
    """Read and validate the config and the command's inputs, listing every problem."""
    cmd_args.config = ConfigFile(cmd_args.configfile).read_config(cmd_args.overrides())
    problems = cmd_args.command.problems(cmd_args.config)
    if problems:
        raise ConfigError(problems)
    return cmd_args


DOMAIN_ERRORS = (
    ConfigError, DataError, FormatError, IncompatibleCheckpoint, WrongCheckpointVersionError,
    WrongCacheVersionError, MissingCheckpoint, MissingFusionParams, TrainingDiverged, FileNotFoundError,
    ValueError,
)


def run(argv: Optional[List[str]]) -> int:
    cmd_args = parse_args(argv)
    if cmd_args.debug is False:
        logging.getLogger().setLevel(logging.INFO)
    try:
        resolve(cmd_args)
        if cmd_args.dry_run:
            print_table(cmd_args, cmd_args.command.plan(cmd_args.config))
            return Const.OK
        return cmd_args.command.execute(cmd_args)
    except DOMAIN_ERRORS as error:
        logging.debug("Command failed", exc_info=True)
        print(f"ERROR: {error}", file=sys.stderr)
        return Const.FAILED


def main() -> int:
    logging.basicConfig(level=logging.DEBUG)
    return run(argv=None)


if __name__ == "__main__":
    sys.exit(main())
