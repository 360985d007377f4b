#!/usr/bin/env python3
"""
Dialogue Retrieval - Entry Point

Commands:
- generate-corpus   write a deterministic synthetic corpus
- build-dataset     MC/SC test sets, candidate database, train groups, vocabulary
- train-student     contrastive multi-tower student (qc, qs, qr, dqs)
- train-teacher     one-tower teacher (qc, qs, qr)
- distill           fine-to-coarse distillation of a trained student
- build-index       sparse (BM25), dense (embeddings) or ivf index over a field
- retrieve          top-K responses for every MC and SC query
- evaluate          Coverage@K plus proxy Perplexity@K and Relevance@K
- sweep-db          Coverage as distractors grow the database
- bench             per-batch retrieval latency

Usage:
    python dialogue_retrieval.py <command> [--config config.yaml] [--seed N] [overrides]

British English throughout.
"""
from dotenv import load_dotenv
load_dotenv()  # Load environment variables from .env file
import sys
from pathlib import Path
import argparse
import logging

from colorama import Fore, Style

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.core import pipeline
from src.core.config import RunConfig, add_config_flags, load_config, overrides_from_args, validate_config
from src.core.workdir import LOG_NAME

logger = logging.getLogger(__name__)


def setup_logging(workdir: Path, level: str = 'INFO'):
    """File log in the workdir plus stdout, as every command shares them"""
    workdir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(workdir / LOG_NAME, encoding='utf-8'),
            logging.StreamHandler(sys.stdout)
        ],
        force=True
    )


# ═══════════════════════════════════════════════════════════════════
# COMMANDS
# ═══════════════════════════════════════════════════════════════════

def _generate_corpus(cfg: RunConfig, args) -> dict:
    return pipeline.generate_corpus(cfg, args.kind)


def _build_dataset(cfg: RunConfig, args) -> dict:
    return pipeline.build_dataset(cfg)


def _train_student(cfg: RunConfig, args) -> dict:
    return pipeline.train_student(cfg, cfg.model.mode)


def _train_teacher(cfg: RunConfig, args) -> dict:
    return pipeline.train_teacher(cfg, args.teacher)


def _distill(cfg: RunConfig, args) -> dict:
    return pipeline.distill(cfg, cfg.model.mode)


def _build_index(cfg: RunConfig, args) -> dict:
    return pipeline.build_index_command(cfg, args.kind, args.field, args.checkpoint)


def _retrieve(cfg: RunConfig, args) -> dict:
    return pipeline.retrieve(cfg, cfg.model.mode, cfg.eval.backend, args.checkpoint)


def _evaluate(cfg: RunConfig, args) -> dict:
    tag = args.tag
    if tag is None:
        checkpoint = None
        if cfg.eval.backend != 'sparse':
            checkpoint = args.checkpoint or pipeline.student_name(cfg.model.mode)
        tag = pipeline.retrieval_tag(cfg.model.mode, cfg.eval.backend, checkpoint)
    return pipeline.evaluate(cfg, tag, args.relevance_teacher)


def _sweep_db(cfg: RunConfig, args) -> dict:
    return pipeline.sweep_db(cfg, cfg.model.mode, args.checkpoint)


def _bench(cfg: RunConfig, args) -> dict:
    return pipeline.bench(cfg, cfg.model.mode, args.checkpoint)


COMMANDS = {
    'generate-corpus': _generate_corpus,
    'build-dataset': _build_dataset,
    'train-student': _train_student,
    'train-teacher': _train_teacher,
    'distill': _distill,
    'build-index': _build_index,
    'retrieve': _retrieve,
    'evaluate': _evaluate,
    'sweep-db': _sweep_db,
    'bench': _bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument('--config', type=str, default=None,
                        help='Path to a .yaml/.yml/.json config file (default: config.yaml)')
    common.add_argument('--log-level', type=str, default='INFO', help='Logging level (default: INFO)')
    add_config_flags(common)

    parser = argparse.ArgumentParser(
        description='Contextual dense retrieval for dialogue response selection',
        allow_abbrev=False
    )
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('generate-corpus', parents=[common], allow_abbrev=False, help='Write a synthetic corpus')
    gen.add_argument('--kind', choices=sorted(pipeline.CORPUS_KINDS), default='toy')

    sub.add_parser('build-dataset', parents=[common], allow_abbrev=False, help='Build the splits')
    sub.add_parser('train-student', parents=[common], allow_abbrev=False, help='Train the --mode student')

    teacher = sub.add_parser('train-teacher', parents=[common], allow_abbrev=False, help='Train a teacher')
    teacher.add_argument('--teacher', choices=sorted(pipeline.TEACHER_ROLES), required=True)

    sub.add_parser('distill', parents=[common], allow_abbrev=False, help='Distil the --mode student')

    index = sub.add_parser('build-index', parents=[common], allow_abbrev=False, help='Build an index')
    index.add_argument('--kind', choices=['sparse', 'dense', 'ivf'], required=True)
    index.add_argument('--field', choices=['context', 'session', 'response'], required=True)
    index.add_argument('--checkpoint', type=str, default=None, help='Student checkpoint in the workdir')

    for name, help_text in (('retrieve', 'Retrieve for every test query'),
                            ('sweep-db', 'Database-size sweep'),
                            ('bench', 'Latency benchmark')):
        cmd = sub.add_parser(name, parents=[common], allow_abbrev=False, help=help_text)
        cmd.add_argument('--checkpoint', type=str, default=None, help='Student checkpoint in the workdir')

    ev = sub.add_parser('evaluate', parents=[common], allow_abbrev=False, help='Score retrieval results')
    ev.add_argument('--tag', type=str, default=None, help='Retrieval tag (default: from --mode/--backend)')
    ev.add_argument('--checkpoint', type=str, default=None, help='Student checkpoint used by retrieve')
    ev.add_argument('--relevance-teacher', type=str, default=None, help='Teacher checkpoint (default: teacher_qr.ckpt)')

    return parser


def show_summary(command: str, summary: dict):
    print("\n" + "="*70)
    print(f"✅ {command.upper()} COMPLETE")
    print("="*70)
    table = summary.pop('table', None)
    for key, value in summary.items():
        print(f"   {key}: {value}")
    if table:
        print()
        print(table)


def main(argv=None) -> int:
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config, overrides_from_args(args))
        setup_logging(config.workdir, args.log_level)

        is_valid, issues = validate_config(config)
        if not is_valid:
            print("\n❌ CONFIGURATION VALIDATION FAILED:")
            for issue in issues:
                print(f"   • {issue}")
            print(f"{Fore.RED}❌ {args.command}: invalid configuration ({issues[0]}){Style.RESET_ALL}", file=sys.stderr)
            return 2

        logger.info(f"{args.command}: seed {config.seed}, workdir {config.workdir}")
        summary = COMMANDS[args.command](config, args)
        show_summary(args.command, summary)
        return 0

    except KeyboardInterrupt:
        print("\n\n⚠️  Cancelled by user")
        return 130

    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"{Fore.RED}❌ {args.command}: {e}{Style.RESET_ALL}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
