"""``evdrank`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from typing import Sequence

from . import pipeline
from .encoder import save_corpus
from .errors import EvdRankError
from .synth import make_confusable_corpus


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--backend", choices=("mock", "remote"), help="LLM backend (overrides the config)")
    common.add_argument("--workdir", help="directory that relative artifact paths resolve against")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="evdrank", parents=[common],
                                 description="Entity-description query rewriting for dual-encoder retrieval.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("build-kb", parents=[common], help="build the entity description knowledge base")
    sub.add_parser("build-dqr", parents=[common], help="distill the scored rewrite dataset")
    p = sub.add_parser("train-rewriter", parents=[common], help="train the rewrite policy")
    p.add_argument("--phase", choices=("warmup", "align"), required=True)
    sub.add_parser("finetune-retriever", parents=[common], help="contrastive fine-tuning with rewritten queries")
    p = sub.add_parser("evaluate", parents=[common], help="Recall@1/5/10 in both directions")
    p.add_argument("--strategy", choices=pipeline.STRATEGIES + ("all",))
    p = sub.add_parser("kb-edit", parents=[common], help="inject knowledge or add a parallel sense")
    p.add_argument("--op", choices=("inject", "add-sense"), required=True)
    p.add_argument("--entity", required=True)
    p.add_argument("--sense-tag")
    p.add_argument("--default-tag", help="tag given to the existing untagged sense (add-sense)")
    p.add_argument("--description", action="append", required=True, dest="descriptions")
    p = sub.add_parser("make-corpus", parents=[common], help="write the synthetic confusable-entity corpus")
    p.add_argument("--out", required=True)
    sub.add_parser("run", parents=[common], help="every stage from build-kb to evaluate")
    return ap


def _config(args) -> pipeline.PipelineConfig:
    overrides = {"seed": args.seed, "backend": args.backend, "workdir": args.workdir}
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    return pipeline.load_config(args.config, **overrides)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        cmd = args.command
        if cmd == "build-kb":
            _print(asdict(pipeline.cmd_build_kb(cfg)))
        elif cmd == "build-dqr":
            _print(asdict(pipeline.cmd_build_dqr(cfg)))
        elif cmd == "train-rewriter":
            pipeline.cmd_train_rewriter(cfg, args.phase)
        elif cmd == "finetune-retriever":
            pipeline.cmd_finetune_retriever(cfg)
        elif cmd == "evaluate":
            for row in pipeline.cmd_evaluate(cfg):
                _print(row)
        elif cmd == "kb-edit":
            kb = pipeline.cmd_kb_edit(cfg, args.op, args.entity, args.descriptions, args.sense_tag,
                                      args.default_tag)
            _print({"entries": len(kb), "version": kb.version})
        elif cmd == "make-corpus":
            save_corpus(make_confusable_corpus(seed=cfg.seed), args.out)
        elif cmd == "run":
            for row in pipeline.run_all(cfg):
                _print(row)
    except (EvdRankError, ValueError, OSError) as exc:
        print(f"evdrank: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
