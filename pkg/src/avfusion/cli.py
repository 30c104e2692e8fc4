"""Experiment command line.

Subcommands: gen-data | train | eval | ablate | gradcheck | report.
Every command is a pure function of (config file, seed, existing
artifacts); re-running with identical inputs reproduces identical outputs.

Exit codes: 0 success, 2 usage, 3 missing dependency/incompatibility,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data as D
from . import fusion as F
from . import noise as N
from . import train_eval as TE
from . import transformer as tf
from .config import load_experiment, save_experiment
from .errors import (AvFusionError, CompatibilityError, ConfigError,
                     ContractError, CorpusParseError, DependencyError,
                     NumericError, SchemaError, TrainingError,
                     VocabularyError)
from .gradsuite import run_fusion_suite, run_op_suite
from .report import write_report

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERIC = 4

VARIANT_CHOICES = list(F.VARIANTS)


# ---------------------------------------------------------------------------
# Shared experiment plumbing
# ---------------------------------------------------------------------------

class Workspace:
    """Resolved paths and lazily loaded artifacts for one experiment."""

    def __init__(self, args):
        if not os.path.isfile(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        self.cfg = load_experiment(args.config)
        if getattr(args, "seed", None) is not None:
            self.cfg.seed = args.seed
        if getattr(args, "out", None):
            self.cfg.output_dir = args.out
        self.digest = self.cfg.digest()
        self.root = self.cfg.output_dir

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def corpus_path(self):
        return self.path("corpus.jsonl")

    def manifest_path(self, pool):
        return self.path(f"noise_{pool}.json")

    def checkpoint_path(self, variant, stage):
        return self.path("checkpoints", f"{variant}_stage{stage}.ckpt")

    def results_path(self):
        return self.path("results.csv")

    def load_corpus(self):
        path = self.corpus_path()
        if not os.path.isfile(path):
            raise DependencyError(
                f"corpus not found: {path} (run gen-data first)")
        corpus = D.read_corpus(path)
        if corpus.config.digest() != self.cfg.corpus.digest():
            raise CompatibilityError(
                f"corpus at {path} was generated from a different corpus "
                f"config")
        return corpus

    def build_pools(self):
        cfg = self.cfg.noise
        pools = {}
        for index, name in enumerate(("pool_A", "pool_B")):
            speakers = N.make_pool(name, cfg.n_speakers, cfg.seed, index,
                                   feature_dim=self.cfg.corpus.audio_dim)
            partition = N.partition_speakers(speakers, cfg.fractions,
                                             cfg.partition_seed)
            pools[name] = (speakers, partition)
        return pools

    def train_babble_speakers(self, pools):
        speakers, partition = pools["pool_A"]
        return N.speakers_in(speakers, partition.train)


def _train_one_stage(ws, variant, stage, pools, corpus, seed_offset=0):
    """Build (and for stage 2 warm-start) a model, train it, save artifacts."""
    seed = ws.cfg.seed + seed_offset
    model = F.build_model(variant, ws.cfg.model, seed)
    if stage == 2:
        stage1_path = ws.checkpoint_path("audio_only", 1)
        if not os.path.isfile(stage1_path):
            raise DependencyError(
                f"stage-2 training requires the stage-1 checkpoint at "
                f"{stage1_path}")
        F.load_shared(model, tf.load_checkpoint(stage1_path))
        stage_cfg = ws.cfg.stage2
        train_cfg = stage_cfg.train_config("stage2_av", seed)
        babble = ws.train_babble_speakers(pools)
    else:
        stage_cfg = ws.cfg.stage1
        train_cfg = stage_cfg.train_config("stage1_audio", seed)
        babble = None
    trace = TE.train(model, corpus, train_cfg, babble_speakers=babble)
    os.makedirs(ws.path("checkpoints"), exist_ok=True)
    os.makedirs(ws.path("logs"), exist_ok=True)
    label = _variant_label(variant)
    ckpt = ws.path("checkpoints", f"{label}_stage{stage}.ckpt")
    tf.save_checkpoint(ckpt, model.named_parameters())
    F.write_sidecar(f"{ckpt}.json", model, ws.digest)
    TE.write_loss_trace(ws.path("logs", f"{label}_stage{stage}_loss.csv"),
                        trace, ws.digest)
    return model, ckpt, trace


def _variant_label(variant):
    return variant.kind


def _eval_conditions(eval_cfg, pools):
    conditions = ["clean"]
    for pool in eval_cfg.pools:
        for snr in eval_cfg.snrs_db:
            conditions.append(N.SnrSpec(float(snr), pool))
    return conditions


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    ws = Workspace(args)
    os.makedirs(ws.root, exist_ok=True)
    corpus = D.generate_corpus(ws.cfg.corpus)
    D.write_corpus(corpus, ws.corpus_path())
    pools = ws.build_pools()
    for name, (speakers, partition) in pools.items():
        N.write_pool_manifest(ws.manifest_path(name), name, speakers,
                              partition, ws.digest)
    save_experiment(ws.cfg, ws.path("config.json"))
    print(f"corpus: {ws.corpus_path()}")
    for name in pools:
        print(f"manifest: {ws.manifest_path(name)}")
    print(f"config digest: {ws.digest}")
    return EXIT_OK


def cmd_train(args):
    ws = Workspace(args)
    corpus = ws.load_corpus()
    pools = ws.build_pools()
    variant = F.ModelVariant(args.variant).validate(ws.cfg.model)
    model, ckpt, trace = _train_one_stage(ws, variant, args.stage, pools,
                                          corpus)
    final = trace[-1][2] if trace else float("nan")
    print(f"checkpoint: {ckpt}")
    print(f"steps: {len(trace)}  final loss: {final:.4f}")
    return EXIT_OK


def cmd_eval(args):
    ws = Workspace(args)
    corpus = ws.load_corpus()
    pools = ws.build_pools()
    ckpt_path = args.checkpoint or ws.checkpoint_path(args.variant, args.stage)
    if not os.path.isfile(ckpt_path):
        raise DependencyError(f"checkpoint not found: {ckpt_path}")
    sidecar = f"{ckpt_path}.json"
    if not os.path.isfile(sidecar):
        raise DependencyError(f"checkpoint sidecar not found: {sidecar}")
    variant, model_cfg, seed, _ = F.read_sidecar(sidecar)
    model = F.build_model(variant, model_cfg, seed)
    F.load_state(model, tf.load_checkpoint(ckpt_path))
    beam = args.beam or ws.cfg.eval.beam
    rows = TE.evaluate(model, corpus, ws.cfg.eval.split,
                       _eval_conditions(ws.cfg.eval, pools), seed=ws.cfg.seed,
                       pools=pools, beam=beam,
                       length_norm=ws.cfg.eval.length_norm,
                       babble_overlap=ws.cfg.noise.babble_overlap)
    TE.write_results(ws.results_path(), rows, ws.digest)
    print(f"results: {ws.results_path()} (+{len(rows)} rows)")
    for row in rows:
        print(f"  {row.variant:10s} {row.noise_pool:7s} {row.snr_label:>6s} "
              f"{row.split}: wer={row.wer:.4f}")
    return EXIT_OK


def cmd_ablate(args):
    ws = Workspace(args)
    corpus = ws.load_corpus()
    pools = ws.build_pools()
    stage1_path = ws.checkpoint_path("audio_only", 1)
    if not os.path.isfile(stage1_path):
        raise DependencyError(
            f"ablate requires the stage-1 checkpoint at {stage1_path}")
    n_taps = ws.cfg.model.n_enc_visual
    eval_cfg = ws.cfg.eval
    conditions = ["clean", N.SnrSpec(0.0, "pool_A")]
    all_rows = []
    for design in ("add", "concat"):
        for tap in range(n_taps + 1):
            variant = F.ModelVariant("dual_use", fusion_design=design,
                                     visual_tap_block=tap)
            model, _, _ = _train_one_stage_label(
                ws, variant, pools, corpus, f"dual_use_{design}_tap{tap}")
            rows = TE.evaluate(model, corpus, eval_cfg.split, conditions,
                               seed=ws.cfg.seed, pools=pools, beam=1,
                               babble_overlap=ws.cfg.noise.babble_overlap)
            rows = [TE.EvalRow(variant=f"dual_use[{design},tap{tap}]",
                               mode=r.mode, params=r.params,
                               noise_pool=r.noise_pool, snr_label=r.snr_label,
                               split=r.split, wer=r.wer) for r in rows]
            all_rows.extend(rows)
            print(f"ablate {design} tap={tap}: "
                  + "  ".join(f"{r.snr_label}={r.wer:.4f}" for r in rows))
    TE.write_results(ws.results_path(), all_rows, ws.digest)
    print(f"results: {ws.results_path()} (+{len(all_rows)} rows)")
    return EXIT_OK


def _train_one_stage_label(ws, variant, pools, corpus, label):
    seed = ws.cfg.seed
    model = F.build_model(variant, ws.cfg.model, seed)
    stage1_path = ws.checkpoint_path("audio_only", 1)
    F.load_shared(model, tf.load_checkpoint(stage1_path))
    train_cfg = ws.cfg.stage2.train_config("stage2_av", seed)
    trace = TE.train(model, corpus, train_cfg,
                     babble_speakers=ws.train_babble_speakers(pools))
    os.makedirs(ws.path("checkpoints"), exist_ok=True)
    os.makedirs(ws.path("logs"), exist_ok=True)
    ckpt = ws.path("checkpoints", f"{label}_stage2.ckpt")
    tf.save_checkpoint(ckpt, model.named_parameters())
    F.write_sidecar(f"{ckpt}.json", model, ws.digest)
    TE.write_loss_trace(ws.path("logs", f"{label}_stage2_loss.csv"), trace,
                        ws.digest)
    return model, ckpt, trace


def cmd_gradcheck(args):
    op_results = run_op_suite(instances_per_op=args.instances, seed=args.seed or 0)
    print(f"{'op':24s} max_rel_err")
    failed = False
    for name, err in sorted(op_results.items()):
        status = "ok" if err < 1e-5 else "FAIL"
        failed = failed or err >= 1e-5
        print(f"{name:24s} {err:.3e}  {status}")
    fusion_results = run_fusion_suite(seed=args.seed or 0)
    for name, err in fusion_results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        failed = failed or err >= 1e-4
        print(f"fusion/{name:17s} {err:.3e}  {status}")
    if failed:
        print("gradient check FAILED")
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def cmd_report(args):
    paths = args.results
    if not paths:
        ws = Workspace(args)
        paths = [ws.results_path()]
    for path in paths:
        if not os.path.isfile(path):
            raise DependencyError(f"results file not found: {path}")
    out_dir = args.out or os.path.dirname(os.path.abspath(paths[0]))
    written = write_report(paths, out_dir, allow_mixed=args.allow_mixed)
    print(f"report: {written['report']}")
    print(f"plot data: {written['plot_data']}")
    for fig in written["figures"]:
        print(f"figure: {fig}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="avfusion",
        description="Audiovisual fusion ASR experiments under babble noise")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's global seed")
        p.add_argument("--out", default=None,
                       help="override the config's output directory")

    p = sub.add_parser("gen-data", help="generate corpus and noise manifests")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant for one stage")
    common(p)
    p.add_argument("--variant", required=True, choices=VARIANT_CHOICES)
    p.add_argument("--stage", required=True, type=int, choices=(1, 2))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over noise conditions")
    common(p)
    p.add_argument("--variant", default="audio_only", choices=VARIANT_CHOICES)
    p.add_argument("--stage", type=int, default=2, choices=(1, 2))
    p.add_argument("--checkpoint", default=None,
                   help="explicit checkpoint path (overrides variant/stage)")
    p.add_argument("--beam", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate",
                       help="sweep fusion design x visual tap for dual_use")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run gradient verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=25,
                   help="random instances per op")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render tables and figures from results")
    common(p, config_required=False)
    p.add_argument("results", nargs="*", help="results CSV paths")
    p.add_argument("--allow-mixed", action="store_true",
                   help="combine results with differing config digests")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, VocabularyError, SchemaError,
            CorpusParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DependencyError, CompatibilityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AvFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
