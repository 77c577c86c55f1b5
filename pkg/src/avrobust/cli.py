"""Command-line entry point wiring configs to every pipeline stage.

Stages communicate only through files under the output root (flag --out,
else $AVROBUST_OUTPUT_ROOT, else ./runs). Every run writes its resolved
config and seed next to its outputs. Exit codes: 0 success, 2 config error,
3 missing dependency, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import analysis
from .config import (
    ExperimentConfig,
    config_to_dict,
    dump_config,
    load_config,
)
from .corruption import PatchBank, apply_audio, apply_video, sample_plan
from .data import (
    generate_corpus,
    generate_noise_banks,
    load_manifest,
    load_noise_banks,
    write_tensor,
)
from .errors import ConfigError, DependencyError, DivergenceError
from .losses import ABLATION_GRID, ablation_weights
from .masking import sample_mask_plan
from .model import ModalityMode, load_checkpoint
from .training import (
    CorpusCache,
    EvalCondition,
    evaluate,
    finetune,
    uptrain,
)

_STREAM_CORRUPT_STAGE = 30

OUTPUT_ROOT_ENV = "AVROBUST_OUTPUT_ROOT"

# corruption-ratio sensitivity grid: (visual range, audio range)
RATIO_GRID = [
    ((0.1, 0.5), (0.3, 0.5)),
    ((0.1, 0.1), (0.3, 0.3)),
    ((0.3, 0.3), (0.5, 0.5)),
    ((0.5, 0.5), (0.7, 0.7)),
    ((0.7, 0.7), (0.9, 0.9)),
]


def _out_root(args) -> str:
    return args.out or os.environ.get(OUTPUT_ROOT_ENV) or "runs"


def _stage_dir(args, name: str) -> str:
    path = os.path.join(_out_root(args), name)
    os.makedirs(path, exist_ok=True)
    return path


def _freeze_config(cfg: ExperimentConfig, stage_dir: str) -> None:
    dump_config(cfg, os.path.join(stage_dir, "config.frozen.yaml"))
    with open(os.path.join(stage_dir, "seed.json"), "w") as f:
        json.dump({"seed": cfg.seed}, f)


def _load_corpus(args, cfg: ExperimentConfig, split: str) -> CorpusCache:
    corpus_dir = args.corpus or os.path.join(_out_root(args), "corpus")
    manifest = load_manifest(corpus_dir)
    banks = load_noise_banks(corpus_dir)
    patch_bank = PatchBank(cfg.synth.video_size, cfg.seed)
    return CorpusCache(manifest, banks, patch_bank, split)


def cmd_corpus(args, cfg: ExperimentConfig) -> int:
    stage = _stage_dir(args, "corpus")
    manifest = generate_corpus(
        cfg.synth, cfg.corpus.n_train, cfg.corpus.n_valid, cfg.corpus.n_test, stage
    )
    generate_noise_banks(
        cfg.synth,
        manifest,
        stage,
        clips_per_bank=cfg.corpus.bank_clips,
        clip_length=cfg.corpus.bank_clip_length,
        babble_k=cfg.corpus.babble_k,
        n_heldout=cfg.corpus.n_heldout,
    )
    _freeze_config(cfg, stage)
    print(f"corpus: {len(manifest.entries)} sequences in {stage}")
    return 0


def cmd_corrupt(args, cfg: ExperimentConfig) -> int:
    stage = _stage_dir(args, "corrupted")
    corpus_dir = args.corpus or os.path.join(_out_root(args), "corpus")
    manifest = load_manifest(corpus_dir)
    banks = load_noise_banks(corpus_dir)
    patch_bank = PatchBank(cfg.synth.video_size, cfg.seed)

    from .data import load_sequence

    log_path = os.path.join(stage, "corruption.log.jsonl")
    os.makedirs(os.path.join(stage, "seqs"), exist_ok=True)
    with open(log_path, "w") as log:
        for idx, entry in enumerate(manifest.entries):
            seq = load_sequence(manifest, entry.id)
            rng = np.random.default_rng([cfg.seed, _STREAM_CORRUPT_STAGE, idx])
            plan = sample_plan(
                seq.length, cfg.corruption, rng,
                banks=banks, bank_split=seq.split, patch_bank=patch_bank,
            )
            mask = sample_mask_plan(seq.length, cfg.mask, plan, rng)
            stem = os.path.join(stage, "seqs", entry.id)
            write_tensor(stem + ".audio", apply_audio(seq.audio, plan, banks, seq.split))
            write_tensor(stem + ".video", apply_video(seq.video, plan, patch_bank))
            log.write(
                json.dumps(
                    {
                        "id": entry.id,
                        "split": seq.split,
                        "plan": plan.to_record(),
                        "mask": mask.to_record(),
                    }
                )
                + "\n"
            )
    _freeze_config(cfg, stage)
    print(f"corrupt: wrote {len(manifest.entries)} corrupted sequences to {stage}")
    return 0


def cmd_uptrain(args, cfg: ExperimentConfig) -> int:
    stage = _stage_dir(args, args.name or "uptrain")
    corpus = _load_corpus(args, cfg, "train")
    ckpt, log = uptrain(cfg.uptrain, cfg.model, corpus, stage, init_checkpoint=args.init)
    _freeze_config(cfg, stage)
    print(f"uptrain: checkpoint {ckpt}, log {log}")
    return 0


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    stage = _stage_dir(args, args.name or "finetune")
    corpus = _load_corpus(args, cfg, "train")
    ckpt, log = finetune(cfg.finetune, cfg.model, corpus, stage, init_checkpoint=args.init)
    _freeze_config(cfg, stage)
    print(f"finetune: checkpoint {ckpt}, log {log}")
    return 0


def _eval_mode(name: str) -> ModalityMode:
    return {
        "av": ModalityMode.AV,
        "audio": ModalityMode.AUDIO_ONLY,
        "video": ModalityMode.VIDEO_ONLY,
    }[name]


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    stage = _stage_dir(args, args.name or "eval")
    if not args.ckpt or not os.path.exists(args.ckpt):
        raise DependencyError(f"checkpoint not found: {args.ckpt}")
    model, _, _ = load_checkpoint(args.ckpt)
    if model.decoder is None:
        raise DependencyError("evaluation needs a fine-tuned checkpoint with a decoder")
    corpus = _load_corpus(args, cfg, "test")
    grid = [
        EvalCondition(kind, cat, snr)
        for kind in cfg.eval.visual_kinds
        for cat in cfg.eval.audio_categories
        for snr in cfg.eval.snrs
    ]
    mode = _eval_mode(args.mode or cfg.eval.mode)
    report = evaluate(
        model, corpus, grid, mode=mode, seed=cfg.seed, corruption=cfg.corruption
    )
    report_path = os.path.join(stage, "eval_report.json")
    with open(report_path, "w") as f:
        f.write(report.to_json())
    print(report.render_table())
    _freeze_config(cfg, stage)
    print(f"eval: report {report_path}")
    return 0


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    stage = _stage_dir(args, args.name or "analyze")
    if not args.ckpt or not os.path.exists(args.ckpt):
        raise DependencyError(f"checkpoint not found: {args.ckpt}")
    model, _, _ = load_checkpoint(args.ckpt)
    corpus = _load_corpus(args, cfg, args.split)
    ids = corpus.ids()[: args.limit] if args.limit else corpus.ids()

    clean = analysis.embed_set(model, corpus, ids, ModalityMode.AV)
    corrupted = analysis.embed_set(
        model, corpus, ids, ModalityMode.AV,
        corruption=cfg.corruption, seed=cfg.seed,
        bank_split=corpus.split,
    )
    sim = analysis.similarity(clean, corrupted, ids)

    modes = {
        "av": clean,
        "audio": analysis.embed_set(model, corpus, ids, ModalityMode.AUDIO_ONLY),
        "video": analysis.embed_set(model, corpus, ids, ModalityMode.VIDEO_ONLY),
    }
    gaps = analysis.modality_gap(
        modes, [("av", "av"), ("audio", "av"), ("video", "av"), ("audio", "video")]
    )

    with open(os.path.join(stage, "similarity.json"), "w") as f:
        f.write(sim.to_json())
    np.savetxt(
        os.path.join(stage, "similarity_matrix.csv"), sim.matrix, delimiter=","
    )
    with open(os.path.join(stage, "modality_gap.json"), "w") as f:
        json.dump([dataclasses.asdict(g) for g in gaps], f, indent=2)
    if args.png:
        _render_heatmap(sim.matrix, os.path.join(stage, "similarity.png"))
    _freeze_config(cfg, stage)
    print(f"analyze: d_bar={sim.d_bar:.4f}; " +
          "; ".join(f"d_avg{g.pair}={g.d_avg:.4f}" for g in gaps))
    return 0


def _render_heatmap(matrix: np.ndarray, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("corrupted")
    ax.set_ylabel("clean")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    stage = _stage_dir(args, args.name or "ablate")
    corpus = _load_corpus(args, cfg, "train")
    runs = []
    if args.grid == "tasks":
        for row_idx, row in enumerate(ABLATION_GRID):
            run_cfg = dataclasses.replace(
                cfg.uptrain, weights=ablation_weights(row), steps=args.steps or cfg.uptrain.steps
            )
            runs.append((f"task-{row_idx:02d}", run_cfg, row))
    elif args.grid == "ratios":
        for row_idx, (vis, aud) in enumerate(RATIO_GRID):
            corr = dataclasses.replace(
                cfg.uptrain.corruption, visual_ratio_range=vis, audio_ratio_range=aud
            )
            run_cfg = dataclasses.replace(
                cfg.uptrain, corruption=corr, steps=args.steps or cfg.uptrain.steps
            )
            runs.append((f"ratio-{row_idx:02d}", run_cfg, {"visual": vis, "audio": aud}))
    else:
        raise ConfigError(f"unknown ablation grid {args.grid!r}")

    for name, run_cfg, descriptor in runs:
        run_dir = os.path.join(stage, name)
        os.makedirs(run_dir, exist_ok=True)
        run_exp = dataclasses.replace(cfg, uptrain=run_cfg)
        dump_config(run_exp, os.path.join(run_dir, "config.frozen.yaml"))
        with open(os.path.join(run_dir, "cell.json"), "w") as f:
            json.dump({"name": name, "descriptor": descriptor}, f)
        if not args.dry_run:
            uptrain(run_cfg, cfg.model, corpus, run_dir)
            print(f"ablate: finished {name}")
    print(f"ablate: {len(runs)} configurations in {stage}")
    return 0


_COMMANDS = {
    "corpus": cmd_corpus,
    "corrupt": cmd_corrupt,
    "uptrain": cmd_uptrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avrobust",
        description="Robust audio-visual recognition experiments on a synthetic corpus",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML experiment config")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY.PATH=VALUE", help="override a config value",
        )
        p.add_argument("--out", default=None, help="output root directory")
        p.add_argument("--corpus", default=None, help="corpus directory")
        p.add_argument("--name", default=None, help="stage directory name")
        if name in ("uptrain", "finetune"):
            p.add_argument("--init", default=None, help="initial checkpoint")
        if name in ("eval", "analyze"):
            p.add_argument("--ckpt", required=True, help="model checkpoint")
        if name == "eval":
            p.add_argument("--mode", choices=["av", "audio", "video"], default=None)
        if name == "analyze":
            p.add_argument("--split", default="valid")
            p.add_argument("--limit", type=int, default=None)
            p.add_argument("--png", action="store_true")
        if name == "ablate":
            p.add_argument("--grid", choices=["tasks", "ratios"], default="tasks")
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--dry-run", action="store_true")
    return parser


def _error_json(kind: str, exc: Exception) -> str:
    return json.dumps({"error": {"type": kind, "message": str(exc)}})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(_error_json("config", exc), file=sys.stderr)
        return 2
    except (DependencyError, FileNotFoundError, KeyError) as exc:
        print(_error_json("dependency", exc), file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(_error_json("divergence", exc), file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
