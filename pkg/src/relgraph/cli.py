"""Command-line entry point for reproducible runs.

Commands: ``gen-data``, ``train``, ``eval``, ``inspect``, ``gradcheck``,
``ablate``. Every command that writes an artifact also writes a manifest
next to it (``<output>.manifest.json``, written atomically) holding the
command name, the fully defaulted config snapshots, all seeds and paths, the
tool version and wall-clock info; rerunning a command from its manifest
reproduces the output byte for byte.

Exit codes are stable: 0 ok, 2 config error, 3 I/O or malformed data,
4 training divergence, 5 checkpoint/data mismatch, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tc
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DivergenceError,
    MismatchError,
)
from .evaluate import (
    adjacency_matrix,
    attention_alignment,
    default_ablation_grid,
    evaluate_dataset,
    export_heatmap,
    run_ablation,
    summarize_ablation,
    write_ablation_csv,
)
from .model import ModelConfig, ModelParams, scene_losses
from .scenes import GenConfig, generate_dataset, generate_scene, read_dataset, write_dataset
from .train import TrainConfig, init_params, load_checkpoint, save_checkpoint, train_run

GRADCHECK_THRESHOLD = 1e-4

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_MISMATCH = 5
EXIT_GRADCHECK = 6


def _load_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _gen_config(path: str | None) -> GenConfig:
    return GenConfig.from_json(_load_json(path)) if path else GenConfig().validate()


def _model_config(path: str | None) -> ModelConfig:
    return ModelConfig.from_json(_load_json(path)) if path else ModelConfig().validate()


def _train_config(path: str | None) -> TrainConfig:
    return TrainConfig.from_json(_load_json(path)) if path else TrainConfig().validate()


def _write_manifest(output: str | Path, command: str, started: float, **payload) -> None:
    doc = {
        "command": command,
        "tool_version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
        **payload,
    }
    path = Path(str(output) + ".manifest.json")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    started = time.time()
    if args.scenes < 0:
        raise ConfigError("scenes must be >= 0")
    if args.seed < 0:
        raise ConfigError("seed must be >= 0")
    cfg = _gen_config(args.config)
    scenes = generate_dataset(cfg, args.scenes, args.seed)
    write_dataset(scenes, args.out)
    _write_manifest(
        args.out, "gen-data", started,
        seeds={"base_seed": args.seed},
        inputs={"config": args.config},
        outputs={"dataset": str(args.out)},
        config={"generator": cfg.to_json()},
        n_scenes=args.scenes,
    )
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    scenes = read_dataset(args.data)
    model_cfg = _model_config(args.model_config)
    train_cfg = _train_config(args.train_config)
    try:
        ckpt, history = train_run(scenes, model_cfg, train_cfg)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    save_checkpoint(args.out, ckpt)
    losses_path = Path(str(args.out) + ".losses.csv")
    with open(losses_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,object_loss,relation_loss,presence_loss,total_loss\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['object']!r},{row['relation']!r},"
                f"{row['presence']!r},{row['total']!r}\n"
            )
    _write_manifest(
        args.out, "train", started,
        seeds={"train_seed": train_cfg.seed},
        inputs={"data": str(args.data)},
        outputs={"checkpoint": str(args.out), "losses": str(losses_path)},
        config={"model": model_cfg.to_json(), "train": train_cfg.to_json()},
    )
    last = history[-1]["total"] if history else float("nan")
    print(f"trained {train_cfg.epochs} epochs, final mean total loss {last:.6f}")
    return EXIT_OK


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(sorted({int(part) for part in text.split(",") if part.strip()}))
    except ValueError as exc:
        raise ConfigError(f"invalid k list '{text}'") from exc
    if not ks or ks[0] < 1:
        raise ConfigError(f"invalid k list '{text}'")
    return ks


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    if args.task not in ("predcls", "sgcls"):
        raise ConfigError("task must be 'predcls' or 'sgcls'")
    ks = _parse_ks(args.k)
    scenes = read_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    report = evaluate_dataset(scenes, ckpt.params(), ckpt.model_config, args.task, ks)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
    _write_manifest(
        args.report, "eval", started,
        seeds={},
        inputs={"data": str(args.data), "checkpoint": str(args.ckpt)},
        outputs={"report": str(args.report)},
        config={"task": args.task, "ks": list(ks), "model": ckpt.model_config.to_json()},
    )
    summary = " ".join(f"R@{k}={report.recalls[k]:.4f}" for k in ks)
    print(f"{args.task} {summary} scenes={report.n_scenes}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    started = time.time()
    scenes = read_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    scene = next((s for s in scenes if s.scene_id == args.scene_id), None)
    if scene is None:
        raise ConfigError(f"unknown scene id '{args.scene_id}'")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .model import forward

    output = forward(scene, ckpt.params(), ckpt.model_config)
    written = {}
    for k, attn in enumerate(output.object_attention, start=1):
        paths = export_heatmap(attn.data, out_dir / f"object_attention_{k}")
        written[f"object_attention_{k}"] = [str(p) for p in paths]
    for k, attn in enumerate(output.edge_attention, start=1):
        paths = export_heatmap(attn.data, out_dir / f"edge_attention_{k}")
        written[f"edge_attention_{k}"] = [str(p) for p in paths]
    adj = adjacency_matrix(scene)
    written["gt_adjacency"] = [str(p) for p in export_heatmap(adj, out_dir / "gt_adjacency")]
    alignment = None
    if output.object_attention:
        last = output.object_attention[-1].data
        folded = 0.5 * (last + last.T)
        written["folded_attention"] = [
            str(p) for p in export_heatmap(folded, out_dir / "folded_attention")
        ]
        alignment = attention_alignment(last, adj)
    with open(out_dir / "alignment.json", "w", encoding="utf-8") as fh:
        json.dump({"scene_id": scene.scene_id, "attention_alignment": alignment}, fh, indent=2)
    _write_manifest(
        out_dir / "inspect", "inspect", started,
        seeds={},
        inputs={"data": str(args.data), "checkpoint": str(args.ckpt), "scene_id": args.scene_id},
        outputs=written,
        config={"model": ckpt.model_config.to_json()},
    )
    print(f"inspect: {scene.scene_id} alignment={alignment}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.eps <= 0:
        raise ConfigError("eps must be positive")
    if args.seed < 0:
        raise ConfigError("seed must be >= 0")
    model_cfg = _model_config(args.model_config)
    gen_cfg = GenConfig(
        c_obj=model_cfg.c_obj,
        c_rel=model_cfg.c_rel,
        d_roi=model_cfg.d_roi,
        d_img=model_cfg.d_img,
        n_range=(3, 3),
        rng_seed=args.seed,
    ).validate()
    scene = generate_scene(gen_cfg, args.seed)
    params = init_params(model_cfg, args.seed)

    def loss_fn(_mapping):
        loss = scene_losses(scene, params, model_cfg)[0]
        if args.sabotage:
            p = params["obj_out.w"]
            loss = tc.add(loss, tc.sum_all(tc.sub(tc.corrupt_grad_identity(p), p)))
        return loss

    max_err, worst = tc.finite_diff_report(loss_fn, params.as_mapping(), eps=args.eps)
    ok = max_err < GRADCHECK_THRESHOLD
    print(f"gradcheck: max relative error {max_err:.3e} (worst parameter: {worst})")
    if not ok:
        print(f"gradcheck failed: worst parameter '{worst}'", file=sys.stderr)
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.time()
    if args.seeds < 1:
        raise ConfigError("seeds must be >= 1")
    scenes = read_dataset(args.data)
    model_cfg = _model_config(args.model_config)
    train_cfg = _train_config(args.train_config)
    if args.grid:
        raw = _load_json(args.grid)
        if not isinstance(raw, list):
            raise ConfigError(f"{args.grid}: grid must be a JSON array")
        grid = []
        for cell in raw:
            if "name" not in cell:
                raise ConfigError(f"{args.grid}: grid cell without 'name'")
            grid.append((str(cell["name"]), dict(cell.get("deltas", {}))))
    else:
        grid = default_ablation_grid()
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    rows = run_ablation(scenes, model_cfg, train_cfg, grid, seeds)
    write_ablation_csv(rows, args.out)
    _write_manifest(
        args.out, "ablate", started,
        seeds={"seeds": seeds},
        inputs={"data": str(args.data), "grid": args.grid},
        outputs={"csv": str(args.out)},
        config={
            "model": model_cfg.to_json(),
            "train": train_cfg.to_json(),
            "grid": [{"name": n, "deltas": d} for n, d in grid],
        },
    )
    summary = summarize_ablation(rows)
    for cell, stats in summary.items():
        m, s = stats[20]
        print(f"{cell}: SGCls R@20 = {m:.4f} +- {s:.4f}")
    if all(row.get("error") is not None for row in rows):
        print("ablate: every cell failed", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relgraph", description="Synthetic scene-graph prediction toolkit."
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a JSONL scene dataset")
    p.add_argument("--config", default=None, help="generator config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, choices=["predcls", "sgcls"])
    p.add_argument("--k", default="20,50,100")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="export attention heatmaps for one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--model-config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--sabotage", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default=None, help="grid JSON; defaults to the built-in grid")
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per cell")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (MismatchError, CheckpointError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    raise SystemExit(main())
