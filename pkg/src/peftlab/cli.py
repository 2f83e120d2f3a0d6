"""Command-line surface: train / merge / eval / ablate / inspect.

One command is one process. Every run is driven by a flat config file and a
seed, and everything randomness-consuming flows from numpy SeedSequences, so
rerunning a command reproduces its artifacts bit for bit. Exit codes are a
stable contract for harness scripting: 0 success, 1 config error, 2 data or
checkpoint error, 3 numeric/training error.

Set PEFTLAB_LOG=debug|info|warning|quiet to control stderr verbosity.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import (BackboneModel, backbone_checksum, backbone_param_count,
                       build_backbone, count_adaptation_params, freeze_backbone)
from .checkpoint import (Checkpoint, checkpoint_from_run, instantiate,
                         load_checkpoint, merge_checkpoint, save_checkpoint)
from .config import (INFERENCE_MODES, ConfigView, RunConfig, effective_entries,
                     load_config_file, load_run_config, run_config_from_entries)
from .data import LabeledExample, build_vocab, load_tsv, synthetic_task
from .errors import CheckpointError, ConfigError, PeftLabError
from .mixture import build_sites, site_parameters
from .training import TrainState, evaluate, train_loop, write_metrics_csv

log = logging.getLogger("peftlab")

_LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "warn": logging.WARNING,
    "quiet": logging.ERROR,
    "error": logging.ERROR,
}


def _setup_logging() -> None:
    name = os.environ.get("PEFTLAB_LOG", "info").strip().lower()
    level = _LOG_LEVELS.get(name, logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(message)s")
    log.setLevel(level)


class _Parser(argparse.ArgumentParser):
    """argparse's default error path calls sys.exit(2); we reserve 2 for data
    errors, so surface usage problems as config errors instead."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# -- task plumbing -----------------------------------------------------------


def _capped_vocab(vocab, vocab_size: int):
    if len(vocab) <= vocab_size:
        return vocab
    from .data import Vocab
    kept = vocab.id_to_token[:vocab_size]
    return Vocab(token_to_id={t: i for i, t in enumerate(kept)}, id_to_token=kept)


def _split(examples: Sequence[LabeledExample], seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    cut = int(round(0.8 * len(examples)))
    return ([examples[i] for i in order[:cut]],
            [examples[i] for i in order[cut:]])


def load_task(run: RunConfig) -> Tuple[List[LabeledExample], List[LabeledExample]]:
    """(train, eval) examples for a run config; deterministic in the config."""
    if run.task_kind == "tsv":
        with open(run.task_path, "r", encoding="utf-8") as fh:
            texts = [line.rpartition("\t")[0] for line in fh if line.strip()]
        vocab = _capped_vocab(build_vocab(texts), run.backbone.vocab_size)
        examples = load_tsv(run.task_path, vocab, run.seq_len)
        bad = [ex for ex in examples if ex.label >= run.n_classes]
        if bad:
            raise ConfigError(
                f"task.classes = {run.n_classes} but {run.task_path} holds "
                f"label {max(ex.label for ex in bad)}")
        return _split(examples, run.task_seed)
    return synthetic_task(run.task_kind, run.n_examples,
                          run.backbone.vocab_size, run.seq_len,
                          run.n_classes, seed=run.task_seed)


def assemble(run: RunConfig):
    """Frozen backbone plus freshly initialized mixture sites."""
    model = build_backbone(run.backbone, seed=run.backbone_seed)
    freeze_backbone(model, head_trainable=run.head_trainable)
    sites = build_sites(model, variant=run.variant, M=run.train.M,
                        r=run.train.r, sharing=run.sharing,
                        insert_attention=run.insert_attention,
                        alpha=run.lora_alpha, seed=run.module_seed)
    return model, sites


def _eval_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.default_rng(0 if seed is None else seed)


def run_eval(model, sites, examples, mode: str, T: int,
             seed: Optional[int]) -> float:
    rng = _eval_rng(seed) if mode in ("random_route", "ensemble") else None
    return evaluate(model, sites, examples, mode=mode, rng=rng, T=T)


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    stem = os.path.splitext(os.path.basename(args.config))[0]
    out_dir = args.out or run.raw.get("out.dir") or f"{stem}.run"
    os.makedirs(out_dir, exist_ok=True)

    train_ex, eval_ex = load_task(run)
    log.info("task %s: %d train / %d eval examples", run.task_kind,
             len(train_ex), len(eval_ex))
    model, sites = assemble(run)
    before = backbone_checksum(model)

    # Per-epoch curves need a deterministic mode; the configured mode gets a
    # dedicated seeded evaluation afterwards.
    curve_mode = run.inference_mode if run.inference_mode in ("merge", "fixed_route") else "merge"
    t0 = time.time()
    state = train_loop(run.train, (train_ex, eval_ex), model, sites,
                       eval_mode=curve_mode)
    elapsed = time.time() - t0
    if backbone_checksum(model) != before:
        raise PeftLabError("backbone parameters changed during training")

    final_acc = run_eval(model, sites, eval_ex, run.inference_mode,
                         run.ensemble_T, run.train.seed)

    csv_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(state.history, csv_path)
    ckpt = checkpoint_from_run(model, sites, effective_entries(run),
                               step=state.step)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(ckpt_path, ckpt)

    from .plots import plot_loss_curves
    fig_path = plot_loss_curves(state.history, os.path.join(out_dir, "loss_curves.png"))

    for ep in state.epoch_summaries:
        log.info("epoch %2d: loss %.4f train_acc %.4f eval_acc %.4f",
                 ep["epoch"], ep["mean_loss"], ep["train_accuracy"],
                 ep["eval_accuracy"])
    log.info("trained %d steps in %.1fs (%d routing collisions)",
             state.step, elapsed, state.collisions_total)
    print(f"train_accuracy {state.epoch_summaries[-1]['train_accuracy']:.4f}")
    print(f"eval_accuracy {final_acc:.4f} mode={run.inference_mode}")
    for p in (csv_path, ckpt_path, fig_path):
        print(f"wrote {p}")
    return 0


# -- merge -------------------------------------------------------------------


def cmd_merge(args) -> int:
    ckpt = load_checkpoint(args.in_path)
    merged = merge_checkpoint(ckpt)
    save_checkpoint(args.out_path, merged)
    modules_in = sum(m.M for m in ckpt.sites)
    modules_out = sum(m.M for m in merged.sites)
    print(f"merged {modules_in} modules across {len(ckpt.sites)} sites "
          f"-> {modules_out} (one per site)")
    print(f"wrote {args.out_path}")
    return 0


# -- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    mode = args.mode
    if mode == "merge" and any(meta.M > 1 for meta in ckpt.sites):
        raise CheckpointError(
            f"{args.ckpt} holds unmerged mixtures (M > 1); run "
            f"`peftlab merge` first or evaluate with --mode random_route")

    model, sites = instantiate(ckpt)
    run = run_config_from_entries(ckpt.config)
    _, eval_ex = load_task(run)
    T = args.T if args.T is not None else run.ensemble_T
    acc = run_eval(model, sites, eval_ex, mode, T, args.seed)

    report = {
        "checkpoint": args.ckpt,
        "mode": mode,
        "accuracy": acc,
        "examples": len(eval_ex),
        "step": ckpt.step,
    }
    if mode in ("random_route", "ensemble"):
        report["seed"] = 0 if args.seed is None else args.seed
    if mode == "ensemble":
        report["T"] = T
    report_path = args.report or f"{os.path.splitext(args.ckpt)[0]}.eval-{mode}.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"accuracy {acc:.4f}")
    print(f"wrote {report_path}")
    return 0


# -- inspect -----------------------------------------------------------------


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    run = run_config_from_entries(ckpt.config)
    cfg = run.backbone

    print(f"checkpoint {args.ckpt}")
    print(f"  step {ckpt.step}")
    print(f"  backbone hash {ckpt.backbone_hash[:16]}...")
    print(f"  backbone shape: layers={cfg.num_layers} d={cfg.model_dim} "
          f"heads={cfg.num_heads} ffn={cfg.ffn_dim} vocab={cfg.vocab_size}")
    print(f"  task: {run.task_kind} ({run.n_classes} classes, seq {run.seq_len})")

    groups: Dict[tuple, int] = {}
    for meta in ckpt.sites:
        key = (meta.point, meta.variant, meta.M, meta.sharing, meta.r)
        groups[key] = groups.get(key, 0) + 1
    for (point, variant, M, sharing, r), n in sorted(groups.items()):
        print(f"  {n} sites at {point}: {variant} M={M} r={r} sharing={sharing}")

    stored = sum(arr.size for arr in ckpt.tensors.values())
    head = sum(arr.size for name, arr in ckpt.tensors.items()
               if name.startswith("head."))
    frozen = backbone_param_count(cfg, include_head=not run.head_trainable)
    print(f"  stored tensors: {len(ckpt.tensors)} ({stored:,} values; "
          f"{head:,} in the classifier head)")
    print(f"  frozen backbone parameters: {frozen:,}")

    if ckpt.sites:
        meta = ckpt.sites[0]
        points = len({(m.layer, m.point) for m in ckpt.sites}) // cfg.num_layers
        counted = count_adaptation_params(
            cfg.model_dim, cfg.num_layers, meta.r, variant=meta.variant,
            insertion_points=max(points, 1), sharing=meta.sharing,
            M=meta.M, phase="training")
        merged_count = count_adaptation_params(
            cfg.model_dim, cfg.num_layers, meta.r, variant=meta.variant,
            insertion_points=max(points, 1), sharing="none", M=1,
            phase="inference")
        print(f"  adaptation parameters (training): {counted:,}")
        print(f"  adaptation parameters (merged for inference): {merged_count:,}")
    return 0


# -- ablate ------------------------------------------------------------------


def _parse_sharing_axis(view: ConfigView, base: str) -> List[str]:
    words = view.get_str_list("grid.sharing", None)
    if words is None:
        return [base]
    out = []
    for w in words:
        lw = w.lower()
        if lw in ("project_up", "on", "true", "yes", "1"):
            out.append("project_up")
        elif lw in ("none", "off", "false", "no", "0"):
            out.append("none")
        else:
            raise ConfigError(f"grid.sharing: unknown value {w!r}")
    return out


def _parse_bool_axis(view: ConfigView, key: str, base: bool) -> List[bool]:
    words = view.get_str_list(key, None)
    if words is None:
        return [base]
    out = []
    for w in words:
        lw = w.lower()
        if lw in ("on", "true", "yes", "1"):
            out.append(True)
        elif lw in ("off", "false", "no", "0"):
            out.append(False)
        else:
            raise ConfigError(f"{key}: unknown value {w!r}")
    return out


def _ablate_job(base_entries: Dict[str, str], cell: dict, cell_index: int,
                seed: int, data, modes: Sequence[str], ensemble_T: int,
                want_band: bool):
    """Train one grid cell with one seed and evaluate every requested mode.

    Self-contained (fresh model, own RNG streams) so results are identical
    no matter which worker thread runs it or in what order.
    """
    entries = dict(base_entries)
    entries.update({
        "adapt.M": str(cell["M"]),
        "adapt.r": str(cell["r"]),
        "train.consistency": "true" if cell["consistency"] else "false",
        "adapt.sharing": cell["sharing"],
        "train.seed": str(seed),
    })
    run = run_config_from_entries(entries)
    model, sites = assemble(run)
    state = train_loop(run.train, data, model, sites, eval_mode="merge")

    _, eval_ex = data
    accs: Dict[str, float] = {}
    for mode in modes:
        rng_seed = int(np.random.SeedSequence(
            [seed, cell_index, INFERENCE_MODES.index(mode)]).generate_state(1)[0])
        accs[mode] = run_eval(model, sites, eval_ex, mode, ensemble_T, rng_seed)

    band = None
    if want_band:
        merged = evaluate(model, sites, eval_ex, mode="merge")
        rr = [evaluate(model, sites, eval_ex, mode="random_route",
                       rng=np.random.default_rng(1000 + t)) for t in range(20)]
        extra = {"fixed_route": evaluate(model, sites, eval_ex, mode="fixed_route"),
                 "ensemble": evaluate(model, sites, eval_ex, mode="ensemble",
                                      rng=np.random.default_rng(2000), T=ensemble_T)}
        band = (rr, merged, extra)

    curve = [ep["eval_accuracy"] for ep in state.epoch_summaries]
    train_acc = state.epoch_summaries[-1]["train_accuracy"]
    return accs, curve, train_acc, band


ABLATION_FIELDS = ("cell", "M", "r", "consistency", "sharing", "status", "seeds")


def cmd_ablate(args) -> int:
    entries = load_config_file(args.grid)
    base_entries = {k: v for k, v in entries.items() if not k.startswith("grid.")}
    view = ConfigView(entries)

    base_M = view.get_int("adapt.M", None)
    Ms = view.get_int_list("grid.M", None) or ([base_M] if base_M else None)
    if not Ms:
        raise ConfigError("missing required config field 'grid.M' (or 'adapt.M')")
    if base_M is None:
        base_entries["adapt.M"] = str(Ms[0])
    rs = view.get_int_list("grid.r", None) or [view.get_int("adapt.r", 8)]
    cons_axis = _parse_bool_axis(view, "grid.consistency",
                                 view.get_bool("train.consistency", True))
    sharing_axis = _parse_sharing_axis(view, view.get_str("adapt.sharing", "none"))
    seeds = view.get_int_list("grid.seeds", None) or [view.get_int("train.seed", 0)]
    modes = view.get_str_list("grid.modes", None) or list(INFERENCE_MODES)
    for mode in modes:
        if mode not in INFERENCE_MODES:
            raise ConfigError(f"grid.modes: {mode!r} not one of {INFERENCE_MODES}")

    base_run = run_config_from_entries(base_entries)
    data = load_task(base_run)  # one dataset, shared by every cell
    model_dim = base_run.backbone.model_dim
    ensemble_T = base_run.ensemble_T

    stem = os.path.splitext(os.path.basename(args.grid))[0]
    out_dir = args.out or entries.get("out.dir") or f"{stem}.ablation"
    os.makedirs(out_dir, exist_ok=True)

    cells = [{"M": M, "r": r, "consistency": c, "sharing": s}
             for M, r, c, s in itertools.product(Ms, rs, cons_axis, sharing_axis)]
    jobs = []  # (cell_index, seed, want_band)
    band_assigned = False
    for ci, cell in enumerate(cells):
        if cell["r"] >= model_dim:
            continue
        for seed in seeds:
            want_band = (not band_assigned) and cell["M"] > 1
            if want_band:
                band_assigned = True
            jobs.append((ci, seed, want_band))

    log.info("ablation grid: %d cells x %d seeds = %d runs (%d skipped cells)",
             len(cells), len(seeds),
             len(jobs), sum(1 for c in cells if c["r"] >= model_dim))

    t0 = time.time()
    def run_job(job):
        ci, seed, want_band = job
        return _ablate_job(base_entries, cells[ci], ci, seed, data, modes,
                           ensemble_T, want_band)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(j) for j in jobs]

    by_cell: Dict[int, list] = {}
    band_data = None
    curves: Dict[str, List[float]] = {}
    for (ci, seed, _), (accs, curve, train_acc, band) in zip(jobs, results):
        by_cell.setdefault(ci, []).append((seed, accs, train_acc))
        if band is not None:
            band_data = band
        if seed == seeds[0]:
            cell = cells[ci]
            label = (f"M={cell['M']} r={cell['r']} "
                     f"{'+c' if cell['consistency'] else '-c'} "
                     f"{'+s' if cell['sharing'] == 'project_up' else '-s'}")
            curves[label] = curve

    rows = []
    for ci, cell in enumerate(cells):
        row = {"cell": ci, "M": cell["M"], "r": cell["r"],
               "consistency": "on" if cell["consistency"] else "off",
               "sharing": cell["sharing"],
               "seeds": ";".join(str(s) for s in seeds)}
        if cell["r"] >= model_dim:
            row["status"] = "skipped"
            for mode in modes:
                row[f"{mode}_mean"] = ""
                row[f"{mode}_std"] = ""
            row["train_acc_mean"] = ""
        else:
            row["status"] = "ok"
            runs = by_cell[ci]
            for mode in modes:
                vals = [accs[mode] for _, accs, _ in runs]
                row[f"{mode}_mean"] = repr(float(np.mean(vals)))
                row[f"{mode}_std"] = repr(float(np.std(vals)))
            row["train_acc_mean"] = repr(float(np.mean([ta for _, _, ta in runs])))
        rows.append(row)

    import csv
    csv_path = os.path.join(out_dir, "ablation.csv")
    fields = list(ABLATION_FIELDS) + [f"{m}_{s}" for m in modes
                                      for s in ("mean", "std")] + ["train_acc_mean"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)

    from .plots import plot_ablation, plot_convergence, plot_routing_band
    written = [csv_path]
    plot_rows = [{**row,
                  **{f"{m}_mean": float(row[f"{m}_mean"]) for m in modes if row["status"] == "ok"},
                  **{f"{m}_std": float(row[f"{m}_std"]) for m in modes if row["status"] == "ok"}}
                 for row in rows]
    written.append(plot_ablation(plot_rows, os.path.join(out_dir, "ablation_accuracy.png"),
                                 modes=modes))
    if curves:
        written.append(plot_convergence(curves, os.path.join(out_dir, "ablation_convergence.png")))
    if band_data is not None:
        rr, merged, extra = band_data
        written.append(plot_routing_band(rr, merged,
                                         os.path.join(out_dir, "routing_band.png"),
                                         extra_points=extra))

    log.info("ablation finished in %.1fs", time.time() - t0)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"{len(rows)} rows ({ok} ok, {len(rows) - ok} skipped), "
          f"{len(jobs)} runs")
    for p in written:
        print(f"wrote {p}")
    return 0


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peftlab",
                     description="Mixture-of-adaptations fine-tuning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True, help="flat dotted-key config file")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="average mixture modules into one per site")
    p.add_argument("--in", dest="in_path", required=True, help="input checkpoint")
    p.add_argument("--out", dest="out_path", required=True, help="output checkpoint")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--mode", required=True, choices=INFERENCE_MODES)
    p.add_argument("--T", type=int, default=None, help="ensemble passes")
    p.add_argument("--seed", type=int, default=None, help="routing seed")
    p.add_argument("--report", default=None, help="report file path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of training runs")
    p.add_argument("--grid", required=True, help="grid config file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel cell workers")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except PeftLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
