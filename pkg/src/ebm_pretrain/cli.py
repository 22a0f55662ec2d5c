"""Command-line entry point: ``ebm-pretrain <command> [--config FILE] [--set key=value ...]``.

Commands
    gen-data    render the synthetic set to PNG class folders plus stats.json
    pretrain    train the energy model; writes metrics.csv, checkpoint-*.bin, samples/
    probe       linear probe on frozen class-token features
    finetune    train all parameters with a classifier head
    restore     corrupt held-out images and save corrupted|original|restored PNGs
    histogram   energy scores of real, corrupted and restored images
    sort-eval   nearest-PE position accuracy of a sorting-pretrained model (proxy metric)

Exit codes: 0 ok, 2 config or contract error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ebm_pretrain import checkpoint as ck
from ebm_pretrain import config as rc
from ebm_pretrain import corruptions as cx
from ebm_pretrain import data as dd
from ebm_pretrain import evaluation as ev
from ebm_pretrain import plotting
from ebm_pretrain import tensor_core as tc
from ebm_pretrain.errors import ConfigError, ContractViolation, NumericError
from ebm_pretrain.models import EnergyModel, build_model
from ebm_pretrain.sampler import StepSize
from ebm_pretrain.training import Pretrainer

METRIC_FIELDS = ("step", "epoch", "loss", "alpha", "lr", "grad_norm")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _threads() -> None:
    n = os.environ.get("EBMPRE_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ConfigError(f"EBMPRE_THREADS must be an integer, got {n!r}") from None


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# --- data -------------------------------------------------------------------


@dataclass
class Prepared:
    x_train: torch.Tensor
    y_train: np.ndarray
    x_test: torch.Tensor
    y_test: np.ndarray
    stats: dd.NormStats
    class_names: list[str]


def _stats_for(cfg: rc.RunConfig, data: dd.LabeledImages, out_dir: Path) -> dd.NormStats:
    """Reuse stored stats (run dir, then dataset folder); compute and store otherwise."""
    candidates = [out_dir / "stats.json"]
    if isinstance(cfg.dataset, dd.FolderDataset):
        candidates.append(Path(cfg.dataset.root) / "stats.json")
    for p in candidates:
        if p.exists():
            stats = dd.NormStats.load(p)
            break
    else:
        stats = dd.NormStats.compute(data.images)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not (out_dir / "stats.json").exists():
        stats.save(out_dir / "stats.json")
    return stats


def prepare(cfg: rc.RunConfig, out_dir: Path) -> Prepared:
    data = dd.load_dataset(cfg.dataset)
    if len(np.unique(data.labels)) < 2:
        raise ContractViolation("the dataset needs at least two classes")
    stats = _stats_for(cfg, data, out_dir)
    train, test = dd.split(data, cfg.heldout_fraction, cx.SeededRng(cfg.seed).stream("split"))
    dtype = tc.dtype_for(cfg.trainer.precision)
    return Prepared(
        stats.normalize(train.pixels(dtype)), train.labels,
        stats.normalize(test.pixels(dtype)), test.labels,
        stats, data.class_names,
    )


# --- config / checkpoint plumbing -----------------------------------------


def _snapshot(cfg: rc.RunConfig) -> dict:
    # where a run is written is not part of what it computes
    d = cfg.to_dict()
    d.pop("output_dir")
    return d


def _init_seed(cfg: rc.RunConfig) -> int:
    return cx.SeededRng(cfg.seed).torch_seed("init")


def latest_checkpoint(out_dir: Path) -> Path:
    found = sorted(out_dir.glob("checkpoint-*.bin"))
    if not found:
        raise FileNotFoundError(f"no checkpoint-*.bin in {out_dir}; run `pretrain` first")
    return found[-1]


def _load_for_eval(args) -> tuple[rc.RunConfig, Path, EnergyModel, StepSize]:
    base = rc.load_config(args.config, args.set)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(Path(base.output_dir))
    out_dir = Path(base.output_dir) if not args.checkpoint else ckpt_path.parent
    ckpt = ck.load_checkpoint(ckpt_path)
    if args.config:
        cfg = base
    else:
        raw = dict(ckpt.config, output_dir=str(out_dir))
        cfg = rc.from_dict(rc.apply_overrides(raw, args.set))
    dtype = tc.dtype_for(cfg.trainer.precision)
    model = build_model(cfg.model, 0).to(dtype)
    ck.load_model_state(model, ckpt.params())
    alpha = StepSize(cfg.sampler.alpha_init)
    with torch.no_grad():
        alpha.raw.copy_(ck.alpha_raw(ckpt))
    model.eval()
    print(f"loaded {ckpt_path} (epoch {ckpt.epoch}, alpha {alpha.value():.6g})")
    return cfg, out_dir, model, alpha


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = rc.load_config(args.config, args.set)
    if not isinstance(cfg.dataset, dd.SyntheticDataset):
        raise ConfigError("gen-data needs a synthetic dataset descriptor (dataset.kind = 'synthetic')")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "data"
    data = dd.gen_synthetic(cfg.dataset)
    dd.save_folder(data, out)
    stats = dd.NormStats.compute(data.images)
    stats.save(out / "stats.json")
    counts = {name: int(np.sum(data.labels == i)) for i, name in enumerate(data.class_names)}
    print(f"wrote {len(data)} images to {out} {counts}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = rc.load_config(args.config, args.set)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(exist_ok=True)
    prep = prepare(cfg, out)
    (out / "config.json").write_text(cfg.to_json())
    snapshot = _snapshot(cfg)

    model = build_model(cfg.model, _init_seed(cfg))
    trainer = Pretrainer(model, cfg.sampler, cfg.trainer, cfg.corruption, cx.SeededRng(cfg.seed),
                         prep.stats, sort=cfg.sort)
    metrics_path = out / "metrics.csv"
    mode = "w"
    if args.resume:
        ckpt = ck.load_checkpoint(latest_checkpoint(out))
        if ckpt.config != snapshot:
            raise ConfigError("--resume: the checkpoint was written with a different config")
        ck.restore(trainer, ckpt)
        mode = "a"
        print(f"resuming at epoch {trainer.epoch}")
    remaining = cfg.trainer.epochs - trainer.epoch
    steps_per_epoch = math.ceil(len(prep.x_train) / cfg.trainer.batch_size)
    trainer.total_steps = max(trainer.total_steps, cfg.trainer.epochs * steps_per_epoch)

    f = open(metrics_path, mode, newline="")
    writer = csv.writer(f)
    if mode == "w":
        writer.writerow(METRIC_FIELDS)
    log: list[tuple[int, float, float]] = []

    def on_step(m):
        writer.writerow([_fmt(getattr(m, k)) for k in METRIC_FIELDS])
        log.append((m.step, m.loss, m.alpha))

    def on_epoch(epoch, t):
        f.flush()
        done = epoch + 1
        ep_losses = [s[1] for s in log[-steps_per_epoch:] if math.isfinite(s[1])]
        mean = float(np.mean(ep_losses)) if ep_losses else float("nan")
        print(f"epoch {done}/{cfg.trainer.epochs} loss {mean:.5f} alpha {t.alpha.value():.5f}")
        if done % cfg.trainer.checkpoint_every == 0 or done == cfg.trainer.epochs:
            ck.save_checkpoint(ck.capture(t, snapshot, cfg.seed), out / f"checkpoint-{done:04d}.bin")

    try:
        history = trainer.fit(prep.x_train, epochs=max(0, remaining), on_step=on_step, on_epoch=on_epoch)
    finally:
        f.close()
    if remaining <= 0:
        print("nothing to do: all epochs already trained")
        return EXIT_OK
    if log:
        plotting.loss_curve_figure(*zip(*log), out / "samples" / "loss_curve.png")
    if history.errors:
        print(f"{sum(history.rollbacks)} steps rolled back on non-finite values", file=sys.stderr)
    if not any(math.isfinite(s[1]) for s in log):
        raise NumericError("every training step produced a non-finite value")
    return EXIT_OK


def _probe_rows(name: str, r: ev.ProbeResult, n_cls: int):
    return [name, _fmt(r.accuracy), r.n_eval] + [_fmt(r.per_class.get(c, float("nan"))) for c in range(n_cls)]


def cmd_probe(args) -> int:
    cfg, out, model, _ = _load_for_eval(args)
    prep = prepare(cfg, out)
    n_cls = len(prep.class_names)
    rows = []
    res = ev.linear_probe(model, prep.x_train, prep.y_train, prep.x_test, prep.y_test, cfg.probe)
    rows.append(_probe_rows("pretrained", res, n_cls))
    print(f"linear probe accuracy {res.accuracy:.4f} on {res.n_eval} held-out images")
    if args.baseline:
        rand = build_model(cfg.model, _init_seed(cfg)).to(model.patch_embed.weight.dtype)
        base = ev.linear_probe(rand, prep.x_train, prep.y_train, prep.x_test, prep.y_test, cfg.probe)
        rows.append(_probe_rows("random_init", base, n_cls))
        print(f"random-init probe accuracy {base.accuracy:.4f}")
    _write_csv(out / "probe.csv", ["model", "accuracy", "n_eval"] + [f"class_{c}" for c in range(n_cls)], rows)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, out, model, _ = _load_for_eval(args)
    prep = prepare(cfg, out)
    n_cls = len(prep.class_names)
    rows = []
    res, _ = ev.finetune(model, prep.x_train, prep.y_train, prep.x_test, prep.y_test, cfg.finetune)
    rows.append(_probe_rows("pretrained", res, n_cls))
    print(f"finetune accuracy {res.accuracy:.4f} after {cfg.finetune.epochs} epochs")
    if args.scratch:
        rand = build_model(cfg.model, _init_seed(cfg)).to(model.patch_embed.weight.dtype)
        base, _ = ev.finetune(rand, prep.x_train, prep.y_train, prep.x_test, prep.y_test, cfg.finetune)
        rows.append(_probe_rows("scratch", base, n_cls))
        print(f"scratch finetune accuracy {base.accuracy:.4f}")
    _write_csv(out / "finetune.csv", ["model", "accuracy", "n_eval"] + [f"class_{c}" for c in range(n_cls)], rows)
    return EXIT_OK


def _pixel_corruption(cfg: rc.RunConfig) -> cx.CorruptionSpec:
    if isinstance(cfg.corruption, cx.ShufflePE):
        raise ConfigError("corruption shuffle_pe has no pixel restoration; use sort-eval, "
                          "or pass --set corruption.kind=<pixel corruption>")
    return cfg.corruption


def cmd_restore(args) -> int:
    cfg, out, model, alpha = _load_for_eval(args)
    corruption = _pixel_corruption(cfg)
    prep = prepare(cfg, out)
    rng = cx.SeededRng(cfg.seed)
    q = ev.restoration_quality(model, alpha, prep.x_test, corruption, cfg.sampler,
                               rng.stream("eval-restore"), prep.stats)
    _write_csv(out / "restore.csv", ["metric", "value"], [[k, _fmt(v)] for k, v in q.items()])
    k = min(args.count, len(prep.x_test))
    states, kinds = ev.restore_chain(model, alpha, prep.x_test[:k], corruption, cfg.sampler,
                                     rng.stream("eval-restore-samples"), prep.stats)
    den = prep.stats.denormalize
    samples = out / "samples"
    plotting.save_triplets(den(states[0]), den(prep.x_test[:k]), den(states[-1]), samples)
    plotting.restore_figure(den(states[0]), den(prep.x_test[:k]), den(states[-1]),
                            samples / "restore.png", kinds)
    print(f"mse corrupted {q['mse_corrupted']:.5f} restored {q['mse_restored']:.5f} "
          f"psnr gain {q['psnr_gain']:+.3f} dB; {k} triplets in {samples}")
    return EXIT_OK


def cmd_histogram(args) -> int:
    cfg, out, model, alpha = _load_for_eval(args)
    corruption = _pixel_corruption(cfg)
    prep = prepare(cfg, out)
    rep = ev.energy_histogram(model, alpha, prep.x_test, corruption, cfg.sampler,
                              cx.SeededRng(cfg.seed).stream("eval-histogram"), prep.stats)
    rows = [[i, g, _fmt(float(v))] for g, vals in rep.groups.items() for i, v in enumerate(vals)]
    _write_csv(out / "histogram.csv", ["image", "group", "energy"], rows)
    gap, se = rep.paired_gap("step0", "real")
    summary = [[g, _fmt(rep.means[g]), _fmt(rep.stds[g]), len(rep.groups[g])] for g in rep.groups]
    _write_csv(out / "histogram_summary.csv", ["group", "mean", "std", "n"], summary)
    (out / "samples").mkdir(exist_ok=True)
    plotting.energy_histogram_figure(rep, out / "samples" / "histogram.png")
    print(f"paired gap corrupted - real: {gap:.5g} (SE {se:.3g})")
    return EXIT_OK


def cmd_sort_eval(args) -> int:
    cfg, out, model, alpha = _load_for_eval(args)
    prep = prepare(cfg, out)
    acc = ev.sort_accuracy(model, alpha, prep.x_test, cfg.sampler,
                           cx.SeededRng(cfg.seed).stream("eval-sort"), edge_mask=cfg.sort.edge_spec())
    chance = 1.0 / cfg.model.num_patches
    _write_csv(out / "sort_eval.csv", ["metric", "value"],
               [["position_accuracy_proxy", _fmt(acc)], ["chance", _fmt(chance)],
                ["ratio_to_chance", _fmt(acc / chance)]])
    print(f"nearest-PE position accuracy (proxy) {acc:.4f}, chance {chance:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "restore": cmd_restore,
    "histogram": cmd_histogram,
    "sort-eval": cmd_sort_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebm-pretrain", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. sampler.N=1; repeatable")
        if name == "gen-data":
            sp.add_argument("--out", help="output folder (default: <output_dir>/data)")
        elif name == "pretrain":
            sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
        else:
            sp.add_argument("--checkpoint", help="checkpoint file (default: latest in output_dir)")
        if name == "probe":
            sp.add_argument("--baseline", action="store_true", help="also probe a random-init model")
        if name == "finetune":
            sp.add_argument("--scratch", action="store_true", help="also finetune from random init")
        if name == "restore":
            sp.add_argument("--count", type=int, default=8, help="number of PNG triplets")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads()
        precision = "float32"
        if args.config or args.set:
            precision = rc.load_config(args.config, args.set).trainer.precision
        with tc.precision(precision):
            return COMMANDS[args.command](args)
    except (ConfigError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
