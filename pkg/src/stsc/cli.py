"""``stsc`` command line: train-local, train-fed, evaluate, attack, partition-stats, plot-data."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import attacks
from .channel import equalize, make_rng
from .codec import CodecConfig, decode
from .config import ConfigError, ExperimentConfig, load_config
from .data import (DatasetError, ImageDataset, PartitionError, class_entropy, load_dataset, make_partition,
                   write_partition_manifest)
from .federation import FederationError, run_federated_training, run_local_baselines
from .plots import PlotDataError, write_plot_data
from .storage import CheckpointError, MetricsRow, load_checkpoint, save_checkpoint, write_metrics
from .trainer import DivergenceError, evaluate

log = logging.getLogger("stsc")

OUT_ENV = "STSC_OUT_DIR"
SUBCOMMANDS = ("train-local", "train-fed", "evaluate", "attack", "partition-stats", "plot-data")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DATA, EXIT_PLOT = 0, 2, 3, 4, 5


class Run:
    """Resolved config plus the output directory every artifact of one invocation goes to."""

    def __init__(self, cfg: ExperimentConfig, out: Path) -> None:
        self.cfg = cfg
        self.out = out
        self.hash = cfg.hash()
        out.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self) -> Path:
        return self.out / "metrics.tsv"

    def echo_config(self, name: str = "config.json") -> None:
        doc = {"config_hash": self.hash, "config": self.cfg.to_dict()}
        (self.out / name).write_text(json.dumps(doc, indent=2, sort_keys=True))

    def header(self, **extra) -> dict:
        return {"codec": self.cfg.codec_config().to_dict(), "seed": self.cfg.seed, "config_hash": self.hash,
                "config": self.cfg.to_dict(), **extra}

    def rows(self, rows: list[MetricsRow]) -> None:
        for r in rows:
            r.extras.setdefault("config_hash", self.hash)
        write_metrics(self.metrics_path, rows)

    def load_split(self, split: str) -> ImageDataset:
        ds = load_dataset(self.cfg.io.data_root, split, strict=self.cfg.io.strict_dataset)
        frac = self.cfg.io.subset_fraction
        if frac < 1:
            ds = ds.head_fraction(frac, self.cfg.sub_seed("subset", split))
            log.info("using a %.0f%% subset of the %s split (%d images)", 100 * frac, split, len(ds))
        return ds


def _codec_from_header(header: dict) -> CodecConfig:
    return CodecConfig(**header["codec"])


def _default_checkpoints(run: Run, given: list[str]) -> list[tuple[str, Path]]:
    if given:
        out = []
        for item in given:
            label, _, path = item.rpartition("=")
            out.append((label or Path(path).stem, Path(path)))
        return out
    if run.cfg.io.checkpoint:
        return [(run.cfg.io.series, Path(run.cfg.io.checkpoint))]
    found = [("global", run.out / "global.ckpt")] if (run.out / "global.ckpt").exists() else []
    found += [(p.stem, p) for p in sorted(run.out.glob("client*.ckpt"))]
    if not found:
        raise ConfigError(f"no checkpoint given and none found in {run.out}")
    return found


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_fed(run: Run, args) -> int:
    cfg = run.cfg
    fcfg = cfg.federation_config()
    codec_cfg = cfg.codec_config()
    train, test = run.load_split("train"), run.load_split("test")
    assignment = make_partition(train.labels, fcfg.partition)
    write_partition_manifest(run.out / "partition.jsonl", assignment, train.labels, {"config_hash": run.hash})
    run.echo_config()
    rounds_path = run.out / "rounds.jsonl"
    rounds_path.unlink(missing_ok=True)
    ckpt_every = cfg.federation.checkpoint_every
    spec = fcfg.train.channel

    def on_round(entry, params):
        rec = {**entry.to_record(), "config_hash": run.hash, "series": cfg.io.series}
        with rounds_path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")
        run.rows([MetricsRow.from_mse(
            cfg.io.experiment_id, spec.kind, spec.snr_db, entry.t, entry.global_loss, entry.ssim_eval,
            kind="round", series=cfg.io.series, client_ids=entry.client_ids, loss_k=entry.client_losses,
            psnr_eval=entry.psnr_eval)])
        if ckpt_every and entry.t % ckpt_every == 0:
            save_checkpoint(run.out / "checkpoints" / f"global_round{entry.t:04d}.ckpt", params,
                            run.header(round=entry.t, epoch=entry.t * fcfg.train.local_epochs, kind="global"))

    params, logs = run_federated_training(fcfg, codec_cfg, train, assignment, test, on_round=on_round)
    save_checkpoint(run.out / "global.ckpt", params,
                    run.header(round=fcfg.rounds, epoch=fcfg.rounds * fcfg.train.local_epochs, kind="global"))
    print(f"train-fed: {len(logs)} rounds, final global loss {logs[-1].global_loss:.6f}, "
          f"checkpoint {run.out / 'global.ckpt'}")
    return EXIT_OK


def cmd_train_local(run: Run, args) -> int:
    cfg = run.cfg
    fcfg = cfg.federation_config()
    codec_cfg = cfg.codec_config()
    train = run.load_split("train")
    assignment = make_partition(train.labels, fcfg.partition)
    run.echo_config()
    spec = fcfg.train.channel
    results = run_local_baselines(fcfg, codec_cfg, train, assignment)
    for k, (params, curve) in enumerate(results):
        label = f"client{k}"
        run.rows([MetricsRow.from_mse(cfg.io.experiment_id, spec.kind, spec.snr_db, e + 1, loss,
                                      kind="round", series=label) for e, loss in enumerate(curve)])
        save_checkpoint(run.out / f"{label}.ckpt", params,
                        run.header(round=fcfg.rounds, epoch=len(curve), kind="local", client=k))
        print(f"train-local: {label} final loss {curve[-1]:.6f}")
    return EXIT_OK


def cmd_evaluate(run: Run, args) -> int:
    cfg = run.cfg
    grid = [float(v) for v in args.snr_grid.split(",")] if args.snr_grid else [float(v) for v in cfg.eval.snr_grid]
    channels = args.channels.split(",") if args.channels else list(cfg.eval.channels)
    checkpoints = _default_checkpoints(run, args.checkpoint)
    test = run.load_split("test")
    total = 0
    for label, path in checkpoints:
        params, header = load_checkpoint(path)
        codec_cfg = _codec_from_header(header)
        for kind in channels:
            report = evaluate(params, test, codec_cfg, cfg.channel_spec(kind), grid, cfg.eval.repeats,
                              cfg.eval.batch_size, model_id=label)
            run.rows(report.to_metrics_rows(cfg.io.experiment_id, header.get("round", 0),
                                            checkpoint=str(path), model_config_hash=header.get("config_hash")))
            total += len(report.rows)
            for r in report.rows:
                print(f"{label:>10} {kind:>8} {r.snr_db:6.1f} dB  PSNR {r.psnr_db:7.3f}  SSIM {r.ssim:.4f}")
    print(f"evaluate: wrote {total} rows to {run.metrics_path}")
    return EXIT_OK


def run_privacy_suite(cfg: ExperimentConfig, params, codec_cfg: CodecConfig, train: ImageDataset,
                      test: ImageDataset, out: Path | None = None) -> dict:
    """DLG at every configured batch size plus the three-row feature-inversion table."""
    spec = cfg.channel_spec()
    tcfg = cfg.train_config(spec)
    results: dict = {"dlg": {}}
    rng = np.random.default_rng(cfg.sub_seed("attack-images"))

    for b in cfg.attack.batch_sizes:
        b = int(b)
        victim = train.batch(np.sort(rng.permutation(len(train))[:b]))
        acfg = cfg.attack_config("dlg", b)
        observed = attacks.capture_update(params, victim, tcfg, codec_cfg, mode=acfg.capture_mode)
        if observed.draw is None:
            gen = make_rng(spec.seed, "dlg-draw")
            observed.draw = attacks.draw_for(params, victim.data, codec_cfg, spec, gen)
        recon, rep = attacks.dlg_attack(observed, params, codec_cfg, spec, acfg, victim.data.shape, victim.data)
        results["dlg"][b] = rep
        if out is not None:
            attacks.save_image_grid(out / f"dlg_b{b}.png", [victim.data[:8], recon[:8]])

    n = min(int(cfg.attack.num_images), len(test))
    images = test.batch(np.sort(rng.permutation(len(test))[:n])).data
    y = attacks.intercept(params, images, codec_cfg, spec, make_rng(spec.seed, "eavesdrop"))
    legit = attacks.legitimate_reference(params, images, codec_cfg, spec, y)
    net, _, _ = attacks.train_inversion_net(params, train, int(cfg.attack.known_pairs), spec, codec_cfg,
                                            cfg.attack_config("invert_net"))
    net_recon = attacks.run_inversion_net(net, y)
    trained = attacks.score("trained_inversion", images, net_recon)
    ocfg = replace(cfg.attack_config("invert_opt"), iterations=int(cfg.attack.opt_iterations))
    opt_recon, opt_rep = attacks.invert_features_optimization(y, params, codec_cfg, ocfg, ground_truth=images)
    table = attacks.attack_report({"trained_inversion": trained, "optimization_inversion": opt_rep}, legit)
    results["table"] = table
    if out is not None:
        with torch.no_grad():
            legit_recon = decode(equalize(y, spec).symbols, params, codec_cfg)
        attacks.save_image_grid(out / "feature_inversion.png",
                                [images[:8], legit_recon[:8], net_recon[:8], opt_recon[:8]])
    return results


def cmd_attack(run: Run, args) -> int:
    cfg = run.cfg
    label, path = _default_checkpoints(run, args.checkpoint)[0]
    params, header = load_checkpoint(path)
    codec_cfg = _codec_from_header(header)
    train, test = run.load_split("train"), run.load_split("test")
    run.echo_config("attack_config.json")
    res = run_privacy_suite(cfg, params, codec_cfg, train, test, run.out)
    spec = cfg.channel_spec()
    legit = res["table"].rows[0][1]
    rows = []
    for b, rep in res["dlg"].items():
        rows.append(MetricsRow.from_mse(cfg.io.experiment_id, spec.kind, spec.snr_db, 0, rep.mean_mse,
                                        rep.mean_ssim, kind="attack", series=f"dlg-b{b}",
                                        mean_psnr_per_image=rep.mean_psnr, gap_to_legitimate_db=legit.psnr - rep.psnr))
        print(f"DLG batch {b:>3}: PSNR {rep.psnr:6.2f} dB  SSIM {rep.mean_ssim:.4f}")
    rows += res["table"].to_metrics_rows(cfg.io.experiment_id, spec, checkpoint=str(path))
    run.rows(rows)
    table = res["table"].format()
    (run.out / "attack_table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_partition_stats(run: Run, args) -> int:
    cfg = run.cfg
    if args.alpha is not None:
        cfg.federation.partition, cfg.federation.alpha = "dirichlet", float(args.alpha)
    if args.mode:
        cfg.federation.partition = args.mode
    cfg.validate()
    run.hash = cfg.hash()
    labels = run.load_split("train").labels
    spec = cfg.partition_spec()
    assignment = make_partition(labels, spec)
    assignment.check_cover(len(labels))
    name = f"partition_{spec.mode}" + (f"_alpha{spec.alpha:g}" if spec.mode == "dirichlet" else "") + ".jsonl"
    write_partition_manifest(run.out / name, assignment, labels, {"config_hash": run.hash})
    hists = assignment.class_histograms(labels)
    sizes = assignment.sizes
    summary = {
        "mode": spec.mode, "alpha": spec.alpha, "num_clients": spec.num_clients, "sizes": sizes,
        "size_ratio_max_min": max(sizes) / min(sizes),
        "class_entropy": [class_entropy(h) for h in hists],
        "top2_share": [float(np.sort(h)[::-1][:2].sum() / h.sum()) for h in hists],
        "manifest": str(run.out / name), "config_hash": run.hash,
    }
    (run.out / name.replace(".jsonl", "_summary.json")).write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_plot_data(run: Run, args) -> int:
    files = args.metrics or [str(run.metrics_path)]
    out = write_plot_data(files, args.figure, run.out / f"plot_{args.figure}.json")
    print(f"plot-data: wrote {out}")
    return EXIT_OK


COMMANDS = {
    "train-local": cmd_train_local,
    "train-fed": cmd_train_fed,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "partition-stats": cmd_partition_stats,
    "plot-data": cmd_plot_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set federation.rounds=10")
    common.add_argument("--seed", type=int, default=None, help="top-level seed (all sub-seeds derive from it)")
    common.add_argument("--out", default=None, help=f"output directory (else ${OUT_ENV}, else io.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stsc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("evaluate", "attack"):
            p.add_argument("--checkpoint", action="append", default=[], metavar="[LABEL=]PATH")
        if name == "evaluate":
            p.add_argument("--snr-grid", default=None, help="comma-separated SNR values in dB")
            p.add_argument("--channels", default=None, help="comma-separated channel kinds")
        if name == "partition-stats":
            p.add_argument("--alpha", type=float, default=None)
            p.add_argument("--mode", choices=("iid", "dirichlet"), default=None)
        if name == "plot-data":
            p.add_argument("--figure", required=True)
            p.add_argument("--metrics", action="append", default=[], help="metrics file(s) to read")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"stsc: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or os.environ.get(OUT_ENV) or cfg.io.out_dir)
    try:
        return COMMANDS[args.command](Run(cfg, out), args)
    except ConfigError as exc:
        print(f"stsc: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FederationError) as exc:
        print(f"stsc: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, PartitionError, CheckpointError) as exc:
        print(f"stsc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PlotDataError as exc:
        print(f"stsc: {exc}", file=sys.stderr)
        return EXIT_PLOT


if __name__ == "__main__":
    sys.exit(main())
