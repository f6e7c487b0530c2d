"""stssl command line: synth, train, eval, augment-inspect, gradcheck.

Exit codes: 0 success, 1 domain error (bad data, config, checkpoint), 2 usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, augment, dataio, trainer
from . import diffcore as dc
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoder import ArchitectureError, st_encode
from .spatial_ssl import write_assignments_csv

log = logging.getLogger("stssl")

DOMAIN_ERRORS = (dataio.DatasetError, trainer.ConfigError, CheckpointError, ArchitectureError,
                 dc.ContractError, dc.NumericError, ValueError, OSError)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stssl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"stssl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--rows", type=int, default=8)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--regimes", type=int, default=2)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--interval", type=int, default=30, help="minutes per step")

    t = sub.add_parser("train", help="train and write checkpoint, history and metrics")
    t.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("eval", help="print MAE/MAPE of a checkpoint as JSON")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", choices=("val", "test"), default="test")

    a = sub.add_parser("augment-inspect", help="dump relevance, heterogeneity and rate histograms")
    a.add_argument("--checkpoint", required=True, type=Path)
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--split", choices=("train", "val", "test"), default="test")
    a.add_argument("--index", type=int, default=0, help="sample within the split")
    a.add_argument("--bins", type=int, default=20)

    g = sub.add_parser("gradcheck", help="finite-difference check on a mini instance")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    return p


def _load_config(path: Path | None) -> trainer.RunConfig:
    if path is None:
        return trainer.RunConfig()
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise trainer.ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise trainer.ConfigError(f"{path}: config must be a JSON object")
    return trainer.RunConfig.from_dict(raw)


def _split(checkpoint, dataset, name: str):
    data = trainer.prepare_data(checkpoint.config, dataset)
    samples = getattr(data, name)
    if not samples:
        raise dataio.DatasetError(f"the {name} split is empty")
    return data, samples


def _check_grid(checkpoint, dataset):
    if (checkpoint.rows, checkpoint.cols) != (dataset.rows, dataset.cols):
        raise CheckpointError(f"checkpoint grid {checkpoint.rows}x{checkpoint.cols} does not "
                              f"match dataset grid {dataset.rows}x{dataset.cols}")


def cmd_synth(args) -> int:
    spec = dataio.SynthSpec(rows=args.rows, cols=args.cols, num_steps=args.steps,
                            interval_minutes=args.interval, regimes=args.regimes,
                            noise=args.noise)
    ds = dataio.synth_generate(spec, seed=args.seed)
    dataio.write_dataset(ds, args.out)
    log.info("wrote %d steps x %d regions to %s", ds.num_steps, ds.num_regions, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    cfg.validate()
    ds = dataio.load_dataset(args.data)
    start = time.perf_counter()
    res = trainer.train(cfg, ds)
    elapsed = time.perf_counter() - start
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out / "checkpoint.bin")
    trainer.write_history_csv(out / "history.csv", res.history)

    data = res.data
    metrics = {"best_epoch": res.checkpoint.best_epoch, "epochs_run": len(res.history),
               "stopped_early": res.stopped_early, "train_seconds": elapsed}
    if data.test:
        metrics["test"] = trainer.evaluate(res.checkpoint, data.test, data.a_norm)
        metrics["historical_average"] = trainer.historical_average_metrics(ds, data, data.test)
        snaps = trainer.region_assignments(res.checkpoint, data.test, data.a_norm)
        write_assignments_csv(out / "assignments.csv", snaps[-1])
        if ds.labels is not None:
            metrics["cluster_purity"] = trainer.snapshot_purity(snaps, ds.labels)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    log.info("trained %d epochs in %.1fs, outputs in %s", len(res.history), elapsed, out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = dataio.load_dataset(args.data)
    _check_grid(ckpt, ds)
    data, samples = _split(ckpt, ds, args.split)
    result = {"split": args.split, "samples": len(samples),
              **trainer.evaluate(ckpt, samples, data.a_norm)}
    print(json.dumps(result, indent=2))
    return 0


def _write_matrix(path: Path, matrix: np.ndarray, header: list[str]) -> None:
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) for v in row) for row in matrix]
    path.write_text("\n".join(lines) + "\n")


def _write_histogram(path: Path, values: np.ndarray, bins: int) -> None:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, augment.MAX_PROB))
    lines = ["bin_low,bin_high,count"]
    lines += [f"{edges[i]!r},{edges[i + 1]!r},{int(c)}" for i, c in enumerate(counts)]
    path.write_text("\n".join(lines) + "\n")


def cmd_augment_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = dataio.load_dataset(args.data)
    _check_grid(ckpt, ds)
    data, samples = _split(ckpt, ds, args.split)
    if not 0 <= args.index < len(samples):
        raise ValueError(f"--index must be in [0, {len(samples)})")
    cfg, params = ckpt.config, ckpt.tensors()
    x = ckpt.scaler.transform(samples[args.index].inputs)
    with dc.no_grad():
        first, _ = st_encode(x, data.a_norm, params, cfg.encoder_config())
    rel = augment.region_relevance(first.data, params["w0"].data)
    q = augment.heterogeneity(augment.region_summary(first.data, rel))
    r = cfg.perturbation_ratio
    mask_p = augment.mask_probabilities(rel, x.shape[0], r)
    _, p_remove, _, p_add = augment.rewire_probabilities(data.adj, q, r)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    n = ds.num_regions
    _write_matrix(out / "relevance.csv", rel.T, [f"t{i}" for i in range(rel.shape[0])])
    _write_matrix(out / "heterogeneity.csv", q, [f"r{i}" for i in range(n)])
    _write_histogram(out / "mask_prob_hist.csv", mask_p.ravel(), args.bins)
    _write_histogram(out / "edge_remove_prob_hist.csv", p_remove, args.bins)
    _write_histogram(out / "edge_add_prob_hist.csv", p_add, args.bins)
    summary = {"split": args.split, "index": args.index, "ratio": r,
               "expected_mask_fraction": float(mask_p.mean()),
               "edges": int(p_remove.size),
               "expected_removed": float(p_remove.sum()),
               "expected_added": float(p_add.sum())}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("wrote augmentation diagnostics to %s", out)
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    err = trainer.mini_gradient_check(args.seed)
    print(f"max relative error {err:.3e} ({time.perf_counter() - start:.1f}s)")
    if err >= args.tol:
        log.error("gradient check failed: %.3e >= %.1e", err, args.tol)
        return 1
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "augment-inspect": cmd_augment_inspect, "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except DOMAIN_ERRORS as exc:
        print(f"stssl {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
