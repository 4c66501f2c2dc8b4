"""Operator command line: data generation, training, evaluation, diagnostics.

Subcommands: gen-data, train, eval, diagnose, oracle-verify,
export-curves. Exit codes: 0 success, 2 configuration error, 3 input
format error, 4 verification failure, 5 degenerate-training abort.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import estimators as est
from . import model as md
from .errors import (ConfigurationError, DegenerateTrainingError, InputFormatError)
from .fastpath import BatchedEngine
from .glimpse import (generate_translated_scaled_mnist, read_idx_images,
                      read_idx_labels, write_dataset,
                      write_fallback_digit_corpus)
from .oracle import run_identity_suite
from .rng import substream
from .training import (METRIC_FIELDS, Trainer, evaluate, load_config)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_VERIFY = 4
EXIT_DEGENERATE = 5


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saccade")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render translated/scaled digit canvases")
    g.add_argument("--source-dir", required=True,
                   help="directory holding the IDX digit files")
    g.add_argument("--out", required=True, help="output dataset container path")
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--canvas", type=int, default=60)
    g.add_argument("--scale-range", type=float, nargs=2, default=(0.8, 2.0))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bootstrap-fallback", action="store_true",
                   help="write the bundled 8x8-digit IDX corpus first if missing")

    t = sub.add_parser("train", help="run the configured training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("overrides", nargs="*", help="dotted key=value config overrides")

    e = sub.add_parser("eval", help="error rate of a checkpoint on a dataset")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", default=None, help="defaults to config data.test_set")
    e.add_argument("--out", default=None, help="optional JSON result path")
    e.add_argument("overrides", nargs="*")

    d = sub.add_parser("diagnose", help="per-estimator variance and ESS probes")
    d.add_argument("--config", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--resamples", type=int, default=100)
    d.add_argument("--batch", type=int, default=8)
    d.add_argument("--out", default=None, help="optional JSON report path")
    d.add_argument("--tags", nargs="*", default=list(est.ESTIMATOR_TAGS))
    d.add_argument("overrides", nargs="*")

    v = sub.add_parser("oracle-verify", help="run the enumeration identity suite")
    v.add_argument("--worlds", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None, help="optional JSON report path")

    x = sub.add_parser("export-curves", help="merge metrics JSONL files into CSV")
    x.add_argument("metrics", nargs="+", help="metrics-<run-id>.jsonl files")
    x.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    if args.bootstrap_fallback and not os.path.exists(
            os.path.join(args.source_dir, "train-images-idx3-ubyte")):
        write_fallback_digit_corpus(args.source_dir)
    prefix = "train" if args.split == "train" else "t10k"
    images = read_idx_images(os.path.join(args.source_dir, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx_labels(os.path.join(args.source_dir, f"{prefix}-labels-idx1-ubyte"))
    if args.count < 0:
        raise ConfigurationError("count must be nonnegative")
    rng = substream(args.seed, "dataset")
    gen = generate_translated_scaled_mnist(images, labels, args.canvas,
                                           args.scale_range, rng)
    examples = list(itertools.islice(gen, args.count))
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    write_dataset(args.out, examples, args.canvas, num_classes)
    hist = np.bincount([ex.label for ex in examples], minlength=num_classes)
    print(f"wrote {len(examples)} canvases ({args.canvas}x{args.canvas}, "
          f"{num_classes} classes) to {args.out}")
    print("class histogram:", " ".join(str(int(h)) for h in hist))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    trainer = Trainer(cfg, args.out_dir)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    trainer.run()
    print(f"finished {trainer.update} updates; metrics at {trainer.metrics_path()}")
    return EXIT_OK


def _load_networks(cfg, checkpoint_path):
    """Prediction + inference networks with checkpoint parameters applied."""
    if cfg.mode != "image":
        raise ConfigurationError("this command requires an image-mode config")
    try:
        data = np.load(checkpoint_path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise InputFormatError(f"cannot read checkpoint {checkpoint_path}: {exc}") from exc
    mcfg = md.ModelConfig(
        glimpses=cfg.model.glimpses, num_classes=cfg.data.num_classes,
        num_scales=len(cfg.data.scales), retina=cfg.data.retina,
        lowres_side=cfg.data.lowres_side, w1=cfg.model.w1, w2=cfg.model.w2,
        wq=cfg.model.wq, embed_dim=cfg.model.embed_dim,
        loc_log_std=cfg.model.loc_log_std)
    pnet = md.PredictionNetwork(mcfg, substream(cfg.train.seed, "init", 0))
    qnet = md.InferenceNetwork(mcfg, substream(cfg.train.seed, "init", 1))
    if data["theta"].shape != pnet.pv.values.shape:
        raise ConfigurationError(
            f"checkpoint {checkpoint_path} holds {data['theta'].shape[0]} prediction "
            f"parameters but the config builds {pnet.pv.size}")
    pnet.pv.values[:] = data["theta"]
    if "eta" in data:
        if data["eta"].shape != qnet.pv.values.shape:
            raise ConfigurationError(f"checkpoint {checkpoint_path} inference "
                                     f"parameter shape mismatch")
        qnet.pv.values[:] = data["eta"]
    return pnet, qnet, mcfg


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.overrides)
    pnet, _, _ = _load_networks(cfg, args.checkpoint)
    from .glimpse import read_dataset
    path = args.dataset or cfg.data.test_set
    if not path:
        raise ConfigurationError("no dataset given and config data.test_set is empty")
    images, labels, _ = read_dataset(path)
    err = evaluate(images, labels, pnet, cfg.data.scales, cfg.train.eval_rollouts,
                   substream(cfg.train.seed, "eval"))
    print(f"error rate: {err:.4f} over {len(images)} examples "
          f"({cfg.train.eval_rollouts} rollouts each)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"error_rate": err, "examples": len(images),
                       "rollouts": cfg.train.eval_rollouts,
                       "checkpoint": args.checkpoint}, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def estimator_probe(engine, pnet, qnet, images, labels, samples, tag, seed):
    """Per-resample gradient vector + weight-set factory for one estimator."""
    batch = len(images)
    m = samples
    img_idx = np.repeat(np.arange(batch), m)
    lab_r = np.repeat(labels, m)
    use_q = est.needs_inference_net(tag)
    fam = est.family(tag)
    cv = est.uses_control_variates(tag)

    def draw(r):
        rng = substream(seed, "probe", r)
        rolls = engine.rollout(images, img_idx, lab_r, rng, use_q=use_q)
        logw = rolls.log_weight().reshape(batch, m)
        mx = logw.max(axis=1, keepdims=True)
        w_hat = np.exp(logw - mx)
        w_hat /= w_hat.sum(axis=1, keepdims=True)
        ess_rows = 1.0 / (w_hat**2).sum(axis=1)

        if fam == "var":
            b = logw.mean() if cv else 0.0
            c_lik = np.full(batch * m, 1.0 / (batch * m))
            c_prior = (rolls.log_likelihood - b) / (batch * m)
            engine.backward_theta(rolls, c_lik, c_prior)
            pv = pnet.pv
        elif fam == "wsram":
            if cv:
                lr_ratio = (rolls.log_prior - rolls.log_proposal).reshape(batch, m)
                v = np.exp(lr_ratio - lr_ratio.max(axis=1, keepdims=True))
                v /= v.sum(axis=1, keepdims=True)
            else:
                v = 0.0
            engine.backward_theta(rolls, w_hat.ravel() / batch,
                                  (w_hat - v).ravel() / batch)
            pv = pnet.pv
        else:
            base = 1.0 / m if cv else 0.0
            engine.backward_eta(rolls, (w_hat.ravel() - base) / batch)
            pv = qnet.pv
        g = pv.grads.copy()
        pv.zero_grad()
        return g, float(ess_rows.mean())

    return draw


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config, args.overrides)
    pnet, qnet, mcfg = _load_networks(cfg, args.checkpoint)
    engine = BatchedEngine(pnet, cfg.data.scales, qnet)
    from .glimpse import read_dataset
    path = cfg.data.train_set or cfg.data.test_set
    if not path:
        raise ConfigurationError("diagnose needs a dataset path in the config")
    images, labels, _ = read_dataset(path)
    rng = substream(cfg.train.seed, "probe-batch")
    idx = rng.integers(len(images), size=args.batch)
    images, labels = images[idx], labels[idx]
    if args.resamples < 2:
        raise ConfigurationError("variance probe needs at least 2 resamples")

    rows = []
    for tag in args.tags:
        if tag not in est.ESTIMATOR_TAGS:
            raise ConfigurationError(f"unknown estimator tag {tag!r}")
        draw = estimator_probe(engine, pnet, qnet, images, labels,
                               cfg.train.samples, tag, cfg.train.seed)
        ess_sum = 0.0

        def grad_only(r):
            nonlocal ess_sum
            g, ess_mean = draw(r)
            ess_sum += ess_mean
            return g

        var = est.gradient_variance_probe(grad_only, args.resamples)
        rows.append({"tag": tag, "grad_variance": var,
                     "mean_ess": ess_sum / args.resamples,
                     "samples": cfg.train.samples,
                     "resamples": args.resamples})

    width = max(len(r["tag"]) for r in rows)
    print(f"{'estimator':<{width}}  {'grad-variance':>14}  {'mean ESS':>9}")
    for r in rows:
        print(f"{r['tag']:<{width}}  {r['grad_variance']:>14.6e}  {r['mean_ess']:>9.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"checkpoint": args.checkpoint, "batch": args.batch,
                       "rows": rows}, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_oracle_verify(args) -> int:
    records = run_identity_suite(num_worlds=args.worlds, seed=args.seed)
    width = max(len(r["identity"]) for r in records)
    print(f"identity suite: {args.worlds} worlds, seed {args.seed}")
    for r in records:
        status = "pass" if r["passed"] else "FAIL"
        print(f"  {r['identity']:<{width}}  worst {r['worst_error']:.3e}  "
              f"tol {r['tolerance']:.0e}  {status}")
    failed = [r for r in records if not r["passed"]]
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"worlds": args.worlds, "seed": args.seed,
                       "passed": not failed, "identities": records}, fh, indent=2)
            fh.write("\n")
    if failed:
        print(f"{len(failed)} identities FAILED (world seed {args.seed})")
        return EXIT_VERIFY
    print(f"all {len(records)} identities passed")
    return EXIT_OK


CSV_COLUMNS = ("run-id", "update", "train-error", "F-hat", "L_M-hat", "ESS",
               "grad-variance")
_CSV_SOURCE = {"train-error": "train_error", "F-hat": "f_hat",
               "L_M-hat": "l_m_hat", "ESS": "ess", "grad-variance": "grad_variance"}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def cmd_export_curves(args) -> int:
    rows = []
    for path in args.metrics:
        name = os.path.basename(path)
        if name.startswith("metrics-") and name.endswith(".jsonl"):
            run_id = name[len("metrics-"):-len(".jsonl")]
        else:
            run_id = os.path.splitext(name)[0]
        try:
            with open(path) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise InputFormatError(f"cannot read metrics file {path}: {exc}") from exc
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputFormatError(f"{path}:{i + 1} is not valid JSON") from exc
            if set(rec) != set(METRIC_FIELDS):
                raise InputFormatError(
                    f"{path}:{i + 1} has schema {sorted(rec)}, expected "
                    f"{sorted(METRIC_FIELDS)}")
            rows.append((run_id, rec))

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for run_id, rec in rows:
            writer.writerow([run_id, _fmt(rec["update"])]
                            + [_fmt(rec[_CSV_SOURCE[c]]) for c in CSV_COLUMNS[2:]])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "diagnose": cmd_diagnose,
        "oracle-verify": cmd_oracle_verify,
        "export-curves": cmd_export_curves,
    }
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputFormatError, OSError) as exc:
        print(f"input format error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateTrainingError as exc:
        print(f"degenerate-training abort: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
