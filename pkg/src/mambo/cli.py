"""``mambo`` command line: generate, train, eval, visualize, benchmark.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import benchmark, dataio, scoring, viz
from .config import ExperimentConfig, load_config
from .core import ConfigError, MamboError
from .encoders import FrozenTextEncoder
from .training import batch_loss_and_grad, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("mambo")


class DataError(MamboError):
    pass


def setup_from_config(cfg: ExperimentConfig, seed: int) -> benchmark.BenchmarkSetup:
    base = benchmark.BenchmarkSetup()
    model = cfg.section("model")
    model.pop("seed", None)
    feature_dim = model.pop("feature_dim", base.feature_dim)
    model.pop("num_classes", None)
    model.pop("grid_h", None)
    model.pop("grid_w", None)
    train_kw = cfg.section("train")
    try:
        tcfg = replace(base.train, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return replace(base, synthetic=cfg.synthetic_spec(seed), feature_dim=feature_dim,
                   train=tcfg, model=model, **cfg.encoder_settings())


def text_encoder(dim: int, seed: int, nonlinearity: str, text_cone: float) -> FrozenTextEncoder:
    """Rebuild the frozen text tower from its seed and cone settings."""
    return FrozenTextEncoder.from_seed(dim, seed, nonlinearity,
                                       offset=text_cone * benchmark.cone_direction(dim, seed))


def _read_dump(path, what: str) -> dataio.FeatureDump:
    if path is None:
        raise DataError(f"{what}: no dataset path given")
    if not Path(path).is_file():
        raise DataError(f"{what}: file not found: {path}")
    try:
        return dataio.read_dump(path)
    except dataio.DumpError as exc:
        raise DataError(f"{what}: {path}: {exc}") from exc


def _read_checkpoint(path) -> dataio.Checkpoint:
    if not Path(path).is_file():
        raise DataError(f"checkpoint: file not found: {path}")
    try:
        return dataio.read_checkpoint(path)
    except dataio.DumpError as exc:
        raise DataError(f"checkpoint: {path}: {exc}") from exc


def _write_text(path, text: str) -> None:
    viz._atomic_write(path, text.encode("utf-8"))


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.get("seed", 0)
    exp = benchmark.build_experiment(setup_from_config(cfg, seed), seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = exp.cfg.grid_h, exp.cfg.grid_w
    for name, samples in (("train", exp.train), ("id_test", exp.id_test), ("ood_test", exp.ood_test)):
        dataio.write_dump(out / f"{name}.mmbo", dataio.FeatureDump(exp.zero_shot, samples, h, w))
        print(f"{name}: {len(samples)} samples -> {out / f'{name}.mmbo'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    path = args.data
    if path is None and cfg.get("train_data") is not None:
        # relative dataset paths are taken from the config file's directory
        path = Path(args.config).parent / cfg.get("train_data")
    dump = _read_dump(path, "train_data")
    for key, have in (("num_classes", dump.num_classes), ("feature_dim", dump.dim),
                      ("grid_h", dump.grid_h), ("grid_w", dump.grid_w)):
        want = cfg.section("model").get(key)
        if want is not None and want != have:
            raise DataError(f"train_data: {key} is {have} in the dump but {want} in the config")
    mcfg = cfg.model_config(num_classes=dump.num_classes, feature_dim=dump.dim,
                            grid_h=dump.grid_h, grid_w=dump.grid_w)
    over = {} if args.epochs is None else {"epochs": args.epochs}
    tcfg = cfg.train_config(**over)
    enc_settings = cfg.encoder_settings()
    enc = text_encoder(mcfg.feature_dim, mcfg.seed, enc_settings["nonlinearity"],
                       enc_settings["text_cone"])
    words = benchmark.class_word_embeddings_from_text(enc, dump.class_features,
                                                      enc_settings["word_scale"], mcfg.context_len + 1)
    res = train(dump.samples, mcfg, tcfg, words, enc)
    final = batch_loss_and_grad(res.prompt, dump.samples, mcfg, tcfg, enc)
    ce = float(np.mean([s.ce for s in final.samples]))
    ood = float(np.mean([s.ood for s in final.samples]))
    meta = {"encoder": {"nonlinearity": enc_settings["nonlinearity"],
                        "text_cone": enc_settings["text_cone"]},
            "train": asdict(tcfg), "loss_trace": res.loss_trace, "steps": res.steps}
    dataio.write_checkpoint(args.out, dataio.Checkpoint(mcfg, res.prompt, meta))
    trace_path = args.trace or f"{args.out}.loss.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(res.loss_trace):
        w.writerow([i, repr(float(v))])
    _write_text(trace_path, buf.getvalue())
    print(f"loss={final.loss!r} ce={ce!r} ood={ood!r} steps={res.steps}")
    return EXIT_OK


def _features_from(ckpt_path, id_dump):
    """Class and background text features plus the test temperature and q."""
    if ckpt_path is None:
        return id_dump.class_features, id_dump.background_feature, 1.0, None
    ck = _read_checkpoint(ckpt_path)
    enc_meta = ck.meta.get("encoder", {})
    enc = text_encoder(ck.config.feature_dim, ck.config.seed,
                       enc_meta.get("nonlinearity", "identity"), enc_meta.get("text_cone", 0.0))
    if id_dump.dim != ck.config.feature_dim or id_dump.num_classes != ck.config.num_classes:
        raise DataError("dump shape does not match the checkpoint's feature_dim/num_classes")
    return (enc.encode_all_classes(ck.prompt), enc.encode_text_background(ck.prompt),
            ck.config.tau_test, ck)


def cmd_eval(args) -> int:
    ids = _read_dump(args.id, "id set")
    oods = _read_dump(args.ood, "ood set")
    g, gb, tau_test, ck = _features_from(args.checkpoint, ids)
    if oods.dim != ids.dim:
        raise DataError("id and ood dumps have different feature dimensions")
    q = args.q if args.q is not None else (ck.config.rmcm_q if ck else 10)
    if gb is None and args.score == "rmcm":
        raise ConfigError("score: rmcm needs a checkpoint or a background feature in the id dump")
    rows, scores = [], {"id": [], "ood": []}
    for tag, dump in (("id", ids), ("ood", oods)):
        for i, b in enumerate(dump.samples):
            if gb is None:
                s = {"mcm": scoring.score_mcm(b, g, tau_test),
                     "glmcm": scoring.score_glmcm(b, g, tau_test), "rmcm": None}
            else:
                s = scoring.score_all(b, g, gb, q, tau_test)
            label = "OOD" if tag == "ood" else str(b.label)
            rows.append({"sample_id": f"{tag}{i}", "label": label, **s})
            scores[tag].append(s[args.score])
    report = scoring.detection_report(scores["id"], scores["ood"])
    text = scoring.write_score_csv(rows)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"FPR95={report.fpr95!r} AUROC={report.auroc!r} gamma={report.gamma!r}")
    return EXIT_OK


def _parse_selector(text: str, n: int) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"samples: cannot parse {part!r}") from exc
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise ConfigError(f"samples: indices {bad} outside [0, {n})")
    return sorted(set(out))


def cmd_visualize(args) -> int:
    ck = _read_checkpoint(args.checkpoint)
    dump = _read_dump(args.data, "data")
    enc_meta = ck.meta.get("encoder", {})
    enc = text_encoder(ck.config.feature_dim, ck.config.seed,
                       enc_meta.get("nonlinearity", "identity"), enc_meta.get("text_cone", 0.0))
    if dump.dim != ck.config.feature_dim or (dump.grid_h, dump.grid_w) != (ck.config.grid_h, ck.config.grid_w):
        raise DataError("dump shape does not match the checkpoint")
    g, gb = enc.encode_all_classes(ck.prompt), enc.encode_text_background(ck.prompt)
    for i in _parse_selector(args.samples, len(dump.samples)):
        view = viz.patch_view(dump.samples[i], g, gb, ck.config, not args.topk)
        names = viz.write_views(view, args.out, f"sample{i}", dump.grid_h, dump.grid_w)
        print(f"sample{i}: p={view.p:.4f} |J|={len(view.background.indices)} -> {', '.join(names)}")
    return EXIT_OK


def format_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "n", "fpr95_mean", "fpr95_std", "auroc_mean", "auroc_std",
                "iou_mean", "iou_std"])
    for r in rows:
        w.writerow([r["strategy"], r["n"]] + [f"{r[k]:.6f}" for k in
                   ("fpr95_mean", "fpr95_std", "auroc_mean", "auroc_std", "iou_mean", "iou_std")])
    return buf.getvalue()


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in strategies if s not in benchmark.STRATEGIES]
    if not strategies or unknown:
        raise ConfigError(f"strategies: unknown {unknown}; choose from {sorted(benchmark.STRATEGIES)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError as exc:
        raise ConfigError(f"seeds: {exc}") from exc
    setup = setup_from_config(cfg, seeds[0])
    cells = benchmark.run_grid(setup, strategies, seeds, score=args.score)
    text = format_table(benchmark.summarize(cells, strategies))
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    log.info("grid time %.2fs", sum(c.seconds for c in cells))
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mambo", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic train/id/ood feature dumps")
    g.add_argument("config", help="key=value config file")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="tune context and background prompts")
    t.add_argument("config", help="key=value config file (train_data names the dump)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--data", help="training dump, overrides train_data")
    t.add_argument("--epochs", type=int, help="override the epoch count")
    t.add_argument("--trace", help="loss-trace CSV path (default: <out>.loss.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score id/ood dumps and report FPR95 and AUROC")
    e.add_argument("--checkpoint", help="trained prompts; without it the dump's own text features are used")
    e.add_argument("--id", required=True, help="in-distribution dump")
    e.add_argument("--ood", required=True, help="out-of-distribution dump")
    e.add_argument("--score", choices=scoring.SCORERS, default="rmcm")
    e.add_argument("--q", type=int, help="patches averaged by rmcm (default from checkpoint)")
    e.add_argument("--out", help="score CSV path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="emit similarity, mask and delta maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True, help="dump holding the samples")
    v.add_argument("--samples", default="0", help="indices such as 0,3,5-7")
    v.add_argument("--topk", action="store_true", help="extract with top-K instead of SCT")
    v.add_argument("--out", required=True, help="output directory")
    v.set_defaults(func=cmd_visualize)

    b = sub.add_parser("benchmark", help="run the ablation grid over seeds")
    b.add_argument("config", nargs="?", help="optional key=value config file")
    b.add_argument("--strategies", default=",".join(benchmark.STRATEGIES),
                   help="comma list from baseline,refinement,patch_sct,mambo")
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--score", choices=scoring.SCORERS, default="rmcm")
    b.add_argument("--out", help="also write the table here")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, dataio.DumpError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MamboError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
