"""Command line pipeline: gen-data, fit, train, eval, export-bases, check-grad.

Each subcommand reads one RunConfig assembled from defaults, then an optional
config file, then explicit flag overrides, and echoes the effective config
into the output directory. Outputs are deterministic for a fixed config, so
rerunning a command reproduces its files byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import network as nw
from .config import RunConfig, format_config, load_config, parse_config
from .errors import MorphfitError
from .evaluation import (disentangling_report, evaluate_reconstruction,
                         rank_n_identification, verification_pairs,
                         verification_report)
from .fitting import multi_image_fit
from .geometry import CoeffPair, Shape, compose_shape
from .serialization import (load_checkpoint, load_dataset, save_checkpoint,
                            save_dataset, write_obj, write_report_csv,
                            write_table_csv)
from .synthetic import build_dataset, generate_model


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphfit",
        description="synthetic 3D face shape pipeline: generate, fit, "
                    "train, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("gen-data", help="generate the synthetic model and "
                                        "rendered dataset")
    common(p)

    p = sub.add_parser("fit", help="fit one subject's landmark sets")
    common(p)
    p.add_argument("--data", required=True, help="dataset container path")
    p.add_argument("--subject", type=int, default=0, help="subject label")

    p = sub.add_parser("train", help="run training phases I, II and III")
    common(p)
    p.add_argument("--data", required=True, help="dataset container path")

    p = sub.add_parser("eval", help="verification, reconstruction and "
                                    "disentangling reports")
    common(p)
    p.add_argument("--data", required=True, help="dataset container path")
    p.add_argument("--checkpoint", required=True, help="phase III checkpoint")
    p.add_argument("--baseline", help="phase II checkpoint for the "
                                      "reconstruction comparison")

    p = sub.add_parser("export-bases", help="write decoder columns as OBJ "
                                            "point clouds")
    common(p)
    p.add_argument("--data", required=True, help="dataset container path")
    p.add_argument("--checkpoint", required=True, help="checkpoint to export")

    p = sub.add_parser("check-grad", help="finite-difference gradient audit")
    common(p)
    return parser


def _effective_config(args) -> RunConfig:
    config = RunConfig()
    if args.config:
        config = load_config(args.config, config)
    override_lines = []
    for item in args.overrides:
        override_lines.append(item if "=" in item else item + " =")
    if args.seed is not None:
        override_lines.append(f"seed = {args.seed}")
    if args.out is not None:
        override_lines.append(f"output_dir = {args.out}")
    if override_lines:
        config = parse_config("\n".join(override_lines), config)
    return config


def _echo_config(config: RunConfig) -> None:
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "config.txt")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(format_config(config))


def _cmd_gen_data(args) -> int:
    config = _effective_config(args)
    _echo_config(config)
    model = generate_model(config.model_spec())
    dataset = build_dataset(model, config.dataset_spec())
    save_dataset(dataset, os.path.join(config.output_dir, "dataset.mfd"))
    print(f"wrote {len(dataset.samples)} samples to "
          f"{os.path.join(config.output_dir, 'dataset.mfd')}")
    return 0


def _cmd_fit(args) -> int:
    config = _effective_config(args)
    _echo_config(config)
    dataset = load_dataset(args.data)
    rows = [i for i, s in enumerate(dataset.samples)
            if s.subject_label == args.subject]
    if not rows:
        raise MorphfitError(f"subject {args.subject} not present in dataset")
    landmark_sets = [dataset.samples[i].landmarks for i in rows]
    result = multi_image_fit(dataset.model, landmark_sets, config.fit_config())

    out = config.output_dir
    identity = compose_shape(dataset.model,
                             CoeffPair(result.alpha_id,
                                       np.zeros(dataset.model.k_exp)))
    write_obj(identity, os.path.join(out, "identity.obj"))
    for j, (alpha_exp, _pose) in enumerate(result.per_image):
        full = compose_shape(dataset.model,
                             CoeffPair(result.alpha_id, alpha_exp))
        write_obj(full, os.path.join(out, f"full_{j:02d}.obj"))
    write_table_csv(("subject", "converged", "iterations_used",
                     "final_objective"),
                    [(args.subject, result.converged, result.iterations_used,
                      result.objective_trace[-1])],
                    os.path.join(out, "fit.csv"))
    print(f"subject {args.subject}: converged={result.converged} "
          f"iterations={result.iterations_used}")
    return 0


def _train_pipeline(config: RunConfig, dataset):
    """Phases I-III with stage seeds derived from the master seed."""
    model = dataset.model
    image_dim = dataset.spec.image_resolution ** 2
    encoder = nw.init_encoder(image_dim, model.k_id, model.k_exp,
                              seed=config.seed)
    decoder = nw.init_decoder(model.mean.coords.size, model.k_id, model.k_exp,
                              seed=config.seed + 1)
    head = nw.init_head(dataset.n_train_subjects, model.k_id,
                        seed=config.seed + 2)

    enc1, history = nw.train_phase1(encoder, dataset, config.train_config("I"))
    dec2 = nw.train_phase2(decoder, dataset, n_pairs=config.phase2_pairs,
                           seed=config.seed + 3)

    train_images = np.array([dataset.samples[int(i)].depth_image.ravel()
                             for i in dataset.train_indices])
    train_labels = np.array([dataset.samples[int(i)].subject_label
                             for i in dataset.train_indices])
    codes, _ = nw.encode_images(enc1, train_images)
    warm_head = nw.head_from_class_means(codes, train_labels,
                                         dataset.n_train_subjects,
                                         scale=config.head_scale)
    enc3, dec3, head3, trace = nw.train_phase3(enc1, dec2, warm_head, dataset,
                                               config.train_config("III"))
    return (encoder, decoder, head), (enc1, dec2, warm_head), \
        (enc3, dec3, head3), history, trace


def _cmd_train(args) -> int:
    config = _effective_config(args)
    _echo_config(config)
    dataset = load_dataset(args.data)
    init, after2, after3, history, trace = _train_pipeline(config, dataset)
    out = config.output_dir
    save_checkpoint(after2[0], init[1], init[2], config,
                    os.path.join(out, "phase1.ckpt"))
    save_checkpoint(after2[0], after2[1], after2[2], config,
                    os.path.join(out, "phase2.ckpt"))
    save_checkpoint(after3[0], after3[1], after3[2], config,
                    os.path.join(out, "phase3.ckpt"))
    write_table_csv(("epoch", "train_loss", "val_loss"),
                    [(i, tr, va) for i, (tr, va) in enumerate(history)],
                    os.path.join(out, "phase1_trace.csv"))
    write_table_csv(("epoch", "lambda_r", "total", "recon", "ident",
                     "accuracy"),
                    [(i, r.lambda_r, r.total, r.recon, r.ident, r.accuracy)
                     for i, r in enumerate(trace)],
                    os.path.join(out, "phase3_trace.csv"))
    print(f"phase I final train loss {history[-1][0]:.6g}; "
          f"phase III final total loss {trace[-1].total:.6g}")
    return 0


def _cmd_eval(args) -> int:
    config = _effective_config(args)
    _echo_config(config)
    dataset = load_dataset(args.data)
    encoder, decoder, _head, _cfg = load_checkpoint(args.checkpoint)
    model = dataset.model
    out = config.output_dir

    rows = dataset.test_indices
    images = np.array([dataset.samples[int(i)].depth_image.ravel()
                       for i in rows])
    labels = np.array([dataset.samples[int(i)].subject_label for i in rows])
    c_id, c_res = nw.encode_images(encoder, images)

    # verification over all held-out pairs; gallery = first image per subject
    pairs = verification_pairs(c_id, labels)
    gallery_rows = [int(np.flatnonzero(labels == s)[0])
                    for s in np.unique(labels)]
    probe_rows = [i for i in range(len(labels)) if i not in gallery_rows]
    rank1 = rank_n_identification(c_id[gallery_rows], labels[gallery_rows],
                                  c_id[probe_rows], labels[probe_rows], 1)
    rank5 = rank_n_identification(c_id[gallery_rows], labels[gallery_rows],
                                  c_id[probe_rows], labels[probe_rows], 5)
    report = verification_report(pairs, n_folds=config.n_folds,
                                 rank1=rank1, rank5=rank5)
    write_report_csv(report, os.path.join(out, "verification.csv"))

    def reconstructions(enc, dec):
        ci, cr = nw.encode_images(enc, images)
        deltas = (ci @ dec.weight_id.T + dec.bias_id
                  + cr @ dec.weight_res.T + dec.bias_res)
        return [Shape(model.mean.coords + d) for d in deltas]

    truths = [dataset.samples[int(i)].ground_truth_shape for i in rows]
    recon = evaluate_reconstruction(reconstructions(encoder, decoder), truths,
                                    model.landmark_indices,
                                    model.nose_tip_index, config.crop_radius)
    write_report_csv(recon, os.path.join(out, "reconstruction.csv"))
    if args.baseline:
        enc2, dec2, _h2, _c2 = load_checkpoint(args.baseline)
        base = evaluate_reconstruction(reconstructions(enc2, dec2), truths,
                                       model.landmark_indices,
                                       model.nose_tip_index,
                                       config.crop_radius)
        write_report_csv(base, os.path.join(out, "reconstruction_baseline.csv"))

    write_report_csv(disentangling_report(encoder, dataset),
                     os.path.join(out, "disentangling.csv"))
    print(f"auc {report.auc:.4f} eer {report.eer:.4f} "
          f"rmse {recon.rmse_paper:.6g}")
    return 0


def _cmd_export_bases(args) -> int:
    config = _effective_config(args)
    _echo_config(config)
    dataset = load_dataset(args.data)
    _enc, decoder, _head, _cfg = load_checkpoint(args.checkpoint)
    mean = dataset.model.mean.coords
    out = config.output_dir
    # a unit code step per column, added to the mean, mirrors how the
    # decoder is read as a shape basis
    for k in range(decoder.q_id):
        write_obj(Shape(mean + decoder.weight_id[:, k]),
                  os.path.join(out, f"basis_id_{k:02d}.obj"))
    for k in range(decoder.q_res):
        write_obj(Shape(mean + decoder.weight_res[:, k]),
                  os.path.join(out, f"basis_res_{k:02d}.obj"))
    print(f"wrote {decoder.q_id + decoder.q_res} basis meshes to {out}")
    return 0


def _cmd_check_grad(args) -> int:
    config = _effective_config(args)
    model = generate_model(config.model_spec())
    dataset = build_dataset(model, config.dataset_spec())
    encoder = nw.init_encoder(dataset.spec.image_resolution ** 2, model.k_id,
                              model.k_exp, seed=config.seed)
    decoder = nw.init_decoder(model.mean.coords.size, model.k_id, model.k_exp,
                              seed=config.seed + 1)
    head = nw.init_head(dataset.n_train_subjects, model.k_id,
                        seed=config.seed + 2)
    batch = nw.training_batch(dataset,
                              dataset.train_indices[:config.batch_size])
    error = nw.finite_diff_check(encoder, decoder, head, batch,
                                 lambda_r=config.lambda_r)
    print(f"max relative gradient error: {error:.3e}")
    return 0 if error < 1e-5 else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "fit": _cmd_fit,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "export-bases": _cmd_export_bases,
    "check-grad": _cmd_check_grad,
}


def cli(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code.

    Usage problems exit 2 (argparse convention); any pipeline error is
    reported as a single `error: Kind: message` line on stderr with exit 1.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except MorphfitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
