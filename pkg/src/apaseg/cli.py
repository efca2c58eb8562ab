"""Command-line surface: synth, train, infer, eval, ablate, gradcheck.

Configs are JSON files; any matching command-line flag overrides its config
key, and the APASEG_SEED environment variable overrides the seed everywhere.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import blocks, metrics
from .data import (
    PatchSpec,
    SyntheticSpec,
    VolumeRecord,
    load_volume,
    save_volume,
    synthesize_case,
)
from .gradcheck import run_gradcheck
from .infer import evaluate, sliding_window_infer
from .network import build_network, config_from_dict
from .tensor import Tensor, no_grad
from .train import (
    TrainConfig,
    axis_weight_table,
    load_checkpoint,
    train,
    train_config_from_dict,
    train_config_to_dict,
)


def _env_seed():
    raw = os.environ.get("APASEG_SEED")
    return int(raw) if raw else None


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _list_volumes(directory):
    names = sorted(os.listdir(directory))
    return [os.path.join(directory, n) for n in names if n.endswith(".vol")]


# -- synth -------------------------------------------------------------------


def cmd_synth(args):
    spec_dict = _load_json(args.spec) if args.spec else {}
    spec = SyntheticSpec(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in spec_dict.items()})
    seed = _env_seed()
    if seed is None:
        seed = args.seed if args.seed is not None else spec.seed
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for i in range(args.count):
        rec = synthesize_case(spec, seed + i, case_id=f"case_{seed + i:05d}")
        path = os.path.join(args.out, f"{rec.case_id}.vol")
        save_volume(rec, path)
        entries.append({"case_id": rec.case_id, "path": path, "split": "train"})
        print(f"wrote {path}  tumour_fraction={rec.meta['tumour_fraction']:.5f}")
    with open(os.path.join(args.out, "index.json"), "w") as f:
        json.dump({"cases": entries}, f, indent=2)
    return 0


# -- train -------------------------------------------------------------------


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    for key in ("epochs", "warmup_epochs", "batch_size", "steps_per_epoch", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{key: value})
    env = _env_seed()
    if env is not None:
        cfg = dataclasses.replace(cfg, seed=env)
    return cfg


def _load_train_dataset(data_dir):
    paths = _list_volumes(data_dir)
    if not paths:
        raise SystemExit(f"no .vol files found in {data_dir}")
    return [load_volume(p) for p in paths]


def cmd_train(args):
    cfg = train_config_from_dict(_load_json(args.config)) if args.config else TrainConfig()
    cfg = _apply_overrides(cfg, args)
    dataset = _load_train_dataset(args.data)
    result = train(cfg, dataset, out_dir=args.out, resume_from=args.resume)
    print(f"trained {cfg.epochs} epochs; final mean loss "
          f"{result.log[-1]['mean_loss']:.4f}")
    print(axis_weight_table(result.axis_weight_rows))
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


# -- infer -------------------------------------------------------------------


def _net_from_checkpoint(path):
    manifest, params, _ = load_checkpoint(path)
    cfg = train_config_from_dict(manifest["train_config"])
    net = build_network(cfg.net)
    from .network import load_state

    load_state(net, params)
    return net, cfg


def cmd_infer(args):
    net, cfg = _net_from_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    for path in _list_volumes(args.input):
        rec = load_volume(path)
        labels = sliding_window_infer(net, rec, cfg.patch, overlap=args.overlap)
        out_rec = VolumeRecord(np.zeros_like(rec.image), labels, rec.spacing, rec.case_id)
        out_path = os.path.join(args.out, f"{rec.case_id}.vol")
        save_volume(out_rec, out_path)
        print(f"wrote {out_path}")
    return 0


# -- eval --------------------------------------------------------------------


def cmd_eval(args):
    gt = [load_volume(p) for p in _list_volumes(args.gt)]
    preds = {}
    for path in _list_volumes(args.pred):
        rec = load_volume(path)
        preds[rec.case_id] = rec.label
    rows, report = evaluate(preds, gt)
    metrics.write_metrics_csv(rows, args.report)
    json_path = os.path.splitext(args.report)[0] + ".json"
    metrics.write_metrics_json(report, json_path)
    print(json.dumps(report["per_class"], indent=2))
    if report["unmatched_cases"]:
        print(f"unmatched cases: {report['unmatched_cases']}")
    print(f"wrote {args.report} and {json_path}")
    return 0


# -- ablate ------------------------------------------------------------------


def cmd_ablate(args):
    matrix = _load_json(args.matrix)
    variants = matrix.get("variants", ["apa", "cot2d", "cot3d"])
    projection_ops = matrix.get("projection_ops", ["avg_plus_max", "avg", "max", "conv"])
    fusion_modes = matrix.get("fusion_modes", ["learned", "mean"])
    base = train_config_from_dict(matrix.get("train_config", {}))
    env = _env_seed()
    if env is not None:
        base = dataclasses.replace(base, seed=env)
    epochs = matrix.get("epochs", base.epochs)
    dataset = _load_train_dataset(args.data) if args.data else None

    header = f"{'variant':<8s} {'projection':<14s} {'fusion':<8s} {'params':>10s} " \
             f"{'kq_plane':>9s} {'final_loss':>10s}"
    print(header)
    print("-" * len(header))
    results = []
    for variant in variants:
        for proj in projection_ops:
            for fusion in fusion_modes:
                net_cfg = dataclasses.replace(
                    base.net, variant=variant, projection_op=proj, fusion_mode=fusion,
                    input_extent=(base.patch.patch_shape[0] if proj == "conv" else
                                  base.net.input_extent),
                )
                cfg = dataclasses.replace(base, net=net_cfg, epochs=epochs)
                net = build_network(net_cfg)
                shape = (1, net_cfg.in_channels) + base.patch.patch_shape
                rng = np.random.default_rng(cfg.seed)
                x = Tensor(rng.standard_normal(shape).astype(np.float32))
                with no_grad():
                    logits = net(x)
                    assert logits.shape == (1, net_cfg.num_classes) + base.patch.patch_shape
                    _, trace = net.encoder[0].blocks[0](net.stem(x))
                kq = trace.plane_elements()
                final_loss = ""
                rows = net.axis_weight_rows()
                if dataset is not None and epochs > 0:
                    result = train(cfg, dataset, out_dir=None)
                    final_loss = f"{result.log[-1]['mean_loss']:.4f}"
                    rows = result.axis_weight_rows
                print(f"{variant:<8s} {proj:<14s} {fusion:<8s} {net.param_count():>10d} "
                      f"{kq:>9d} {final_loss:>10s}")
                results.append({
                    "variant": variant, "projection_op": proj, "fusion_mode": fusion,
                    "params": net.param_count(), "kq_plane_elements": kq,
                    "final_loss": final_loss or None,
                    "axis_weights": [
                        {"path": p, "level": l, "weights": [float(v) for v in w]}
                        for p, l, w in rows
                    ],
                })
                print(axis_weight_table(rows))
                print()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.json"), "w") as f:
            json.dump(results, f, indent=2)
        print(f"wrote {os.path.join(args.out, 'ablation.json')}")
    return 0


# -- gradcheck -----------------------------------------------------------------


def cmd_gradcheck(args):
    ok = run_gradcheck(tol=args.tol)
    print("gradcheck:", "all passed" if ok else "FAILURES")
    return 0 if ok else 1


# -- parser --------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="apaseg",
        description="Axis-projected attention segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a directory of .vol files")
    p.add_argument("--config", help="JSON TrainConfig")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window inference over volumes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="CSV path; JSON lands beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the variant/projection/fusion grid")
    p.add_argument("--matrix", required=True, help="JSON grid description")
    p.add_argument("--data", help="optional dataset dir to briefly train each combo")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
