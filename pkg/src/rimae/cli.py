"""Command-line surface: generation, pretraining, embedding, reconstruction,
gradient checking, the rotation-invariance harness, masking-ratio sweeps, and
a linear probe on frozen features.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command is
deterministic for fixed flags and ``--seed`` (with ``--threads 1``).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .cloud import (
    PointCloud,
    SHAPE_KINDS,
    anisotropic_scale,
    apply_rotation,
    generate_dataset,
    generate_shape,
    load_point_cloud,
    random_rotation,
    save_point_cloud,
)
from .frames import rotation_normalize
from .model import (
    ModelConfig,
    ModelState,
    cloud_feature,
    decoder_forward,
    encoder_forward,
    prepare_patches,
)
from .patches import mask_split
from .pod import pod_targets_for_masked
from .training import TrainConfig, grad_check, history_to_csv, mpm_loss, pretrain

_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line is not key=value: {raw!r}")
        values[key.strip()] = value.strip()
    return values


def _build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    overrides = _parse_config_file(args.config) if getattr(args, "config", None) else {}
    model_kwargs = {}
    train_kwargs = {}
    for key, value in overrides.items():
        if key in _MODEL_FIELDS:
            model_kwargs[key] = int(value)
        elif key in _TRAIN_FIELDS:
            if key in ("lr_max", "lr_min", "weight_decay", "mask_ratio", "clip_norm"):
                train_kwargs[key] = float(value)
            else:
                train_kwargs[key] = int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    if getattr(args, "seed", None) is not None:
        train_kwargs["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        train_kwargs["threads"] = args.threads
    base = ModelConfig.desk_scale()
    mcfg = ModelConfig(**{**{f.name: getattr(base, f.name) for f in fields(ModelConfig)}, **model_kwargs})
    tcfg = TrainConfig(**train_kwargs)
    return mcfg, tcfg


def _load_cloud(path: str) -> PointCloud:
    return load_point_cloud(Path(path).read_bytes())


def _load_dataset(args, mcfg: ModelConfig, seed: int) -> list[PointCloud]:
    if args.data is not None:
        paths = sorted(Path(args.data).glob("*.opc"))
        if not paths:
            raise ValueError(f"no .opc files under {args.data}")
        return [_load_cloud(str(p)) for p in paths]
    return generate_dataset(args.synthetic, mcfg.num_points, seed)


def _write_or_print(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def cmd_gen(args) -> int:
    cloud = generate_shape(args.shape, args.n, args.seed)
    Path(args.out).write_bytes(save_point_cloud(cloud))
    return 0


def cmd_pretrain(args) -> int:
    mcfg, tcfg = _build_configs(args)
    dataset = _load_dataset(args, mcfg, tcfg.seed)
    state, history = pretrain(dataset, tcfg, mcfg)
    save_checkpoint(state, args.out)
    if args.curve is not None:
        Path(args.curve).write_text(history_to_csv(history), encoding="utf-8")
    final = history[-1]
    print(f"final_epoch={final.epoch} mean_loss={final.mean_loss:.17g} baseline={final.baseline_loss:.17g}")
    return 0


def cmd_embed(args) -> int:
    state, _ = load_checkpoint(args.ckpt)
    feature = cloud_feature(state, _load_cloud(args.input))
    _write_or_print(" ".join(f"{v:.17g}" for v in feature) + "\n", args.out)
    return 0


def cmd_reconstruct(args) -> int:
    state, mcfg = load_checkpoint(args.ckpt)
    cloud = _load_cloud(args.input)
    if cloud.normals is None:
        raise ValueError("reconstruction needs a cloud with normals")
    patches = prepare_patches(cloud, mcfg)
    split = mask_split(mcfg.num_patches, args.mask_ratio, args.seed)
    if split.masked.size == 0:
        raise ValueError("no masked patches")
    targets = np.stack([t.values for t in pod_targets_for_masked(patches, split, mcfg.pod_grid)])
    encoded = encoder_forward(state, patches, visible=split.visible, mode="pretrain")
    predictions = decoder_forward(state, encoded[-1].tokens, patches, split.visible, split.masked)
    total = float(mpm_loss(predictions, targets).data)

    lines = ["patch_index,target_norm,prediction_norm,sq_error"]
    preds = predictions.data
    for row, patch_index in enumerate(split.masked):
        t_norm = float(np.linalg.norm(targets[row]))
        p_norm = float(np.linalg.norm(preds[row]))
        err = float(((preds[row] - targets[row]) ** 2).sum())
        lines.append(f"{patch_index},{t_norm:.17g},{p_norm:.17g},{err:.17g}")
    _write_or_print("\n".join(lines) + "\n", args.out)
    print(f"total_loss={total:.17g}")
    return 0


def cmd_grad_check(args) -> int:
    report = grad_check(seed=args.seed)
    _write_or_print(report.format(), args.out)
    return 0


def cmd_check_invariance(args) -> int:
    state, _ = load_checkpoint(args.ckpt)
    cloud = _load_cloud(args.input)
    patches = prepare_patches(cloud, state.config)
    degenerate = sum(1 for p in patches if p.degenerate)
    base = cloud_feature(state, cloud)
    denom = max(float(np.abs(base).max()), 1e-30)
    deviation = 0.0
    for trial in range(args.trials):
        rot_seed = int(np.random.SeedSequence((args.seed, trial)).generate_state(1)[0])
        rotated = apply_rotation(cloud, random_rotation(rot_seed))
        feature = cloud_feature(state, rotated)
        deviation = max(deviation, float(np.abs(feature - base).max()) / denom)
    print(f"trials={args.trials} max_rel_linf_deviation={deviation:.17g} degenerate_patches={degenerate}")
    return 0 if deviation <= args.tol else 1


def cmd_mask_sweep(args) -> int:
    mcfg, tcfg = _build_configs(args)
    dataset = _load_dataset(args, mcfg, tcfg.seed)
    ratios = []
    for token in args.ratios.split(","):
        value = float(token)
        if not 10 <= value <= 90:
            raise ValueError(f"mask ratio {value} outside [10, 90]")
        if value in ratios:
            print(f"warning: duplicate ratio {value:g} ignored", file=sys.stderr)
            continue
        ratios.append(value)
    lines = ["ratio,final_loss"]
    for ratio in ratios:
        run_cfg = TrainConfig(
            **{**{f.name: getattr(tcfg, f.name) for f in fields(TrainConfig)}, "mask_ratio": ratio}
        )
        _, history = pretrain(dataset, run_cfg, mcfg)
        lines.append(f"{ratio:g},{history[-1].mean_loss:.17g}")
    _write_or_print("\n".join(lines) + "\n", args.out)
    return 0


def _read_manifest(path: str) -> tuple[list[PointCloud], list[str]]:
    clouds = []
    labels = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        label, _, cloud_path = line.partition(" ")
        if not cloud_path:
            raise ValueError(f"manifest line needs '<label> <path>': {raw!r}")
        labels.append(label)
        clouds.append(_load_cloud(cloud_path.strip()))
    return clouds, labels


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    num_classes: int,
    steps: int = 500,
    lr: float = 0.1,
) -> tuple[float, float]:
    """Full-batch softmax regression on frozen features; returns accuracies.

    Features are standardized with statistics fitted on the training split, so
    the fixed step size works at any raw feature scale.
    """
    mean = train_features.mean(axis=0)
    std = train_features.std(axis=0)
    std[std < 1e-12] = 1.0
    train_features = (train_features - mean) / std
    test_features = (test_features - mean) / std

    def with_bias(x):
        return np.hstack([x, np.ones((x.shape[0], 1))])

    xb = with_bias(train_features)
    onehot = np.eye(num_classes)[train_labels]
    weights = np.zeros((xb.shape[1], num_classes))
    n = xb.shape[0]
    for _ in range(steps):
        logits = xb @ weights
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        weights -= lr * (xb.T @ (probs - onehot)) / n

    def accuracy(features, labels):
        pred = (with_bias(features) @ weights).argmax(axis=1)
        return float((pred == labels).mean())

    return accuracy(train_features, train_labels), accuracy(test_features, test_labels)


def probe_features(state: ModelState, clouds: list[PointCloud]) -> np.ndarray:
    return np.stack([cloud_feature(state, pc) for pc in clouds])


def make_probe_clouds(
    per_class: int,
    n: int,
    seed: int,
    rotated: bool,
    jitter: float = 0.025,
) -> tuple[list[PointCloud], np.ndarray]:
    """Labeled synthetic clouds for probing: jittered, scaled, optionally rotated.

    The same (kind, index) pair always maps to the same underlying cloud, so
    aligned and rotated variants of a split differ only by the rotation.
    """
    clouds = []
    labels = []
    for label, kind in enumerate(SHAPE_KINDS):
        for i in range(per_class):
            ss = np.random.SeedSequence((seed, label, i)).generate_state(4)
            cloud = generate_shape(kind, n, int(ss[0]))
            rng = np.random.default_rng(int(ss[1]))
            positions = cloud.positions + jitter * rng.standard_normal((n, 3))
            cloud = anisotropic_scale(PointCloud(positions), int(ss[2]))
            if rotated:
                cloud = apply_rotation(cloud, random_rotation(int(ss[3])))
            clouds.append(cloud)
            labels.append(label)
    return clouds, np.asarray(labels)


def cmd_probe(args) -> int:
    state, _ = load_checkpoint(args.ckpt)
    train_clouds, train_raw = _read_manifest(args.train)
    test_clouds, test_raw = _read_manifest(args.test)
    classes = sorted(set(train_raw))
    if len(classes) < 2:
        raise ValueError("probe needs at least 2 classes")
    index = {c: i for i, c in enumerate(classes)}
    train_labels = np.array([index[c] for c in train_raw])
    try:
        test_labels = np.array([index[c] for c in test_raw])
    except KeyError as exc:
        raise ValueError(f"test label {exc} missing from training set") from exc
    train_acc, test_acc = linear_probe(
        probe_features(state, train_clouds),
        train_labels,
        probe_features(state, test_clouds),
        test_labels,
        num_classes=len(classes),
    )
    print(f"train_accuracy={train_acc:.6f}")
    print(f"test_accuracy={test_acc:.6f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rimae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gen", help="generate a synthetic shape as an OPC file")
    p.add_argument("--shape", choices=SHAPE_KINDS, required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="masked-autoencoding pretraining")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of .opc files")
    src.add_argument("--synthetic", type=int, help="size of a generated dataset")
    p.add_argument("--config", help="key=value overrides for model/train config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="loss history CSV path")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="global feature of a cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("reconstruct", help="per-masked-patch reconstruction report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mask-ratio", type=float, default=60.0)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("check-invariance", help="rotation-invariance harness")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--trials", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    common(p)
    p.set_defaults(func=cmd_check_invariance)

    p = sub.add_parser("mask-sweep", help="pretrain across masking ratios")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--synthetic", type=int)
    p.add_argument("--ratios", default="10,20,30,40,50,60,70,80,90")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_mask_sweep)

    p = sub.add_parser("probe", help="linear probe on frozen global features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True, help="manifest: one '<label> <path>' per line")
    p.add_argument("--test", required=True)
    common(p)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures exit 1, with the reason on stderr
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
