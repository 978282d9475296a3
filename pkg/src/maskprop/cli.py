"""Command-line driver: ``maskprop synth|train|infer|eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import ConfigError, TrainConfig

log = logging.getLogger("maskprop")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def cmd_synth(args) -> int:
    from .data import generate_corpus, write_davis_layout
    from .regressor import SizeError, check_size

    try:
        check_size(args.size, args.size, args.num_stages)
    except SizeError as exc:
        raise UsageError(f"--size {args.size}: {exc}") from None
    if args.sequences < 1 or args.frames < 2 or args.objects < 1:
        raise UsageError("--sequences, --objects must be >= 1 and --frames >= 2")
    corpus = generate_corpus(
        args.sequences, seed=args.seed, num_frames=args.frames, image_size=args.size,
        num_objects=args.objects, occlusion=args.occlusion, prefix=args.prefix,
    )
    for seq in corpus:
        write_davis_layout(seq, args.out)
        print(f"{seq.name}\tframes={seq.num_frames}\tobjects={len(seq.gt_tracks)}\tsize={args.size}")
    return EXIT_OK


def _load_config(path) -> TrainConfig:
    try:
        return TrainConfig.load(path)
    except ConfigError as exc:
        raise UsageError(f"config {path}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def cmd_train(args) -> int:
    from .data import list_sequences, read_davis_layout
    from .trainer import (
        DivergenceError, init_state, load_checkpoint, pretrain, restore_state,
        save_checkpoint, train_adversarial, write_loss_log,
    )

    config = _load_config(args.config) if args.config else TrainConfig()
    if args.phase == "adversarial" and not args.resume:
        raise UsageError("--phase adversarial needs --resume with a pretrained checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    dataset = [read_davis_layout(args.data, name) for name in list_sequences(args.data)]
    state = restore_state(load_checkpoint(args.resume), config) if args.resume else init_state(config)

    last_saved = {"step": state.step}

    def on_epoch_end(s):
        save_checkpoint(s, out / "checkpoint.pt")
        write_loss_log(s.log, out / "loss_log.csv")
        if args.save_every and s.step - last_saved["step"] >= args.save_every:
            save_checkpoint(s, out / f"step_{s.step:07d}.pt")
            last_saved["step"] = s.step

    try:
        if args.phase in ("pretrain", "both") and state.phase == "pretrain":
            state = pretrain(dataset, config, state, on_epoch_end=on_epoch_end)
            save_checkpoint(state, out / "pretrain.pt")
        if args.phase in ("adversarial", "both"):
            state = train_adversarial(state, dataset, config, on_epoch_end=on_epoch_end)
    except DivergenceError as exc:
        write_loss_log(state.log, out / "loss_log.csv")
        print(f"training diverged: {exc}; last finite checkpoint kept in {out}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(state, out / "checkpoint.pt")
    save_checkpoint(state, out / "regressor.pt", include_critics=False)
    write_loss_log(state.log, out / "loss_log.csv")
    if state.log:
        final = state.log[-1]
        print(" ".join(f"{k}={final[k]:.6g}" for k in
                       ("ce", "spatial", "temporal", "gp_spatial", "gp_temporal",
                        "total_regressor", "total_critic_s", "total_critic_t")))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import read_davis_layout
    from .inference import build_references, segment_sequence, write_results
    from .trainer import load_checkpoint

    if not Path(args.ckpt).is_file():
        print(f"missing checkpoint {args.ckpt}", file=sys.stderr)
        return EXIT_RUNTIME
    ref_frame = args.ref_frame if args.ref_frame == "first" else int(args.ref_frame)
    payload = load_checkpoint(args.ckpt)
    video = read_davis_layout(args.data, args.seq)
    result = segment_sequence(payload, video, build_references(video, ref_frame))
    write_results(result, args.seq, args.out, soft_masks=args.soft_masks)
    print(f"{args.seq}: {result.timing['fps']:.1f} fps")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate

    report = evaluate(args.pred, args.gt, include_first=args.include_first)
    report.write_csv(args.out)
    agg = report.aggregate()
    print(f"J&F {agg['JF_mean']:.4f}  J {agg['J_mean']:.4f}  F {agg['F_mean']:.4f}")
    return EXIT_OK


def _ref_frame(text: str) -> str:
    if text == "first" or text.isdigit():
        return text
    raise argparse.ArgumentTypeError("expected 'first' or a frame index")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic moving-shapes corpus in DAVIS layout")
    p.add_argument("--out", required=True, help="output root directory")
    p.add_argument("--sequences", type=int, default=20, help="number of sequences (default 20)")
    p.add_argument("--frames", type=int, default=24, help="frames per sequence (default 24)")
    p.add_argument("--size", type=int, default=64, help="square frame size in pixels (default 64)")
    p.add_argument("--objects", type=int, default=2, help="objects per sequence (default 2)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default 0)")
    p.add_argument("--num-stages", type=int, default=4,
                   help="encoder stages the size must be divisible for (default 4)")
    p.add_argument("--occlusion", action="store_true", help="let objects cross each other")
    p.add_argument("--prefix", default="synth", help="sequence name prefix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain and/or adversarially train the regressor")
    p.add_argument("--data", required=True, help="training corpus root in DAVIS layout")
    p.add_argument("--config", help="key = value config file (defaults when omitted)")
    p.add_argument("--out", required=True, help="directory for checkpoints and loss log")
    p.add_argument("--phase", choices=("pretrain", "adversarial", "both"), default="both")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--save-every", type=int, default=0,
                   help="extra checkpoint every N optimizer steps (checked at epoch ends)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="propagate reference masks through one sequence")
    p.add_argument("--ckpt", required=True, help="checkpoint with regressor weights")
    p.add_argument("--data", required=True, help="corpus root in DAVIS layout")
    p.add_argument("--seq", required=True, help="sequence name")
    p.add_argument("--out", required=True, help="output root (Annotations/, timing/)")
    p.add_argument("--ref-frame", type=_ref_frame, default="first",
                   help="'first' (first appearance per object) or a frame index")
    p.add_argument("--soft-masks", action="store_true", help="also write per-object soft masks")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predicted root in DAVIS layout")
    p.add_argument("--gt", required=True, help="ground-truth root in DAVIS layout")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--include-first", action="store_true", help="also score the reference frame")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"maskprop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"maskprop {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
