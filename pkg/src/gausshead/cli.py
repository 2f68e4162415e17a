"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad input, file or flag),
2 numeric failure (non-finite values, failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ValidationError

log = logging.getLogger("gausshead")

OUT_ENV = "GAUSSHEAD_OUT"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, ".")) / name


def _read_config(path, fallback=None):
    from .config import RunConfig, load_config
    if path:
        return load_config(path)
    return fallback if fallback is not None else RunConfig()


def save_png(path, img) -> None:
    from PIL import Image
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    from .io import read_tensor
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return read_tensor(path)


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthetic import CorpusSpec, generate_synthetic_corpus
    cfg = _read_config(args.config)
    over = {k: v for k, v in (("n_identities", args.identities), ("n_frames", args.frames),
                               ("resolution", args.resolution), ("n_gaussians", args.gaussians)) if v is not None}
    cfg = cfg.with_overrides(**over)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else _default_out("corpus")
    path = generate_synthetic_corpus(out, CorpusSpec.from_config(cfg), seed=seed)
    print(path)
    return 0


def _ids(text):
    return [s for s in text.split(",") if s] if text else None


def cmd_pretrain(args) -> int:
    from . import trainer as tr
    resume = tr.load_checkpoint(args.resume) if args.resume else None
    cfg = _read_config(args.config, resume.cfg if resume else None)
    if resume is not None and resume.cfg.hash() != cfg.hash():
        raise ValidationError(f"config hash {cfg.hash()} differs from checkpoint hash {resume.cfg.hash()}")
    ids = _ids(args.ids) or (resume.ids("pretrain") if resume else None)
    _, clips = tr.load_manifest(args.manifest, ids)
    out = Path(args.out)
    state = tr.pretrain(clips, cfg, resume=resume, stop_at=args.stop_at,
                        checkpoint_every=args.checkpoint_every, checkpoint_path=out)
    tr.save_checkpoint(out, state)
    tr.write_report(args.report or out.with_suffix(".report.txt"), state)
    print(out)
    return 0


def cmd_adapt(args) -> int:
    from . import trainer as tr
    pre = tr.load_checkpoint(args.checkpoint)
    cfg = _read_config(args.config, pre.cfg)
    if args.appearance:
        cfg = cfg.with_overrides(adapt_appearance=True)
    need_geo = cfg.depth_weight > 0 or cfg.normal_weight > 0
    _, clips = tr.load_manifest(args.manifest, [args.id], need_geometry=need_geo)
    state = tr.adapt(pre, clips[0], cfg)
    out = Path(args.out)
    tr.save_checkpoint(out, state)
    tr.write_report(args.report or out.with_suffix(".report.txt"), state)
    print(out)
    return 0


def _cameras(path, cfg, n):
    from .camera import Camera
    from .io import read_tensor
    if path:
        arr = read_tensor(path).reshape(-1, 19)
        cams = [Camera.from_array(a) for a in arr]
        return [cams[i % len(cams)] for i in range(n)]
    from .synthetic import default_camera
    return [default_camera(cfg.resolution)] * n


def cmd_infer(args) -> int:
    from . import trainer as tr
    from .io import read_tensor, write_tensor
    from .losses import EMOTIONS
    state = tr.load_checkpoint(args.checkpoint)
    audio = read_tensor(args.audio)
    aus = read_tensor(args.au)
    n = audio.shape[0]
    poses = read_tensor(args.poses) if args.poses else np.zeros((1, 6))
    res = tr.infer(state, args.id, audio, aus, poses, _cameras(args.camera, state.cfg, n))
    out = Path(args.out) if args.out else _default_out("frames")
    for t, img in enumerate(res.frames):
        write_tensor(out / f"{t:04d}.etgt", img)
        if args.png:
            save_png(out / "png" / f"{t:04d}.png", img)
    rows = ["frame\tg\temotion\tlabel"]
    rows += [f"{t}\t{g:.6f}\t{k}\t{EMOTIONS[k]}" for t, (g, k) in enumerate(zip(res.g, res.emotion))]
    (out / "motion_log.tsv").write_text("\n".join(rows) + "\n")
    for note in res.notes:
        print(note)
    print(f"{n} frames written to {out}")
    return 0


def cmd_render(args) -> int:
    from . import trainer as tr
    from .autodiff import Tensor
    from .io import read_tensor, write_tensor
    state = tr.load_checkpoint(args.checkpoint)
    if args.id not in state.roles:
        raise ValidationError(f"identity {args.id!r} is not in the checkpoint")
    k = state.heads[args.id].n_expr
    params = read_tensor(args.params).reshape(-1, k + 3) if args.params else np.zeros((1, k + 3))
    poses = read_tensor(args.pose).reshape(-1, 6) if args.pose else np.zeros((1, 6))
    cams = _cameras(args.camera, state.cfg, len(params))
    tensors = {n: Tensor(v) for n, v in state.params.items()}
    out = Path(args.out) if args.out else _default_out("render")
    for t, face in enumerate(params):
        ro = tr.render_frame_t(state, tensors, args.id, face, None, poses[t % len(poses)], cams[t])
        write_tensor(out / f"{t:04d}.etgt", ro.color.data)
        save_png(out / f"{t:04d}.png", ro.color.data)
    print(f"{len(params)} frames written to {out}")
    return 0


def _frame_files(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise ValidationError(f"not a directory: {d}")
    files = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in (".etgt", ".png") and p.stem not in files:
            files[p.stem] = p
    return files


def cmd_eval(args) -> int:
    from .io import read_tensor
    from .losses import lmd, psnr, ssim
    pred, gt = _frame_files(Path(args.pred)), _frame_files(Path(args.gt))
    names = sorted(set(pred) & set(gt))
    if not names:
        raise ValidationError("no frame names shared by the two directories")
    if set(pred) != set(gt):
        log.warning("%d frames present in only one directory are skipped", len(set(pred) ^ set(gt)))
    lm_p = read_tensor(args.pred_landmarks) if args.pred_landmarks else None
    lm_g = read_tensor(args.gt_landmarks) if args.gt_landmarks else None
    use_lmd = lm_p is not None and lm_g is not None
    header = ["frame", "psnr", "ssim"] + (["lmd"] if use_lmd else [])
    rows, cols = [], []
    for i, name in enumerate(names):
        a, b = load_image(pred[name]), load_image(gt[name])
        vals = [psnr(a, b), ssim(a, b)] + ([lmd(lm_p[i], lm_g[i])] if use_lmd else [])
        cols.append(vals)
        rows.append([name] + [f"{v:.6f}" for v in vals])
    rows.append(["mean"] + [f"{v:.6f}" for v in np.mean(cols, axis=0)])
    text = "\n".join("\t".join(r) for r in [header] + rows) + "\n"
    if args.out:
        from .io import atomic_write
        atomic_write(args.out, text.encode())
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    results = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} max rel err {r.error:.3e}  (tol {r.tol:.0e}, "
              f"{r.seconds:.1f} s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


def cmd_inspect(args) -> int:
    from .io import ASSET_MAGIC, CHECKPOINT_MAGIC, TENSOR_MAGIC, decode_bundle, decode_tensor
    path = Path(args.path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    magic = buf[:4]
    if magic == CHECKPOINT_MAGIC:
        meta, tensors = decode_bundle(buf, CHECKPOINT_MAGIC)
        print(f"checkpoint {path} ({len(buf)} bytes)")
        for key in ("version", "config_hash", "arch_hash", "seed", "iteration", "phase", "roles", "n_mouth"):
            print(f"  {key}: {meta.get(key)}")
        n_par = sum(v[0].size for k, v in tensors.items() if k.startswith("param/"))
        print(f"  tensors: {len(tensors)}, parameters: {n_par}")
        if args.config:
            print(meta["config"], end="")
    elif magic == ASSET_MAGIC:
        meta, tensors = decode_bundle(buf, ASSET_MAGIC)
        print(f"asset {path}: kind {meta.get('kind')}")
        for k, (arr, dt) in sorted(tensors.items()):
            print(f"  {k}: {dt} {arr.shape}")
    elif magic == TENSOR_MAGIC:
        arr, _, dt = decode_tensor(buf)
        print(f"tensor {path}: {dt} {arr.shape}")
    else:
        from .config import parse_config
        try:
            text = buf.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValidationError(f"{path}: unknown file type (magic {magic!r})") from exc
        cfg = parse_config(text)
        print(f"config {path}: hash {cfg.hash()} arch {cfg.arch_hash()}")
        print(cfg.dumps(), end="")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gausshead", description="Audio-driven Gaussian head avatars")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("gen-data", help="write a synthetic corpus")
    s.add_argument("--out", help=f"output directory (default ${OUT_ENV}/corpus)")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--identities", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--gaussians", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="pretrain on several identities")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config")
    s.add_argument("--ids", help="comma-separated identity ids (default: all)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-at", type=int, help="stop at this iteration")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="adapt a pretrained checkpoint to a new identity")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--appearance", action="store_true", help="also fit the identity's Gaussian attributes")
    s.add_argument("--report")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("infer", help="drive an identity with audio features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--audio", required=True)
    s.add_argument("--au", required=True)
    s.add_argument("--poses")
    s.add_argument("--camera")
    s.add_argument("--out")
    s.add_argument("--png", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("render", help="render an identity at given face parameters")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--params", help="tensor of (K + 3) expression + jaw values per frame (default rest)")
    s.add_argument("--pose")
    s.add_argument("--camera")
    s.add_argument("--out")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM/LMD table between two frame directories")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--pred-landmarks")
    s.add_argument("--gt-landmarks")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", help="print checkpoint, asset, tensor or config metadata")
    s.add_argument("path")
    s.add_argument("--config", action="store_true", help="also print the stored configuration")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
