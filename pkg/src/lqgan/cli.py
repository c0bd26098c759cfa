"""Command line entry point: ``lqgan <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort,
5 no optimum in grid. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from lqgan.errors import ConfigError, DataError, LqgError

log = logging.getLogger("lqgan")


# ---------------------------------------------------------------------------
# Small helpers


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) or (H, W) array with values in [0, 1] as an 8-bit PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DataError("PNG writer takes (H, W), (H, W, 1) or (H, W, 3)", shape=list(img.shape))
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, c = px.shape
    color_type = 2 if c == 3 else 0
    raw = b"".join(b"\x00" + px[r].tobytes() for r in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    blob = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")
    Path(path).write_bytes(blob)


def image_grid(images: np.ndarray, cols: int | None = None, pad: int = 1) -> np.ndarray:
    n, h, w, c = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, c))
    for i in range(n):
        r, k = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + k * (w + pad)
        grid[y:y + h, x:x + w] = images[i]
    return grid


def _sizes(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError("layer sizes must be comma-separated integers", value=text) from None
    if len(vals) != 2 or min(vals) < 1:
        raise ConfigError("expected two positive layer sizes like 125,62", value=text)
    return vals


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _env_seed(value: int | None, default: int | None) -> int | None:
    """An explicit flag wins, then LQG_SEED, then ``default``."""
    from lqgan.config import SEED_ENV

    if value is not None:
        return value
    raw = os.environ.get(SEED_ENV)
    if raw:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer", value=raw) from None
    return default


def _run_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Data commands


def cmd_gen_data(args) -> int:
    from lqgan.data import save_dataset, synth_dataset

    seed = _env_seed(args.seed, 42)
    ds = synth_dataset(args.n, seed, args.kind)
    save_dataset(args.out, ds)
    _emit({"out": args.out, "n": args.n, "kind": args.kind, "seed": seed})
    return 0


def cmd_convert(args) -> int:
    from lqgan.data import convert_array, save_dataset

    try:
        arr = np.load(args.input, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError("cannot read input array", path=args.input, detail=str(exc)) from None
    if isinstance(arr, np.lib.npyio.NpzFile):
        key = args.key or arr.files[0]
        arr = arr[key]
    images = convert_array(arr, args.layout, args.drop_channels, args.scale)
    save_dataset(args.out, images)
    _emit({"out": args.out, "shape": list(images.shape)})
    return 0


def _load_images(cfg, seed: int):
    """The run's data sub-selection (from file or synthesized)."""
    from lqgan.data import load_dataset, subselect, synth_dataset

    if cfg.data.path:
        ds = load_dataset(cfg.data.path)
        if cfg.data.size > len(ds.images):
            raise DataError("dataset smaller than requested sub-selection", have=len(ds.images), want=cfg.data.size)
        return subselect(ds, cfg.data.size, seed)
    return synth_dataset(cfg.data.size, seed, cfg.data.synth_kind)


def _ae_config(cfg):
    from lqgan.nets import AeConfig

    a = cfg.ae
    return AeConfig(a.height, a.width, a.channels, tuple(a.conv_channels), a.fc_width, a.d_z, a.dropout, a.batchnorm,
                    a.kernel, a.stride, a.padding)


def _load_ae(ae_dir: str | Path):
    from lqgan.autodiff import load_checkpoint
    from lqgan.config import load_config
    from lqgan.nets import Autoencoder
    from lqgan.rng import stream

    ae_dir = Path(ae_dir)
    cfg = load_config(ae_dir / "config.json", env={})
    ae = Autoencoder(_ae_config(cfg), stream(cfg.seed, "init/ae"))
    ae.load_blocks(load_checkpoint(ae_dir / "ae.lqg"), "ae.")
    ae.eval()
    return ae, cfg


def _extractor(cfg, ae=None):
    from lqgan.metrics import make_extractor

    m = cfg.metrics
    return make_extractor(m.extractor, ae=ae, dim=m.projection_dim, seed=m.projection_seed)


def cmd_train_ae(args) -> int:
    from lqgan.autodiff import save_checkpoint
    from lqgan.config import load_config
    from lqgan.metrics import rfid
    from lqgan.nets import AeHyper, Autoencoder, train_ae
    from lqgan.rng import stream

    cfg = load_config(args.config, {"data.path": args.data, "ae.epochs": args.epochs, "seed": args.seed})
    out = _run_dir(args.out)
    (out / "config.json").write_text(cfg.to_json())
    ds = _load_images(cfg, cfg.seed)
    train_ds, val_ds = ds.split(cfg.data.val_fraction)
    ae = Autoencoder(_ae_config(cfg), stream(cfg.seed, "init/ae"), dropout_rng=stream(cfg.seed, "ae/dropout"))
    a = cfg.ae
    hyper = AeHyper(a.epochs, a.lr, a.beta1, a.beta2, a.weight_decay, a.batch)
    extractor = _extractor(cfg) if cfg.metrics.extractor != "ae-encoder" else _extractor(cfg.model_copy(
        update={"metrics": cfg.metrics.model_copy(update={"extractor": "random-projection"})}))
    rows = []

    def on_epoch(epoch, hist):
        rows.append([epoch, hist.train_mse[-1], hist.val_mse[-1] if hist.val_mse else "",
                     hist.rfid[-1] if hist.rfid else ""])
        log.info("epoch %d train_mse %.6g", epoch, hist.train_mse[-1])

    val = val_ds.images if len(val_ds.images) else None
    hist = train_ae(ae, train_ds.images, hyper, cfg.seed, val,
                    lambda m, x: rfid(m.reconstruct_array, x, extractor).value, on_epoch)
    save_checkpoint(out / "ae.lqg", ae.state_blocks("ae."))
    with open(out / "history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_mse", "val_mse", "rfid"])
        w.writerows(rows)
    (out / "subset.json").write_text(json.dumps({"seed": cfg.seed, "source": ds.source,
                                                 "indices": None if ds.indices is None else [int(i) for i in ds.indices]}))
    _emit({"out": str(out), "epochs": len(hist.train_mse), "final_train_mse": hist.train_mse[-1] if hist.train_mse else None,
           "final_val_mse": hist.val_mse[-1] if hist.val_mse else None, "final_rfid": hist.rfid[-1] if hist.rfid else None})
    return 0


# ---------------------------------------------------------------------------
# GAN commands


def build_models(cfg):
    from lqgan import gan, quantum
    from lqgan.rng import stream

    g = cfg.generator
    d_z = cfg.ae.d_z
    if g.kind == "quantum":
        spec = quantum.CircuitSpec(g.qubits, g.layers)
        if spec.latent_dim != d_z:
            raise ConfigError("quantum latent size 2*qubits must equal d_z", qubits=g.qubits, d_z=d_z)
        generator = gan.QuantumGenerator(spec, stream(cfg.seed, "init/qgen"), g.init_scale)
    else:
        generator = gan.ClassicalGenerator(g.hidden, stream(cfg.seed, "init/cgen"), g.d_noise, d_z, g.hidden_activation)
    c = cfg.critic
    critic = gan.Critic(c.hidden, stream(cfg.seed, "init/critic"), d_z, c.hidden_activation, c.leaky_slope)
    return generator, critic


def train_config(cfg):
    from lqgan.gan import GanTrainConfig

    return GanTrainConfig(generator=cfg.generator.kind, seed=cfg.seed, **cfg.gan.model_dump())


def prepare_real(cfg, ae_dir: str | None):
    """Real latents, evaluator and (optional) autoencoder for a GAN run."""
    from lqgan import gan

    if ae_dir is None:
        t = cfg.toy
        d_z = cfg.ae.d_z
        real = gan.latent_mixture(t.size, cfg.seed, d_z, t.components, t.spread, t.radius, t.target_seed)
        ref = gan.latent_mixture(cfg.gan.eval_cohort, cfg.seed + 1_000_003, d_z, t.components, t.spread, t.radius,
                                 t.target_seed)
        return real, gan.Evaluator(ref, bins=cfg.metrics.bins), None
    ae, ae_cfg = _load_ae(ae_dir)
    if ae_cfg.seed != cfg.seed:
        raise ConfigError("autoencoder was trained for a different seed", ae_seed=ae_cfg.seed, seed=cfg.seed)
    ds = _load_images(ae_cfg, cfg.seed)
    train_ds, val_ds = ds.split(ae_cfg.data.val_fraction)
    real = ae.encode_array(train_ds.images)
    ref_images = ds.images
    evaluator = gan.Evaluator(ae.encode_array(ref_images), ae.decode_array, ref_images, _extractor(cfg, ae),
                              cfg.metrics.bins)
    return real, evaluator, ae


def cmd_train_gan(args) -> int:
    from lqgan import gan
    from lqgan.config import load_config

    overrides = {
        "seed": args.seed,
        "generator.kind": args.gen,
        "generator.layers": args.layers,
        "generator.qubits": args.qubits,
        "generator.hidden": _sizes(args.gen_hidden) if args.gen_hidden else None,
        "critic.hidden": _sizes(args.critic) if args.critic else None,
        "gan.max_steps": args.steps,
        "gan.batch": args.batch,
        "gan.eval_interval": args.eval_interval,
        "gan.eval_cohort": args.eval_cohort,
    }
    cfg = load_config(args.config, overrides)
    out = _run_dir(args.out)
    cfg_text = cfg.to_json()
    cfg_path = out / "config.json"
    if cfg_path.exists() and args.resume and json.loads(cfg_path.read_text()) != json.loads(cfg_text):
        raise ConfigError("run directory holds a different config; use a new --out or --no-resume", out=str(out))
    # validate models and data before anything lands in the run directory
    generator, critic = build_models(cfg)
    real, evaluator, _ = prepare_real(cfg, args.ae)
    cfg_path.write_text(cfg_text)
    if args.ae:
        (out / "ae_dir.txt").write_text(str(Path(args.ae).resolve()))

    def on_eval(e):
        log.info("step %d fid %.6g jsd_feat %.4g", e["step"], e["fid"], e["jsd_feat"])

    res = gan.train(train_config(cfg), generator, critic, real, evaluator, out, resume=args.resume, on_eval=on_eval)
    summary = {"out": str(out), "steps": res.last_step, "critic_updates": res.critic_updates,
               "generator_updates": res.generator_updates, "stopped_early": res.stopped_early, "verdict": res.verdict,
               "last_eval": res.evals[-1] if res.evals else None}
    if res.verdict is not None:
        (out / "verdict.json").write_text(json.dumps(res.verdict, indent=2, sort_keys=True))
    _emit(summary)
    return 0


def cmd_sample(args) -> int:
    from lqgan import gan
    from lqgan.autodiff import load_checkpoint
    from lqgan.config import load_config
    from lqgan.data import save_dataset
    from lqgan.rng import stream

    run = Path(args.run)
    if not (run / "checkpoint.lqg").exists():
        raise DataError("run has no checkpoint", run=str(run))
    cfg = load_config(run / "config.json", env={})
    generator, _ = build_models(cfg)
    generator.load_blocks(load_checkpoint(run / "checkpoint.lqg"))
    xi = stream(args.seed if args.seed is not None else cfg.seed, "sample/noise").standard_normal((args.n, generator.noise_dim))
    z = generator.generate(xi)
    result = {"n": args.n}
    ae_dir = args.ae or ((run / "ae_dir.txt").read_text().strip() if (run / "ae_dir.txt").exists() else None)
    if args.latents:
        np.save(args.latents, z)
        result["latents"] = args.latents
    if ae_dir is None:
        if args.out or args.png:
            raise ConfigError("decoding images needs an autoencoder (--ae)")
        _emit(result)
        return 0
    ae, _ = _load_ae(ae_dir)
    images = ae.decode_array(z)
    if args.out:
        save_dataset(args.out, images)
        result["out"] = args.out
    if args.png:
        write_png(args.png, image_grid(images[: args.grid]))
        result["png"] = args.png
    _emit(result)
    return 0


def cmd_metrics(args) -> int:
    from lqgan.data import load_dataset
    from lqgan.metrics import fid, jsd, make_extractor

    real = load_dataset(args.real).images
    fake = load_dataset(args.fake).images
    ae = _load_ae(args.ae)[0] if args.ae else None
    kind = args.extractor or ("ae-encoder" if ae is not None else "random-projection")
    extractor = make_extractor(kind, ae=ae, dim=args.dim, seed=args.projection_seed)
    res = fid(real, fake, extractor)
    jsd_feat = jsd(ae.encode_array(real), ae.encode_array(fake), "feature", args.bins) if ae is not None else None
    _emit({"fid": res.value, "jsd_raw": jsd(real, fake, "raw", args.bins), "jsd_feat": jsd_feat,
           "n_real": res.n_real, "n_fake": res.n_fake, "under_sampled": res.under_sampled, "extractor": kind,
           "bins": args.bins})
    return 0


# ---------------------------------------------------------------------------
# Experiment commands


def cmd_sweep(args) -> int:
    from lqgan.experiments import SweepPlan, run_sweep

    if args.plan:
        try:
            plan = SweepPlan.from_dict(json.loads(Path(args.plan).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError("cannot read sweep plan", path=args.plan, detail=str(exc)) from None
    else:
        plan = {"desk": SweepPlan.desk, "full-quantum": SweepPlan.full_quantum}[args.preset]()
    seed = _env_seed(args.seed_override, None)
    if seed is not None:
        plan.seeds = [seed]
    summary = run_sweep(plan, args.out, workers=args.workers, budget=args.budget)
    _emit(summary)
    return 0


def cmd_fit_scaling(args) -> int:
    from lqgan.errors import NoOptimumError
    from lqgan.experiments import fit_from_sweep

    try:
        summary = fit_from_sweep(args.sweep, args.tau_min)
    except DataError as exc:
        failures = exc.context.get("failures") or []
        if failures and all(f["error"].get("error") == "no_optimum" for f in failures):
            raise NoOptimumError("no optimum in grid for any generator capacity", failures=failures) from None
        raise
    _emit(summary)
    return 0


def cmd_verdict(args) -> int:
    from lqgan.experiments import detect_optimality
    from lqgan.gan import read_evals

    run = Path(args.run)
    path = run / "evals.csv"
    if not path.exists():
        raise DataError("run has no evals.csv", run=str(run))
    evals = read_evals(path)
    v = detect_optimality([e["fid"] for e in evals], [e["step"] for e in evals], args.window, args.tau_sigma,
                          args.tau_min, args.burn_in).to_dict()
    (run / "verdict.json").write_text(json.dumps(v, indent=2, sort_keys=True))
    _emit(v)
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lqgan", description="Latent style-based quantum GAN toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write a synthetic image dataset")
    s.add_argument("--kind", default="gaussian-blobs", choices=["gaussian-blobs", "striped-fields"])
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, help="default: LQG_SEED, else 42")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("convert", help="convert a .npy/.npz image tensor to the dataset format")
    s.add_argument("--input", required=True)
    s.add_argument("--key", help="array name inside an .npz file")
    s.add_argument("--layout", default="nhwc", choices=["nhwc", "nchw"])
    s.add_argument("--drop-channels", type=int, default=0, help="drop this many trailing channels (e.g. 1 for NIR)")
    s.add_argument("--scale", type=float, help="divide pixels by this value (default: 255 for integer input)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_convert)

    s = sub.add_parser("train-ae", help="train the autoencoder for one seed")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset file; synthetic data is used when omitted")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_ae)

    s = sub.add_parser("train-gan", help="train a GAN in latent space")
    s.add_argument("--config")
    s.add_argument("--gen", choices=["quantum", "classical"])
    s.add_argument("--layers", type=int)
    s.add_argument("--qubits", type=int)
    s.add_argument("--gen-hidden", help="classical generator sizes, e.g. 50,25")
    s.add_argument("--critic", help="critic sizes, e.g. 125,62")
    s.add_argument("--ae", help="trained autoencoder directory; without it the synthetic latent target is used")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--eval-interval", type=int)
    s.add_argument("--eval-cohort", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-resume", dest="resume", action="store_false")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_gan)

    s = sub.add_parser("sample", help="draw latents from a trained generator and decode them")
    s.add_argument("--run", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--ae")
    s.add_argument("--out", help="decoded images in the dataset format")
    s.add_argument("--png", help="image grid as PNG")
    s.add_argument("--grid", type=int, default=64, help="images in the PNG grid")
    s.add_argument("--latents", help="save raw latents as .npy")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("metrics", help="FID and JSD between two datasets")
    s.add_argument("--real", required=True)
    s.add_argument("--fake", required=True)
    s.add_argument("--ae", help="autoencoder directory for encoder features and feature JSD")
    s.add_argument("--extractor", choices=["pixel", "random-projection", "ae-encoder"])
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--projection-seed", type=int, default=0)
    s.add_argument("--bins", type=int, default=64)
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("sweep", help="run a capacity sweep")
    s.add_argument("--plan", help="sweep plan JSON")
    s.add_argument("--preset", default="desk", choices=["desk", "full-quantum"])
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--budget", type=int, help="start at most this many new runs")
    s.add_argument("--seed", dest="seed_override", type=int)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("fit-scaling", help="select optimal capacities and fit the exponential law")
    s.add_argument("--sweep", required=True)
    s.add_argument("--tau-min", type=float, default=0.10)
    s.set_defaults(fn=cmd_fit_scaling)

    s = sub.add_parser("verdict", help="re-run the optimality rule on a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--window", type=int, default=20)
    s.add_argument("--tau-sigma", type=float, default=0.05)
    s.add_argument("--tau-min", type=float, default=0.10)
    s.add_argument("--burn-in", type=int, default=2000)
    s.set_defaults(fn=cmd_verdict)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return args.fn(args)
    except LqgError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return exc.exit_code
    except (KeyboardInterrupt, BrokenPipeError):
        return 130
    except Exception as exc:  # unexpected: still machine-readable
        print(json.dumps({"error": "internal", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
