"""Command-line entry point: ``sasforge <command> [options]``.

Every option can also come from an INI file given with ``--config``; keys
in a ``[common]`` section apply to all commands and keys in a section named
after the command override them. A flag on the command line beats both.
Effective values are echoed to ``run-config.<command>.json`` in the output
directory.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .datasets import render_dataset
from .errors import ConfigError, DataError, ParameterError, SasforgeError
from .evaluation import feature_stats, fid, nearest_neighbors, tsne, write_nn_csv, write_points_csv
from .io import (
    DegradeConfig,
    degrade_stack,
    echo_run_config,
    ensure_dir,
    load_image_dir,
    load_model,
    read_manifest,
    read_pgm,
    save_model,
    write_manifest,
    write_pgm,
)
from .models import ae_encode, baseline_generate, generator_forward
from .train import GP_MODES, LIPSCHITZ_MODES, TrainConfig, reconstruction_mse, train_autoencoder, train_dcgan, train_sasgan

# per command: dest -> (argparse action, default); argparse itself always defaults to None
_SPECS: dict[str, dict[str, tuple]] = {}


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _add(p: argparse.ArgumentParser, cmd: str, flag: str, default=None, type=str, **kw) -> None:
    action = p.add_argument(flag, default=None, type=type, **kw)
    _SPECS[cmd][action.dest] = (action, default)


def _train_options(p, cmd: str, iterations: int) -> None:
    _add(p, cmd, "--iterations", iterations, int, help=f"generator steps (default {iterations})")
    _add(p, cmd, "--lr", 1e-3, float, help="Adam learning rate (default 0.001)")
    _add(p, cmd, "--batch-size", 4, int, help="minibatch size (default 4)")
    _add(p, cmd, "--seed", 0, _seed, help="master seed")


def _gan_options(p, cmd: str) -> None:
    _add(p, cmd, "--lambda-gp", 10.0, float, help="gradient-penalty weight (default 10)")
    _add(p, cmd, "--n-critic", 5, int, help="critic steps per generator step (default 5)")
    _add(p, cmd, "--gp-mode", "generated", str, choices=GP_MODES, help="where the penalty is evaluated")
    _add(p, cmd, "--lipschitz-mode", "gradient-penalty", str, choices=LIPSCHITZ_MODES)
    _add(p, cmd, "--clip-value", 0.01, float, help="weight-clipping bound c")
    _add(p, cmd, "--checkpoint-every", 0, int, help="save generator and critic every k iterations (0: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sasforge", description="Render sonar-like chips and refine them with a GAN.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        _SPECS[name] = {}
        p.add_argument("--config", type=Path, help="INI file with [common] and [%s] sections" % name)
        return p

    p = command("render-dataset", "render chips with random target poses plus a manifest")
    _add(p, "render-dataset", "--out", help="output directory")
    _add(p, "render-dataset", "--count", 10, int, help="number of chips (default 10)")
    _add(p, "render-dataset", "--seed", 0, _seed, help="master seed")
    _add(p, "render-dataset", "--size", 64, int, choices=(64, 256), help="image side in pixels")
    _add(p, "render-dataset", "--role", "render", help="role tag written to the manifest")
    _add(p, "render-dataset", "--threads", None, int, help="render threads (default $SASFORGE_THREADS or 1)")
    _add(p, "render-dataset", "--bits", 8, int, choices=(8, 16), help="PGM depth")

    p = command("make-pseudoreal", "apply speckle, blur and contrast to a directory of renders")
    _add(p, "make-pseudoreal", "--in", dest="input", help="input directory of PGMs")
    _add(p, "make-pseudoreal", "--out", help="output directory")
    _add(p, "make-pseudoreal", "--seed", 0, _seed, help="noise seed")
    _add(p, "make-pseudoreal", "--looks", 2, int, help="speckle looks L (default 2)")
    _add(p, "make-pseudoreal", "--blur-along", 1.0, float, help="along-track (row) blur sigma in px")
    _add(p, "make-pseudoreal", "--blur-across", 0.5, float, help="across-track (column) blur sigma in px")
    _add(p, "make-pseudoreal", "--gamma", 0.8, float, help="contrast exponent")

    p = command("train-ae", "train the feature autoencoder on pseudo-real images")
    _add(p, "train-ae", "--data", help="directory of training PGMs")
    _add(p, "train-ae", "--out", help="output directory")
    _train_options(p, "train-ae", 2000)

    p = command("train-gan", "train the render refiner against pseudo-real images")
    _add(p, "train-gan", "--renders", help="directory of rendered PGMs")
    _add(p, "train-gan", "--reals", help="directory of pseudo-real PGMs")
    _add(p, "train-gan", "--checkpoint", help="trained autoencoder checkpoint")
    _add(p, "train-gan", "--out", help="output directory")
    _train_options(p, "train-gan", 3000)
    _gan_options(p, "train-gan")
    _add(p, "train-gan", "--mu-phi", TrainConfig.mu_phi, float, help="feature-preservation weight")
    _add(p, "train-gan", "--gamma", 1.0, float, help="feature-distance threshold that is reported")

    p = command("train-dcgan", "train the unconditional latent-to-image baseline")
    _add(p, "train-dcgan", "--reals", help="directory of pseudo-real PGMs")
    _add(p, "train-dcgan", "--out", help="output directory")
    _train_options(p, "train-dcgan", 3000)
    _gan_options(p, "train-dcgan")

    p = command("generate", "refine renders with a generator, or sample the baseline")
    _add(p, "generate", "--checkpoint", help="generator or baseline checkpoint")
    _add(p, "generate", "--in", dest="input", help="render PGM or directory (refiner only)")
    _add(p, "generate", "--out", help="output directory")
    _add(p, "generate", "--count", 10, int, help="baseline samples (default 10)")
    _add(p, "generate", "--seed", 0, _seed, help="latent seed for the baseline")

    p = command("eval-fid", "Frechet distance between two image sets in autoencoder feature space")
    _add(p, "eval-fid", "--a", help="first image directory")
    _add(p, "eval-fid", "--b", help="second image directory")
    _add(p, "eval-fid", "--checkpoint", help="autoencoder checkpoint")
    _add(p, "eval-fid", "--out", help="directory for fid.csv (optional)")

    p = command("eval-nn", "nearest training images for each query")
    _add(p, "eval-nn", "--query", help="query PGM or directory")
    _add(p, "eval-nn", "--dataset", help="directory searched for neighbours")
    _add(p, "eval-nn", "--metric", "l2", str, choices=("l2", "phi"), help="image l2 or feature distance")
    _add(p, "eval-nn", "--k", 5, int, help="neighbours per query (default 5)")
    _add(p, "eval-nn", "--checkpoint", help="autoencoder checkpoint (metric phi)")
    _add(p, "eval-nn", "--out", help="output directory for nn.csv")

    p = command("eval-tsne", "2-D t-SNE embedding of autoencoder features")
    _add(p, "eval-tsne", "--sets", nargs="+", type=Path, help="image directories; the name is the label")
    _add(p, "eval-tsne", "--checkpoint", help="autoencoder checkpoint")
    _add(p, "eval-tsne", "--out", help="output directory for tsne.csv")
    _add(p, "eval-tsne", "--perplexity", 30.0, float)
    _add(p, "eval-tsne", "--iterations", 1000, int)
    _add(p, "eval-tsne", "--seed", 0, _seed)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge command line, config file and built-in defaults (in that order of precedence)."""
    specs = _SPECS[args.command]
    from_file: dict[str, str] = {}
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"--config {args.config}: file not found")
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            cp.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"--config {args.config}: {exc}") from exc
        for section in ("common", args.command):
            if not cp.has_section(section):
                continue
            for key, raw in cp.items(section):
                dest = "input" if key == "in" else key.replace("-", "_")
                if dest in specs:
                    from_file[dest] = raw
                elif section == args.command:
                    # [common] may hold keys meant for other commands
                    raise ConfigError(f"--config {args.config}: unknown key '{key}' in [{section}]")
    values = {}
    for dest, (action, default) in specs.items():
        cli_value = getattr(args, dest)
        if cli_value is not None:
            values[dest] = cli_value
        elif dest in from_file:
            raw = from_file[dest]
            try:
                parsed = [action.type(t) for t in raw.split()] if action.nargs == "+" else action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"--config: bad value for {dest}: {raw!r}") from exc
            if action.choices is not None and parsed not in action.choices:
                raise ConfigError(f"--config: {dest} must be one of {list(action.choices)}, got {raw!r}")
            values[dest] = parsed
        else:
            values[dest] = default
    return values


def _need(values: dict, dest: str, what: str):
    if values.get(dest) is None:
        raise ConfigError(f"--{dest.replace('_', '-') if dest != 'input' else 'in'} is required ({what})")
    return values[dest]


def _checkpoint(values: dict, kind: str | None, what: str):
    path = Path(_need(values, "checkpoint", what))
    if not path.is_file():
        raise ConfigError(f"--checkpoint {path}: file not found")
    return load_model(path, kind)


def _images_from(path) -> tuple[list[str], np.ndarray]:
    """A single PGM or every PGM of a directory."""
    path = Path(path)
    if path.is_file():
        return [path.name], read_pgm(path)[None]
    return load_image_dir(path)


def _train_config(values: dict, **extra) -> TrainConfig:
    cfg = TrainConfig(
        lr=values["lr"], batch_size=values["batch_size"], iterations=values["iterations"], seed=values["seed"], **extra
    )
    cfg.validate()
    return cfg


def _gan_config(values: dict, out: Path, **extra) -> TrainConfig:
    return _train_config(
        values,
        lambda_gp=values["lambda_gp"], n_critic=values["n_critic"], gp_mode=values["gp_mode"],
        lipschitz_mode=values["lipschitz_mode"], clip_value=values["clip_value"],
        checkpoint_every=values["checkpoint_every"], checkpoint_dir=str(out / "checkpoints"), **extra,
    )


# ------------------------------------------------------------------ commands


def cmd_render_dataset(v: dict) -> str:
    out = ensure_dir(_need(v, "out", "output directory"))
    if v["count"] < 0:
        raise ParameterError(f"--count must be >= 0, got {v['count']}")
    images, records = render_dataset(v["count"], v["seed"], v["size"], v["role"], v["threads"])
    for img, rec in zip(images, records):
        write_pgm(out / rec.file, img, v["bits"])
    write_manifest(out / "manifest.csv", records)
    return f"rendered {len(records)} images ({v['size']}x{v['size']}) to {out}"


def cmd_make_pseudoreal(v: dict) -> str:
    src = Path(_need(v, "input", "directory of renders"))
    out = ensure_dir(_need(v, "out", "output directory"))
    cfg = DegradeConfig(v["looks"], v["blur_along"], v["blur_across"], v["gamma"], v["seed"])
    cfg.validate()
    names, stack = load_image_dir(src)
    degraded = degrade_stack(stack, cfg)
    for name, img in zip(names, degraded):
        write_pgm(out / name, img)
    if (src / "manifest.csv").is_file():
        records = read_manifest(src / "manifest.csv", check_files=False)
        write_manifest(out / "manifest.csv", [dataclasses.replace(r, role="pseudo-real") for r in records])
    return f"degraded {len(names)} images from {src} to {out}"


def cmd_train_ae(v: dict) -> str:
    _, stack = load_image_dir(_need(v, "data", "training images"))
    out = ensure_dir(_need(v, "out", "output directory"))
    cfg = _train_config(v)
    res = train_autoencoder(stack, cfg, betas=(0.9, 0.999))
    save_model(out / "autoencoder.sfw", res.model)
    with open(out / "ae_loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([k, repr(loss)] for k, loss in enumerate(res.history))
    mse = reconstruction_mse(res.model, stack)
    baseline = float(np.mean((stack - stack.mean(axis=0)) ** 2))
    return f"autoencoder trained for {cfg.iterations} steps: mse {mse:.5f} (mean-image {baseline:.5f}) -> {out}"


def cmd_train_gan(v: dict) -> str:
    phi = _checkpoint(v, "autoencoder", "trained autoencoder")
    _, renders = load_image_dir(_need(v, "renders", "rendered images"))
    _, reals = load_image_dir(_need(v, "reals", "pseudo-real images"))
    out = ensure_dir(_need(v, "out", "output directory"))
    cfg = _gan_config(v, out, mu_phi=v["mu_phi"], gamma=v["gamma"])
    res = train_sasgan(renders, reals, phi, cfg, log_path=out / "metrics.csv")
    save_model(out / "generator.sfw", res.generator)
    save_model(out / "critic.sfw", res.critic)
    tail = res.metrics[-100:]
    norm = np.mean([r["mean_grad_norm"] for r in tail]) if tail else float("nan")
    return f"GAN trained for {cfg.iterations} iterations: mean critic grad norm {norm:.3f} -> {out}"


def cmd_train_dcgan(v: dict) -> str:
    _, reals = load_image_dir(_need(v, "reals", "pseudo-real images"))
    out = ensure_dir(_need(v, "out", "output directory"))
    cfg = _gan_config(v, out)
    res = train_dcgan(reals, cfg, log_path=out / "metrics.csv")
    save_model(out / "baseline.sfw", res.generator)
    save_model(out / "critic.sfw", res.critic)
    return f"baseline trained for {cfg.iterations} iterations -> {out}"


def cmd_generate(v: dict) -> str:
    model = _checkpoint(v, None, "generator or baseline")
    out = ensure_dir(_need(v, "out", "output directory"))
    if model.kind == "generator":
        names, renders = _images_from(_need(v, "input", "renders to refine"))
        for name, img in zip(names, generator_forward(model, renders)):
            write_pgm(out / name, img)
        return f"refined {len(names)} images -> {out}"
    if model.kind == "baseline":
        if v["count"] < 1:
            raise ParameterError(f"--count must be >= 1, got {v['count']}")
        z = model.sample_latent(v["count"], np.random.default_rng(v["seed"]))
        for k, img in enumerate(baseline_generate(model, z)):
            write_pgm(out / f"sample_{k:05d}.pgm", img)
        return f"sampled {v['count']} baseline images -> {out}"
    raise ConfigError(f"--checkpoint {v['checkpoint']}: a {model.kind} cannot generate images")


def cmd_eval_fid(v: dict) -> str:
    phi = _checkpoint(v, "autoencoder", "feature extractor")
    _, a = load_image_dir(_need(v, "a", "first image set"))
    _, b = load_image_dir(_need(v, "b", "second image set"))
    value = fid(feature_stats(a, phi), feature_stats(b, phi))
    if v["out"] is not None:
        out = ensure_dir(v["out"])
        with open(out / "fid.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set_a", "set_b", "n_a", "n_b", "fid"])
            w.writerow([v["a"], v["b"], len(a), len(b), repr(value)])
    return f"fid {value:.6f} ({len(a)} vs {len(b)} images)"


def cmd_eval_nn(v: dict) -> str:
    qnames, queries = _images_from(_need(v, "query", "query images"))
    dnames, data = load_image_dir(_need(v, "dataset", "images to search"))
    out = ensure_dir(_need(v, "out", "output directory"))
    phi = feats = None
    if v["metric"] == "phi":
        phi = _checkpoint(v, "autoencoder", "feature extractor for metric phi")
        feats = ae_encode(phi, data)
    results = [nearest_neighbors(q, data, v["k"], v["metric"], phi, feats) for q in queries]
    write_nn_csv(out / "nn.csv", results, qnames, dnames)
    nearest = min(res[0][1] for res in results)
    return f"{len(results)} queries, k={v['k']}, metric {v['metric']}: closest distance {nearest:.6g} -> {out / 'nn.csv'}"


def cmd_eval_tsne(v: dict) -> str:
    phi = _checkpoint(v, "autoencoder", "feature extractor")
    sets = _need(v, "sets", "image directories")
    out = ensure_dir(_need(v, "out", "output directory"))
    feats, labels = [], []
    for d in sets:
        _, stack = load_image_dir(d)
        feats.append(ae_encode(phi, stack))
        labels += [Path(d).name] * len(stack)
    points = tsne(np.concatenate(feats), v["perplexity"], v["iterations"], v["seed"])
    write_points_csv(out / "tsne.csv", points, labels)
    return f"embedded {len(labels)} images from {len(sets)} sets -> {out / 'tsne.csv'}"


COMMANDS = {
    "render-dataset": cmd_render_dataset,
    "make-pseudoreal": cmd_make_pseudoreal,
    "train-ae": cmd_train_ae,
    "train-gan": cmd_train_gan,
    "train-dcgan": cmd_train_dcgan,
    "generate": cmd_generate,
    "eval-fid": cmd_eval_fid,
    "eval-nn": cmd_eval_nn,
    "eval-tsne": cmd_eval_tsne,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        values = resolve(args)
        summary = COMMANDS[args.command](values)
        if values.get("out") is not None:
            echo_run_config(values["out"], args.command, {"config": args.config, **values})
    except SasforgeError as exc:
        print(f"sasforge {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sasforge {args.command}: error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return DataError.exit_code
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
