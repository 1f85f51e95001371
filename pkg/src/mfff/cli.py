"""Command-line interface: ``mfff train|sample|density|eval|diagnose``.

Run configurations are INI files::

    [manifold]
    kind = sphere
    n = 2

    [model]
    residual_blocks = 2
    inner_depth = 2
    inner_width = 64
    activation = silu
    init_scale = 0.01
    latent = uniform            ; uniform | vmf_mixture | wrapped_normal
    latent_sigma = 1.0          ; wrapped_normal only
    latent_components = 5       ; vmf_mixture fitted to the training split

    [decoder]                   ; optional, overrides [model] network keys
    inner_width = 128

    [train]
    batch_size = 256
    step_count = 20000
    learning_rate = 0.001
    schedule = exponential      ; exponential | one_cycle
    gamma = 1.0
    grad_clip_norm = 0
    weight_decay = 0
    seed = 0
    validation_every = 500
    validation_size = 2000
    beta_r_x = 10
    beta_u_z = 10

    [data]
    path = data.csv             ; or synthetic = {"kind": "vmf_mixture", ...}
    format = unit_vectors       ; angles | unit_vectors | rotmat9 | latlon_degrees | embedded
    synthetic_count = 20000
    split_seed = 0
    noise_sigma = 0

    [output]
    directory = runs/example    ; overridden by $MFFF_OUTPUT_DIR

Every run writes ``checkpoint.mfff``, ``metrics.csv``, ``test_points.csv``
and ``config.ini`` (the fully resolved configuration) into the output
directory.
"""
import argparse
import configparser
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import distributions, evalsuite, flow, geometry, nnet, serialization, trainer
from .exceptions import ConfigError, MfffError

OUTPUT_ENV = "MFFF_OUTPUT_DIR"
POINT_FORMATS = serialization.INGEST_FORMATS + ("embedded",)
NETWORK_KEYS = ("residual_blocks", "inner_depth", "inner_width", "activation", "init_scale", "residual")
WEIGHT_KEYS = tuple(f.name for f in fields(flow.LossWeights))


@dataclass
class DataConfig:
    path: str = ""
    format: str = "embedded"
    synthetic: str = ""
    synthetic_count: int = 20000
    split_seed: int = 0
    noise_sigma: float = 0.0


@dataclass
class RunConfig:
    manifold: dict
    encoder: nnet.NetworkSpec
    decoder: nnet.NetworkSpec
    latent: dict
    train: trainer.TrainConfig
    data: DataConfig
    output_dir: str
    source: str = field(default="", repr=False)

    def build_manifold(self):
        return geometry.manifold_from_description(self.manifold)

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["manifold"] = {k: str(v) for k, v in self.manifold.items()}
        model = {k: str(getattr(self.encoder, k)) for k in NETWORK_KEYS}
        model.update({k: str(v) for k, v in self.latent.items()})
        cp["model"] = model
        cp["decoder"] = {k: str(getattr(self.decoder, k)) for k in NETWORK_KEYS}
        t = self.train
        train = {k: repr(getattr(t, k)) if isinstance(getattr(t, k), float) else str(getattr(t, k))
                 for k in ("batch_size", "step_count", "learning_rate", "grad_clip_norm",
                           "weight_decay", "seed", "validation_every", "validation_size")}
        s = t.schedule
        train.update(schedule=s.kind, gamma=repr(s.gamma), warmup_fraction=repr(s.warmup_fraction),
                     peak_factor=repr(s.peak_factor), final_fraction=repr(s.final_fraction))
        train.update({k: repr(getattr(t.weights, k)) for k in WEIGHT_KEYS})
        cp["train"] = train
        d = self.data
        cp["data"] = {"path": d.path, "format": d.format, "synthetic": d.synthetic,
                      "synthetic_count": str(d.synthetic_count), "split_seed": str(d.split_seed),
                      "noise_sigma": repr(d.noise_sigma)}
        cp["output"] = {"directory": self.output_dir}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


class _Reader:
    """Typed access to a ConfigParser that collects every error."""

    def __init__(self, cp):
        self.cp = cp
        self.errors = []

    def get(self, section, key, kind, default=None, required=False):
        if not self.cp.has_option(section, key):
            if required:
                self.errors.append(f"[{section}] {key} is required")
            return default
        raw = self.cp.get(section, key).strip()
        try:
            if kind is bool:
                return self.cp.getboolean(section, key)
            if kind is int:
                return int(raw)
            if kind is float:
                value = float(raw)
                if not math.isfinite(value):
                    raise ValueError
                return value
            return raw
        except ValueError:
            self.errors.append(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}")
            return default


def parse_config(text, source="<string>"):
    """Parse and validate a run configuration; raises :class:`ConfigError` listing all problems."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([str(exc)]) from None
    rd = _Reader(cp)
    known = {"manifold", "model", "decoder", "train", "data", "output"}
    for section in cp.sections():
        if section not in known:
            rd.errors.append(f"unknown section [{section}]")

    manifold = {"kind": rd.get("manifold", "kind", str, required=True)}
    n = rd.get("manifold", "n", int)
    if n is not None:
        manifold["n"] = n
    eps = rd.get("manifold", "epsilon", float)
    if eps is not None:
        manifold["epsilon"] = eps
    tol = rd.get("manifold", "on_manifold_tol", float)
    if tol is not None:
        manifold["on_manifold_tol"] = tol
    man = None
    if manifold["kind"]:
        try:
            man = geometry.manifold_from_description(manifold)
            manifold = man.describe()
        except ValueError as exc:
            rd.errors.append(f"[manifold] {exc}")

    def network(section, base=None):
        vals = {}
        for key, kind, default in (("residual_blocks", int, 2), ("inner_depth", int, 2),
                                   ("inner_width", int, 64), ("activation", str, "silu"),
                                   ("init_scale", float, 1e-2), ("residual", bool, True)):
            fallback = getattr(base, key) if base is not None else default
            vals[key] = rd.get(section, key, kind, fallback)
        try:
            return nnet.NetworkSpec(man.m if man else 1, **vals)
        except ValueError as exc:
            rd.errors.append(f"[{section}] {exc}")
            return None

    encoder = network("model")
    decoder = network("decoder", encoder) if encoder else None

    latent = {"latent": rd.get("model", "latent", str, "uniform")}
    if latent["latent"] == "wrapped_normal":
        latent["latent_sigma"] = rd.get("model", "latent_sigma", float, 1.0)
        if not latent["latent_sigma"] > 0:
            rd.errors.append("[model] latent_sigma must be positive")
        if man is not None and not isinstance(man, geometry.PoincareBall):
            rd.errors.append("[model] wrapped_normal latent needs a poincare manifold")
    elif latent["latent"] == "vmf_mixture":
        latent["latent_components"] = rd.get("model", "latent_components", int, 1)
        if not latent["latent_components"] >= 1:
            rd.errors.append("[model] latent_components must be at least 1")
        if man is not None and not (isinstance(man, geometry.Sphere) and man.n == 2):
            rd.errors.append("[model] vmf_mixture latent needs the 2-sphere")
    elif latent["latent"] == "uniform":
        if man is not None and not math.isfinite(man.volume):
            rd.errors.append("[model] uniform latent needs a manifold of finite volume")
    else:
        rd.errors.append(f"[model] unknown latent {latent['latent']!r}")

    weights = {k: rd.get("train", k, float, 0.0) for k in WEIGHT_KEYS}
    try:
        weights = flow.LossWeights(**weights)
    except ValueError as exc:
        rd.errors.append(f"[train] {exc}")
        weights = flow.LossWeights()
    schedule = trainer.Schedule(
        rd.get("train", "schedule", str, "exponential"), rd.get("train", "gamma", float, 1.0),
        rd.get("train", "warmup_fraction", float, 0.3), rd.get("train", "peak_factor", float, 10.0),
        rd.get("train", "final_fraction", float, 1.0 / 25.0))
    train = trainer.TrainConfig(
        batch_size=rd.get("train", "batch_size", int, 256),
        step_count=rd.get("train", "step_count", int, 1000),
        learning_rate=rd.get("train", "learning_rate", float, 1e-3),
        schedule=schedule,
        grad_clip_norm=rd.get("train", "grad_clip_norm", float, 0.0),
        weight_decay=rd.get("train", "weight_decay", float, 0.0),
        data_noise_sigma=rd.get("data", "noise_sigma", float, 0.0),
        seed=rd.get("train", "seed", int, 0),
        validation_every=rd.get("train", "validation_every", int, 100),
        validation_size=rd.get("train", "validation_size", int, 2000),
        weights=weights)
    rd.errors.extend(f"[train] {e}" for e in train.validate())

    data = DataConfig(
        path=rd.get("data", "path", str, ""), format=rd.get("data", "format", str, "embedded"),
        synthetic=rd.get("data", "synthetic", str, ""),
        synthetic_count=rd.get("data", "synthetic_count", int, 20000),
        split_seed=rd.get("data", "split_seed", int, 0),
        noise_sigma=train.data_noise_sigma)
    if bool(data.path) == bool(data.synthetic):
        rd.errors.append("[data] exactly one of path or synthetic must be given")
    if data.format not in POINT_FORMATS:
        rd.errors.append(f"[data] unknown format {data.format!r}")
    if data.synthetic:
        try:
            spec = json.loads(data.synthetic)
            if man is not None:
                distributions.distribution_from_dict(spec, man)
        except (ValueError, TypeError, KeyError) as exc:
            rd.errors.append(f"[data] invalid synthetic distribution: {exc}")
    if data.synthetic_count < 10:
        rd.errors.append("[data] synthetic_count must be at least 10")

    output_dir = rd.get("output", "directory", str, "")
    if os.environ.get(OUTPUT_ENV):
        output_dir = os.environ[OUTPUT_ENV]
    if not output_dir:
        rd.errors.append(f"[output] directory is required (or set ${OUTPUT_ENV})")

    if rd.errors:
        raise ConfigError(rd.errors)
    return RunConfig(manifold, encoder, decoder, latent, train, data, output_dir, source)


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    cfg = parse_config(text, source=str(path))
    if cfg.data.path and not os.path.isabs(cfg.data.path):
        cfg.data.path = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)),
                                                      cfg.data.path))
    return cfg


def ingest_dataset(path, fmt, manifold):
    """Read points from CSV; ``embedded`` picks the natural format of ``manifold``."""
    if fmt == "embedded":
        if isinstance(manifold, geometry.SpecialOrthogonal3):
            fmt = "rotmat9"
        elif isinstance(manifold, geometry.PoincareBall):
            raw = serialization.read_numeric_csv(path, columns=manifold.m)
            dist = manifold.distance_to_manifold(raw)
            bad = np.flatnonzero(~(dist <= manifold.on_manifold_tol))
            if len(bad):
                raise serialization.OffManifoldRow(int(bad[0]), float(dist[bad[0]]))
            return raw
        else:
            fmt = "unit_vectors"
    return serialization.ingest_dataset(path, fmt, manifold)


def load_run_data(cfg, manifold):
    """Full dataset of a run and its seeded 80/10/10 split."""
    rng = np.random.default_rng(cfg.data.split_seed)
    if cfg.data.synthetic:
        dist = distributions.distribution_from_dict(json.loads(cfg.data.synthetic), manifold)
        points = dist.sample(cfg.data.synthetic_count, rng)
    else:
        points = ingest_dataset(cfg.data.path, cfg.data.format, manifold)
    return trainer.split_dataset(points, rng)


def build_latent(cfg, manifold, train_points, rng):
    kind = cfg.latent["latent"]
    if kind == "uniform":
        return distributions.UniformManifold(manifold)
    if kind == "wrapped_normal":
        return distributions.WrappedNormal(manifold, cfg.latent["latent_sigma"])
    return distributions.fit_vmf_mixture(train_points, cfg.latent["latent_components"], rng)


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = load_config(args.config)
    man = cfg.build_manifold()
    train_pts, val_pts, test_pts = load_run_data(cfg, man)
    rng = np.random.default_rng(cfg.train.seed)
    latent = build_latent(cfg, man, train_pts, rng)
    model = flow.FlowModel(man, nnet.init_near_identity(cfg.encoder, rng),
                           nnet.init_near_identity(cfg.decoder, rng), latent)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    echo = cfg.to_ini()
    serialization.atomic_write_text(os.path.join(out, "config.ini"), echo)
    extra = {"config_hash": config_hash(echo), "seed": cfg.train.seed,
             "loss_weights": cfg.train.weights.to_dict()}
    ckpt = os.path.join(out, "checkpoint.mfff")

    def save(best, step):
        serialization.save_checkpoint(ckpt, best, dict(extra, step=step))

    def progress(row):
        if not args.quiet:
            print(f"step {row['step']:>7d}  lr {row['lr']:.3g}  total {row['total']:.5f}  "
                  f"val_nll {row['val_nll']:.5f}  val_recon {row['val_recon']:.3g}", file=sys.stderr)

    try:
        result = trainer.train(model, train_pts, cfg.train, validation=val_pts,
                               on_checkpoint=save, progress=progress)
        metrics = result.metrics
    except MfffError as exc:
        metrics = getattr(exc, "metrics", [])
        _write_metrics(out, metrics)
        raise
    _write_metrics(out, metrics)
    serialization.write_points(os.path.join(out, "test_points.csv"), test_pts)
    print(json.dumps({"best_step": result.best_step, "val_nll": metrics[-1]["val_nll"],
                      "checkpoint": ckpt, "config_hash": extra["config_hash"]}))
    return 0


def _write_metrics(out, metrics):
    serialization.write_csv(os.path.join(out, "metrics.csv"), trainer.METRIC_FIELDS,
                            trainer.metrics_rows(metrics))


def cmd_sample(args):
    model, _ = serialization.load_checkpoint(args.ckpt)
    if args.count < 1:
        raise ValueError("--count must be positive")
    points = flow.sample(model, args.count, np.random.default_rng(args.seed))
    serialization.write_points(args.out, points)
    return 0


def cmd_density(args):
    model, _ = serialization.load_checkpoint(args.ckpt)
    man = model.manifold
    if args.points:
        pts = ingest_dataset(args.points, args.format, man)
    else:
        pts = evalsuite.grid_for(man, args.grid, np.random.default_rng(args.seed)).nodes
    logp = flow.exact_log_density(model, pts, args.direction, on_singular="nan")
    serialization.write_points(args.out, pts, logp)
    return 0


def cmd_eval(args):
    model, extra = serialization.load_checkpoint(args.ckpt)
    man = model.manifold
    test = ingest_dataset(args.test, args.format, man)
    rng = np.random.default_rng(args.seed)
    res = evalsuite.test_nll(model, test, args.refine_sigma, args.refine_tries, args.runs, rng)
    recon_x, recon_z = flow.reconstruction_losses(model, test)
    count = min(len(test), evalsuite.MAX_W2_POINTS)
    subset = test[rng.permutation(len(test))[:count]]
    w2 = evalsuite.wasserstein2(flow.sample(model, count, rng), subset, man)
    common = {"seed": args.seed, "config_hash": extra.get("config_hash", "")}
    lines = [
        {"metric": "nll", "value": res.mean, "std": res.std, "runs": res.runs,
         "evaluated": res.evaluated, "excluded": res.excluded,
         "refine_sigma": args.refine_sigma, "refine_tries": args.refine_tries, **common},
        {"metric": "recon_x", "value": recon_x, **common},
        {"metric": "recon_z", "value": recon_z, **common},
        {"metric": "w2", "value": w2, "points": count, **common},
    ]
    serialization.atomic_write_text(args.out, "".join(json.dumps(l) + "\n" for l in lines))
    return 0


def cmd_diagnose(args):
    rng = np.random.default_rng(args.seed)
    if args.ckpt:
        model, _ = serialization.load_checkpoint(args.ckpt)
    else:
        man = geometry.make_manifold(args.manifold, args.n)
        spec = nnet.NetworkSpec(man.m, residual_blocks=1, inner_depth=1, inner_width=args.width,
                                activation="tanh", init_scale=args.init_scale)
        latent = (distributions.WrappedNormal(man, 1.0) if isinstance(man, geometry.PoincareBall)
                  else distributions.UniformManifold(man))
        model = flow.FlowModel.initialize(man, latent, rng, spec)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = evalsuite.estimator_statistics(draws=args.draws, seed=args.seed)
    serialization.write_csv(os.path.join(args.out_dir, "estimator_statistics.csv"),
                            evalsuite.STATISTICS_HEADER, rows)
    x = model.latent.sample(args.points, rng) if not math.isfinite(model.manifold.volume) \
        else model.manifold.sample_uniform(args.points, rng)
    lhs, rhs = flow.estimator_error_bound(model, x)
    bound_rows = [[float(i), a, b, "true" if a <= b else "false"]
                  for i, (a, b) in enumerate(zip(lhs, rhs))]
    serialization.write_csv(os.path.join(args.out_dir, "error_bound.csv"),
                            ("point", "lhs", "rhs", "holds"), bound_rows)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mfff", description="Free-form flows on embedded manifolds.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from an INI configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("density", help="evaluate log-densities at points or on a grid")
    d.add_argument("--ckpt", required=True)
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--points")
    src.add_argument("--grid", type=int, metavar="RESOLUTION")
    d.add_argument("--format", default="embedded", choices=POINT_FORMATS)
    d.add_argument("--direction", default="decoder", choices=("decoder", "encoder"))
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_density)

    e = sub.add_parser("eval", help="test NLL, reconstruction and W2 on held-out points")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--format", default="embedded", choices=POINT_FORMATS)
    e.add_argument("--refine-sigma", type=float, default=0.0)
    e.add_argument("--refine-tries", type=int, default=64)
    e.add_argument("--runs", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("diagnose", help="estimator statistics and gradient error bound")
    g.add_argument("--ckpt")
    g.add_argument("--manifold", default="sphere")
    g.add_argument("--n", type=int, default=2)
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--init-scale", type=float, default=0.1)
    g.add_argument("--points", type=int, default=100)
    g.add_argument("--draws", type=int, default=1_000_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MfffError, ValueError, OSError, KeyError) as exc:
        print(f"mfff {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
