"""Command-line entry point: gen-data, train, eval, tune-beta, sweep, plot, rerun.

Every artifact-producing command writes ``<output>.manifest.ini`` holding the
fully resolved config, the seed and SHA-256 hashes of inputs and outputs.
``actdiff rerun MANIFEST`` replays the command from that file alone.

Set ``ACTDIFF_NUM_THREADS`` to cap BLAS/OpenMP threads.
"""

from __future__ import annotations

import os

_threads = os.environ.get("ACTDIFF_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import hashlib  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from . import bench, config  # noqa: E402
from .core import dataset_read, dataset_write  # noqa: E402
from .errors import ActDiffError, InvalidConfigError  # noqa: E402
from .expert import build_dataset  # noqa: E402
from .train import load_checkpoint, save_checkpoint, train  # noqa: E402

log = logging.getLogger("actdiff")

COMMANDS = ("gen-data", "train", "eval", "tune-beta", "sweep", "plot")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def manifest_path(out):
    return Path(str(out) + ".manifest.ini")


def _split_spec(spec):
    """``ENV:PRESET=PATH`` -> (key, path); plain paths map to (None, path)."""
    if "=" in spec:
        key, path = spec.split("=", 1)
        return key, path
    return None, spec


def _resolve(value):
    if isinstance(value, list):
        return ";".join(f"{k}={Path(p).resolve()}" for k, p in map(_split_spec, value))
    return str(Path(value).resolve())


def write_manifest(command, cfg, io, outputs, seed):
    """``io`` maps role -> path (inputs and outputs); ``outputs`` lists produced files."""
    run = {"command": command, "seed": str(seed)}
    run.update({k: _resolve(v) for k, v in io.items()})
    inputs = {}
    for k, v in io.items():
        if k.startswith("out"):
            continue
        for spec in (v if isinstance(v, list) else [v]):
            path = _split_spec(spec)[1] if isinstance(v, list) else spec
            if Path(path).is_file():
                inputs[str(Path(path).resolve())] = sha256(path)
    extra = {"run": run, "inputs": inputs,
             "outputs": {str(Path(p).resolve()): sha256(p) for p in outputs}}
    path = manifest_path(io["out"])
    path.write_text(config.dumps(cfg, extra))
    return path


# -- commands ---------------------------------------------------------------

def cmd_gen_data(cfg, io):
    env_cfg = config.env_config(cfg)
    ds = build_dataset(cfg["data"]["n"], env_cfg, config.preset(cfg), cfg["data"]["seed"])
    dataset_write(ds, io["out"])
    log.info("wrote %d trajectories to %s", len(ds), io["out"])
    return [io["out"]], cfg["data"]["seed"]


def cmd_train(cfg, io):
    ds = dataset_read(io["data"])
    policy = config.policy_config(cfg, ds.obs_dim, ds.action_dim)

    def progress(step, loss, ev):
        log.info("step %d  train %.4f  eval %.4f", step, loss, ev)

    ck = train(ds, policy, config.train_config(cfg), progress)
    save_checkpoint(ck, io["out"])
    return [io["out"]], cfg["train"]["seed"]


def _ckpt_defaults(ck):
    """(section, key, value) settings implied by the checkpoint's training data."""
    meta = ck.meta.get("dataset_meta", {})
    preset = meta.get("preset", {})
    out = [("env", "env_id", meta.get("env_id")),
           ("data", "preset", preset.get("name") if isinstance(preset, dict) else preset)]
    return [(s, k, v) for s, k, v in out if v]


def _eval_setup(cfg, ck):
    env_cfg = config.env_config(cfg)
    policy = ck.policy.with_h(cfg["policy"]["h"])
    return env_cfg, policy


def cmd_eval(cfg, io):
    ck = load_checkpoint(io["ckpt"])
    env_cfg, policy = _eval_setup(cfg, ck)
    strategy = config.strategy_config(cfg)
    n = config.episodes(cfg)
    seed = cfg["eval"]["seed"]
    results = bench.run_episodes(ck, env_cfg, policy, strategy, range(seed, seed + n),
                                 config.schedule(cfg))
    cell = {"env_id": env_cfg.env_id, "preset": cfg["data"]["preset"],
            "goal_speed": env_cfg.goal_speed, "h": policy.h, "n_samples": strategy.n_samples,
            "strategy": strategy.kind, "beta": strategy.guidance.beta,
            "obs_noise_sigma": env_cfg.obs_noise_sigma}
    row = bench.summarize(cell, results)
    bench.emit_csv([row], io["out"])
    print(f"{row.strategy} success {row.success_rate:.3f} "
          f"[{row.ci_low:.3f}, {row.ci_high:.3f}] over {row.n_episodes} episodes")
    return [io["out"]], seed


def cmd_tune_beta(cfg, io):
    ck = load_checkpoint(io["ckpt"])
    env_cfg, policy = _eval_setup(cfg, ck)
    best, curve = bench.tune_beta(
        ck, env_cfg, cfg["tune"]["betas"], config.episodes(cfg), cfg["eval"]["seed"], policy,
        cfg["strategy"]["n_samples"], config.schedule(cfg), config.guidance_config(cfg))
    rows = [replace(r, preset=cfg["data"]["preset"]) for _, r in curve]
    bench.emit_csv(rows, io["out"])
    for b, r in curve:
        print(f"beta {b:g}: {r.success_rate:.3f}")
    print(f"best beta {best:g}")
    return [io["out"]], cfg["eval"]["seed"]


def _parse_ckpt_specs(specs):
    out = {}
    for spec in specs:
        try:
            key, path = spec.split("=", 1)
            env_id, preset = key.split(":", 1)
        except ValueError:
            raise InvalidConfigError(f"--ckpt expects ENV:PRESET=PATH, got {spec!r}", "ckpt") from None
        out[(env_id, preset)] = path
    return out


def cmd_sweep(cfg, io):
    paths = _parse_ckpt_specs(io.get("ckpt", []))
    ckpts = {k: load_checkpoint(v) for k, v in sorted(paths.items())}
    grid = config.sweep_grid(cfg)
    cells = bench.expand_grid(grid)
    for cell in cells:
        if (cell["env_id"], cell["preset"]) not in ckpts:
            raise InvalidConfigError(f"no checkpoint for cell {cell}",
                                     f"checkpoint:{cell['env_id']}/{cell['preset']}")
    rows = []
    for cell in cells:
        n = config.episodes(cfg, cell["env_id"])
        res = bench.run_cell(cell, ckpts, n, cfg["eval"]["seed"], schedule=config.schedule(cfg),
                             guidance_defaults=config.guidance_config(cfg),
                             preset_jitter=cfg["env"]["preset_jitter"])
        rows.append(bench.summarize(cell, res))
        r = rows[-1]
        print(f"{cell} -> {r.success_rate:.3f}", flush=True)
    bench.emit_csv(rows, io["out"])
    outputs = [io["out"]]
    if io.get("out_plots"):
        outputs += bench.emit_plots(io["out"], io["out_plots"])
    return outputs, cfg["eval"]["seed"]


def cmd_plot(cfg, io):
    written = bench.emit_plots(io["csv"], io["out_plots"])
    if not written:
        print("warning: no rows, no plots written", file=sys.stderr)
    return written, 0


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "tune-beta": cmd_tune_beta, "sweep": cmd_sweep, "plot": cmd_plot}


# -- argument parsing ----------------------------------------------------------

# flag -> (section, key)
FLAG_KEYS = {
    "env": ("env", "env_id"), "goal_speed": ("env", "goal_speed"),
    "obs_noise": ("env", "obs_noise_sigma"), "preset": ("data", "preset"), "n": ("data", "n"),
    "mode_mix": ("data", "mode_mix"), "steps": ("train", "steps"), "hidden": ("train", "hidden"),
    "l": ("policy", "l"), "c": ("policy", "c"), "h": ("policy", "h"),
    "predict_states": ("policy", "predict_states"),
    "strategy": ("strategy", "kind"), "n_samples": ("strategy", "n_samples"),
    "beta": ("strategy", "beta"), "episodes": ("eval", "episodes"), "betas": ("tune", "betas"),
}
SEED_KEY = {"gen-data": ("data", "seed"), "train": ("train", "seed"), "eval": ("eval", "seed"),
            "tune-beta": ("eval", "seed"), "sweep": ("eval", "seed"), "plot": None}


def build_parser():
    parser = argparse.ArgumentParser(prog="actdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="INI file; flags override it")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key")
        if seed:
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("gen-data", help="write expert demonstrations"))
    p.add_argument("--env")
    p.add_argument("--preset")
    p.add_argument("--n", type=int)
    p.add_argument("--mode-mix", type=float)
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("train", help="fit a denoiser to a dataset"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--hidden")
    p.add_argument("--l", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--predict-states", action="store_const", const=True,
                   help="also diffuse the next state after each action")

    for name in ("eval", "tune-beta"):
        p = common(sub.add_parser(name, help="closed-loop evaluation" if name == "eval"
                                  else "grid search over the guidance weight"))
        p.add_argument("--ckpt", required=True)
        p.add_argument("--env")
        p.add_argument("--preset", help="variance preset (defaults to the checkpoint's)")
        p.add_argument("--goal-speed", type=float)
        p.add_argument("--obs-noise", type=float)
        p.add_argument("--h", type=int)
        p.add_argument("--n-samples", type=int)
        p.add_argument("--episodes", type=int)
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--strategy")
            p.add_argument("--beta", type=float)
        else:
            p.add_argument("--betas")

    p = common(sub.add_parser("sweep", help="evaluate a grid of cells"))
    p.add_argument("--ckpt", action="append", default=[], metavar="ENV:PRESET=PATH")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", help="also write SVG plots to this directory")

    p = common(sub.add_parser("plot", help="render SVG plots from a results CSV"), seed=False)
    p.add_argument("--csv", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("rerun", help="replay a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", help="write outputs here instead of the recorded paths")
    return parser


def _overrides(args):
    over = {}
    for flag, (section, key) in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            over.setdefault(section, {})[key] = v
    seed_key = SEED_KEY.get(args.command)
    if seed_key and getattr(args, "seed", None) is not None:
        over.setdefault(seed_key[0], {})[seed_key[1]] = args.seed
    for item in args.set:
        try:
            name, value = item.split("=", 1)
            section, key = name.strip().split(".", 1)
        except ValueError:
            raise InvalidConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}", item) from None
        over.setdefault(section, {})[key] = value
    return over


def _io(args):
    io = {"out": args.out} if getattr(args, "out", None) else {}
    if args.command == "train":
        io["data"] = args.data
    elif args.command in ("eval", "tune-beta"):
        io["ckpt"] = args.ckpt
    elif args.command == "sweep":
        io["ckpt"] = list(args.ckpt)
        if args.plots:
            io["out_plots"] = args.plots
    elif args.command == "plot":
        io["csv"] = args.csv
        io["out_plots"] = args.out_dir
        io["out"] = str(Path(args.out_dir) / "plots")
    return io


def run(command, cfg, io):
    for k, v in io.items():
        if k == "out":
            Path(v).parent.mkdir(parents=True, exist_ok=True)
        elif k == "out_plots":
            Path(v).mkdir(parents=True, exist_ok=True)
    outputs, seed = HANDLERS[command](cfg, io)
    manifest = write_manifest(command, cfg, io, [str(p) for p in outputs], seed)
    log.info("manifest written to %s", manifest)
    return outputs


def _explicit(args, over, section, key):
    if key in over.get(section, {}):
        return True
    if args.config:
        typed, _ = config.read_ini(Path(args.config).read_text())
        return key in typed.get(section, {})
    return False


def rerun(path, out_dir=None):
    """Replay from a manifest; returns (outputs, mismatched paths)."""
    cfg, extra = config.load(path)
    run_info = extra.get("run")
    if not run_info or run_info.get("command") not in HANDLERS:
        raise InvalidConfigError(f"{path} is not a manifest (missing [run] command)", "run.command")
    command = run_info["command"]
    io = {k: v for k, v in run_info.items() if k not in ("command", "seed")}
    if command == "sweep":
        io["ckpt"] = [s for s in io.get("ckpt", "").split(";") if s]
    for p, digest in extra.get("inputs", {}).items():
        if Path(p).is_file() and sha256(p) != digest:
            log.warning("input %s changed since the manifest was written", p)
    recorded = extra.get("outputs", {})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        base = Path(io["out"]).parent

        def move(p):
            try:
                return str(out_dir / Path(p).relative_to(base))
            except ValueError:
                return str(out_dir / Path(p).name)

        for k in list(io):
            if k.startswith("out"):
                io[k] = move(io[k])
        recorded = {move(k): v for k, v in recorded.items()}
    outputs = run(command, cfg, io)
    bad = [p for p, digest in recorded.items() if not Path(p).is_file() or sha256(p) != digest]
    return outputs, bad


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            outputs, bad = rerun(args.manifest, args.out_dir)
            if bad:
                for p in bad:
                    print(f"mismatch: {p}", file=sys.stderr)
                return 1
            print(f"reproduced {len(outputs)} output(s) bit-exactly")
            return 0
        over = _overrides(args)
        if args.command in ("eval", "tune-beta"):
            for section, key, value in _ckpt_defaults(load_checkpoint(args.ckpt)):
                if not _explicit(args, over, section, key):
                    over.setdefault(section, {})[key] = value
        cfg, _ = config.load(args.config, over)
        run(args.command, cfg, _io(args))
    except InvalidConfigError as exc:
        print(f"actdiff: config error [{exc.key}]: {exc}", file=sys.stderr)
        return 2
    except (ActDiffError, OSError) as exc:
        print(f"actdiff: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
