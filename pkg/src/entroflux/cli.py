"""Command-line entry point: JSON config in, CSV/JSON artifacts plus a manifest out.

Subcommands: lattice, transport, sweep-n, entropy-curve, sample, density.
Exit codes: 0 ok, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import lattice, net
from .density import kl_and_cross_entropy
from .gaussmix import GaussianMixture, random_mixture
from .generate import (SamplerConfig, exact_eps, initial_law_kl, pf_ode_sample, reverse_sde_sample,
                       write_samples_csv)
from .process import DiffusionSpec
from .thermo import default_grid, entropy_curve, stot_gaussian_exact, stot_via_kl_identity
from .train import TrainConfig, eps_model, fit, write_training_log

log = logging.getLogger("entroflux")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("lattice", "transport", "sweep-n", "entropy-curve", "sample", "density")


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("entroflux").joinpath("config_schema.json").read_text())


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("entroflux.presets").iterdir()
                  if p.name.endswith(".json"))


def load_config(ref: str) -> dict:
    """Read a config from a path, or from a shipped preset by name."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        name = ref[:-5] if ref.endswith(".json") else ref
        if name not in preset_names():
            raise ConfigError(f"no config file or preset named {ref!r}")
        text = resources.files("entroflux.presets").joinpath(name + ".json").read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    return cfg


def build_spec(cfg: dict) -> DiffusionSpec:
    return DiffusionSpec.from_dict(dict(cfg.get("process", {"kind": "VP"})))


def build_mixture(cfg: dict) -> GaussianMixture:
    m = cfg.get("mixture", {})
    if "means" in m:
        k = len(m["means"])
        return GaussianMixture(m.get("weights", [1.0 / k] * k), m["means"],
                               m.get("variances", [1.0] * k))
    return random_mixture(m.get("dim", 6), m.get("n_components", 5), m.get("side", 4.0),
                          m.get("var", 1.0), np.random.default_rng(m.get("seed", 0)))


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    t.setdefault("seed", seed)
    return TrainConfig(**t)


def training_data(cfg: dict, gm: GaussianMixture, n: int | None = None):
    n = cfg.get("n_train", 8192) if n is None else n
    return gm.sample(n, np.random.default_rng(cfg.get("data_seed", cfg.get("seed", 0) + 1)))


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Output directory plus the bookkeeping that ends up in manifest.json."""

    def __init__(self, command: str, cfg: dict, out_dir: Path):
        self.command, self.cfg, self.out = command, cfg, out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list = []
        self.extra: dict = {}
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_json(self, name: str, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, status: str = "ok"):
        manifest = {
            "command": self.command, "config": self.cfg, "build": git_describe(),
            "seeds": {"seed": self.cfg.get("seed", 0),
                      "train_seed": self.cfg.get("train", {}).get("seed", self.cfg.get("seed", 0)),
                      "data_seed": self.cfg.get("data_seed", self.cfg.get("seed", 0) + 1)},
            "wallclock_seconds": time.perf_counter() - self.t0, "status": status,
            "outputs": {f: _sha256(self.out / f) for f in self.files if (self.out / f).exists()},
            **self.extra,
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _rng(cfg: dict, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.get("seed", 0), stream])


def cmd_lattice(run: Run):
    lc = run.cfg.get("lattice", {})
    # default ladder: three refinements by 3/2 that all fit the endpoint-kernel budget
    ells = lc.get("ell", [0.12, 0.08, 0.16 / 3, 0.32 / 9])
    kw = {k: lc[k] for k in ("horizon", "start_mean", "start_var", "sigma_sq", "stiffness",
                             "walkers") if k in lc}
    sigma_sq, stiffness = kw.get("sigma_sq", 1.0), kw.get("stiffness", 1.0)
    rows, prev = [], None
    for ell in ells:
        state, steps = lattice.ou_lattice(ell, **kw)
        traj = lattice.run(state, steps)
        stot = lattice.stot_discrete(traj)
        # continuum OU dX = -k X ds + sigma dB is VPx with beta = 2k, kappa^2 = sigma^2 / (2k),
        # compared over the horizon the lattice actually covers
        horizon = steps * state.dt
        cont = DiffusionSpec("VPx", beta_min=2 * stiffness, beta_max=2 * stiffness,
                             kappa=(sigma_sq / (2 * stiffness)) ** 0.5, horizon=horizon)
        exact = stot_gaussian_exact([kw.get("start_mean", 2.0)], kw.get("start_var", 0.25), cont,
                                    s_end=horizon)
        try:
            ep = lattice.endpoint_kl_and_shannon(traj)
            kl, bits, ok = ep.kl_endpoint, ep.log2_prob, stot >= ep.kl_endpoint - 1e-12
        except lattice.LatticeConfigError:
            kl, bits, ok = float("nan"), float("nan"), None
        err = abs(stot - exact)
        order = float("nan") if prev is None else float(np.log(prev[1] / err) / np.log(prev[0] / ell))
        rows.append([ell, steps, len(state.p), stot, exact, err, order, kl, bits, ok])
        prev = (ell, err)
        lattice.write_entropy_csv(run.path(f"lattice_stot_ell{ell:g}.csv"), traj)
    with open(run.path("convergence.csv"), "w") as fh:
        fh.write("ell,steps,sites,stot_discrete,stot_continuum,abs_error,observed_order,"
                 "kl_endpoint,log2_prob_playback,log_sum_inequality\n")
        for r in rows:
            fh.write(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v)
                              for v in r) + "\n")


def _curves(run: Run, gm, spec, model, cfg, tag=""):
    c = cfg.get("curve", {})
    grid = default_grid(spec, c.get("n_points", 500))
    n = c.get("n_probe", 1000)
    ideal = entropy_curve("IdealTot", gm, spec, grid=grid, n=n, rng=_rng(cfg, 11))
    ideal.to_csv(run.path(f"entropy_ideal{tag}.csv"))
    out = {"S_tot_ideal": ideal.final.value, "S_tot_ideal_std_err": ideal.final.std_err}
    if model is not None:
        neural = entropy_curve("Neural", gm, spec, model, grid=grid, n=n, rng=_rng(cfg, 12))
        neural.to_csv(run.path(f"entropy_neural{tag}.csv"))
        out.update({"S_NN": neural.final.value, "S_NN_std_err": neural.final.std_err})
    return out


def _density(run: Run, gm, spec, model, cfg, tag=""):
    d = cfg.get("density", {})
    res = kl_and_cross_entropy(gm, model, spec, d.get("n_x", 512), d.get("n_path", 10_000),
                               _rng(cfg, 13), n_eps=d.get("n_eps", 2),
                               terminal=d.get("terminal", "gibbs"))
    res.write(run.path(f"density{tag}.csv"), run.path(f"kl_summary{tag}.json"))
    return res.summary()


def _train(run: Run, cfg, spec, gm, n=None, tag=""):
    tcfg = build_train_config(cfg, cfg.get("seed", 0))
    data = training_data(cfg, gm, n)
    res = fit(data, spec, tcfg, p_d=gm)
    write_training_log(run.path(f"training_log{tag}.csv"), res.log, wallclock=False)
    net.save_checkpoint(run.path(f"checkpoint{tag}.npz"), res.params, res.emb, res.opt_state,
                        None, tcfg.epochs, {"train_config": tcfg.to_dict(), "spec": spec.to_dict(),
                                            "mixture": gm.to_dict()})
    run.extra.setdefault("epoch_wallclock", {})[tag or "main"] = [r["wallclock"] for r in res.log]
    model = eps_model(res.params.astype(np.float64), res.emb, spec, tcfg.objective)
    return res, model


def cmd_transport(run: Run):
    cfg = run.cfg
    spec, gm = build_spec(cfg), build_mixture(cfg)
    _, model = _train(run, cfg, spec, gm)
    summary = _curves(run, gm, spec, model, cfg)
    summary.update(_density(run, gm, spec, model, cfg))
    run.write_json("summary.json", summary)


def cmd_sweep_n(run: Run):
    cfg = run.cfg
    spec, gm = build_spec(cfg), build_mixture(cfg)
    rows = []
    for n in cfg.get("sweep_n", [10, 100, 1000, 8192]):
        res, model = _train(run, cfg, spec, gm, n, tag=f"_n{n}")
        dens = _density(run, gm, spec, model, cfg, tag=f"_n{n}")
        rows.append((n, res.log[-1]["S_NN_T"], dens["kl_upper_bound_estimate"],
                     dens["kl_std_err"]))
    with open(run.path("sweep_n.csv"), "w") as fh:
        fh.write("n_train,S_NN_T,kl_upper_bound_estimate,kl_std_err\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r}\n")


def _load_model(cfg: dict, spec, gm):
    if cfg.get("oracle"):
        return exact_eps(gm, spec)
    if "checkpoint" not in cfg:
        return None
    ck = net.load_checkpoint(cfg["checkpoint"])
    objective = ck["meta"].get("train_config", {}).get("objective", "EntropyMatching")
    return eps_model(ck["params"].astype(np.float64), ck["emb"], spec, objective)


def cmd_entropy_curve(run: Run):
    cfg = run.cfg
    spec, gm = build_spec(cfg), build_mixture(cfg)
    summary = _curves(run, gm, spec, _load_model(cfg, spec, gm), cfg)
    kl_id = stot_via_kl_identity(gm, spec, cfg.get("curve", {}).get("n_probe", 1000) * 100,
                                 _rng(cfg, 14))
    summary.update({"S_tot_kl_identity": kl_id.value, "S_tot_kl_identity_std_err": kl_id.std_err})
    run.write_json("summary.json", summary)


def _require_model(cfg, spec, gm):
    model = _load_model(cfg, spec, gm)
    if model is None:
        raise ConfigError("this command needs 'checkpoint' or 'oracle': true")
    return model


def cmd_sample(run: Run):
    cfg = run.cfg
    spec, gm = build_spec(cfg), build_mixture(cfg)
    model = _require_model(cfg, spec, gm)
    sc = dict(cfg.get("sampler", {}))
    n, method = sc.pop("n", 1000), sc.pop("method", "sde")
    scfg = SamplerConfig(**sc)
    sampler = reverse_sde_sample if method == "sde" else pf_ode_sample
    x = sampler(model, spec, scfg, n, _rng(cfg, 15), dim=gm.dim)
    write_samples_csv(run.path("samples.csv"), x, scfg, {"method": method, "seed": cfg.get("seed", 0)})
    summary = {"n": n, "method": method, "init": scfg.init}
    if scfg.init == "QID":
        kl0 = initial_law_kl(gm, spec, 100_000, _rng(cfg, 16))
        summary.update({"kl_initial_law_to_qid": kl0.value, "kl_initial_law_std_err": kl0.std_err})
    run.write_json("summary.json", summary)


def cmd_density(run: Run):
    cfg = run.cfg
    spec, gm = build_spec(cfg), build_mixture(cfg)
    run.write_json("summary.json", _density(run, gm, spec, _require_model(cfg, spec, gm), cfg))


HANDLERS = {"lattice": cmd_lattice, "transport": cmd_transport, "sweep-n": cmd_sweep_n,
            "entropy-curve": cmd_entropy_curve, "sample": cmd_sample, "density": cmd_density}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entroflux", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("--list-presets", action="store_true", help="print shipped preset names")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config path or preset name")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap BLAS/OpenMP worker threads")
        if name == "sweep-n":
            sp.add_argument("--n", default=None, help="comma-separated training-set sizes")
    return p


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = parser().parse_args(argv)
    if args.list_presets:
        print("\n".join(preset_names()))
        return EXIT_OK
    if args.command is None:
        parser().print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if getattr(args, "n", None):
            try:
                cfg["sweep_n"] = [int(v) for v in args.n.split(",")]
            except ValueError as exc:
                raise ConfigError(f"--n must be comma-separated integers: {exc}") from exc
        name = cfg.get("name", Path(args.config).stem)
        out = Path(args.out or cfg.get("output_dir") or f"entroflux_out/{name}")
        run_ = Run(args.command, cfg, out)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"entroflux: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            HANDLERS[args.command](run_)
    except ConfigError as exc:
        print(f"entroflux: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ZeroDivisionError, lattice.LatticeConsistencyError) as exc:
        run_.finish("numerical abort")
        print(f"entroflux: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as exc:
        print(f"entroflux: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run_.finish()
    log.info("wrote %d files to %s", len(run_.files), out)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
