"""Command-line front end: ``rfo2 <subcommand> [--config FILE] [--key value ...]``.

Every subcommand reads the typed keys of :mod:`rfo2.config`, from a config
file and/or flags (flags win), and writes its outputs plus ``manifest.json``
into ``--out`` when given.  Exit status: 0 success, 2 usage or config
error, 3 numerical failure.
"""

import argparse
import json
import sys

import numpy as np

from .config import SCHEMA, ConfigError, coerce, load_config, render_config

__all__ = ["main", "build_parser"]

SUBCOMMANDS = {
    "scales": ("epsilon", "ell", "L"),
    "fields": ("seed", "epsilon", "d", "side", "lam", "bc"),
    "classify": ("seed", "epsilon", "d", "side", "ell", "L", "scale", "profile"),
    "contours": ("seed", "epsilon", "d", "ell", "L", "k", "noise", "profile", "spins"),
    "surgery": ("seed", "epsilon", "d", "ell", "L", "k", "noise", "profile", "mod4_mode",
                "dump_stages"),
    "sample": ("seed", "epsilon", "d", "side", "bc", "beta", "sweeps", "burn_in", "thinning",
               "width", "block", "init", "chains"),
    "verify": ("seed", "epsilon", "d", "side", "suite", "l", "lam", "bc", "samples", "K",
               "ell", "L", "profile"),
}

# per-subcommand defaults that differ from the schema
DEFAULTS = {"sample": {"bc": "free"}}


class NumericalFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="rfo2", description="Random-field O(2) contour and sampling toolkit.")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True
    for name, keys in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=f"{name} (keys: {', '.join(keys)})")
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", help="run directory for outputs and manifest")
        for k in keys:
            sp.add_argument(f"--{k.replace('_', '-')}", dest=k, default=None, metavar="V",
                            help=f"{SCHEMA[k][2]} (default {DEFAULTS.get(name, {}).get(k, SCHEMA[k][1])})")
    return p


def _resolve(args):
    keys = SUBCOMMANDS[args.command]
    vals = {}
    text = ""
    if args.config:
        vals, text = load_config(args.config)
        extra = set(vals) - set(keys)
        if extra:
            raise ConfigError(f"keys not used by {args.command}: {', '.join(sorted(extra))}")
    for k in keys:
        v = getattr(args, k)
        if v is not None:
            vals[k] = coerce(k, v)
    dflt = DEFAULTS.get(args.command, {})
    full = {k: vals.get(k, dflt.get(k, SCHEMA[k][1])) for k in keys}
    return full, render_config(full)


def _scales(cfg):
    from .geometry import derive_scales

    eps = cfg["epsilon"]
    if not 0 < eps < 1:
        raise ConfigError("epsilon must lie in (0, 1)")
    return derive_scales(eps, cfg.get("ell"), cfg.get("L"))


def _params(cfg):
    from .classification import ClassifierParams

    sc = _scales(cfg)
    if cfg.get("profile", "calibrated") == "calibrated":
        return ClassifierParams.calibrated(cfg["epsilon"], sc.ell, sc.L)
    if cfg["profile"] == "asymptotic":
        return ClassifierParams(cfg["epsilon"], sc.ell, sc.L)
    raise ConfigError("profile must be 'calibrated' or 'asymptotic'")


def _box(cfg):
    from .geometry import Region

    if cfg["d"] < 1 or cfg["side"] < 1:
        raise ConfigError("d and side must be positive")
    return Region.box((0,) * cfg["d"], cfg["side"])


def cmd_scales(cfg, run, out):
    sc = _scales(cfg)
    res = {"epsilon": sc.epsilon, "ell": sc.ell, "L": sc.L, "clamped": sc.clamped,
           "raw_ell": sc.raw_ell, "raw_L": sc.raw_L}
    out.write(f"ell={sc.ell} L={sc.L} clamped={str(sc.clamped).lower()}\n")
    if run:
        run.write_json("scales.json", res)
    return res


def cmd_fields(cfg, run, out):
    from .fields import _bc, gradient_energy, sample_alpha, solve_green
    from .io import field_to_bytes, region_to_bytes

    try:
        bc = _bc(cfg["bc"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    reg = _box(cfg)
    real = sample_alpha(reg, cfg["seed"], cfg["epsilon"])
    g = solve_green(real, reg, lam=cfg["lam"], bc=bc)
    res = {"sites": len(reg), "g_sup": float(np.abs(g.values).max()),
           "g_grad2": float(gradient_energy(g, include_crossing=bc == "dirichlet")),
           "alpha_mean": float(real.alpha.values.mean())}
    out.write(json.dumps(res, sort_keys=True) + "\n")
    if run:
        run.write_bytes("region.rfo1", region_to_bytes(reg))
        run.write_bytes("alpha.rfof", field_to_bytes(real.alpha, 0.0, bc, cfg["epsilon"], cfg["seed"]))
        run.write_bytes("green.rfof", field_to_bytes(g, cfg["lam"], bc, cfg["epsilon"], cfg["seed"]))
        run.write_json("fields.json", dict(res, lam=cfg["lam"], bc=bc))
    return res


def cmd_classify(cfg, run, out):
    from .classification import DisorderClassifier, box_reports_csv, region_taxonomy
    from .fields import sample_alpha
    from .geometry import LatticeBox, block_corners

    p = _params(cfg)
    reg = _box(cfg)
    s = cfg["scale"] or p.L
    if cfg["side"] % s or cfg["side"] % p.L:
        raise ConfigError("side must be a multiple of the block scale and of L")
    real = sample_alpha(reg, cfg["seed"], cfg["epsilon"])
    clf = DisorderClassifier(real, p)
    corners = block_corners(reg, s)
    reps = [clf.box_report(LatticeBox(tuple(c), s)) for c in corners]
    good = clf.good(s, corners)
    for r, gd in zip(reps, good):
        r.good = bool(gd)
    res = {"scale": s, "boxes": len(reps), "nice_fraction": float(np.mean([r.nice for r in reps])),
           "good_fraction": float(np.mean(good))}
    if p.L <= cfg["side"] // 3:
        # taxonomy of the central L-blocks (their thickening must fit in the window)
        from .geometry import Region

        inner = Region.box((p.L,) * cfg["d"], cfg["side"] - 2 * p.L)
        rr = region_taxonomy(real, inner, p, classifier=clf)
        res["region"] = json.loads(rr.to_json())
    out.write(json.dumps({k: v for k, v in res.items() if k != "region"}, sort_keys=True) + "\n")
    if run:
        run.write_text("boxes.csv", box_reports_csv(reps))
        run.write_json("classify.json", res)
        run.write_json("params.json", p.to_dict())
    return res


def _fixture(cfg):
    from .surgery import _physical_memory, flipped_block_fixture

    sc = _scales(cfg)
    p = _params(cfg)
    return flipped_block_fixture(cfg["d"], sc.ell, sc.L, cfg["epsilon"], cfg["seed"], k=cfg["k"],
                                 noise=cfg["noise"], params=p, max_bytes=_physical_memory())


def cmd_contours(cfg, run, out):
    from .classification import phase_fields
    from .contours import contour_geometry, extract_contours

    if cfg.get("spins"):
        from .io import region_from_bytes, spins_from_bytes

        with open(cfg["spins"] + ".region", "rb") as f:
            Lam = region_from_bytes(f.read())
        with open(cfg["spins"], "rb") as f:
            sigma = spins_from_bytes(f.read(), Lam)
        p = _params(cfg)
    else:
        fx = _fixture(cfg)
        sigma, Lam, p = fx.sigma, fx.LamN, fx.params
    pf = phase_fields(sigma, Lam, p)
    cs = extract_contours(sigma, Lam, p, phase=pf)
    items = [json.loads(c.to_json(contour_geometry(c, Lam, p.ell))) for c in cs]
    res = {"contours": len(cs), "spine_sites": [len(c.spine) for c in cs],
           "touches_boundary": [bool(c.touches_boundary) for c in cs]}
    out.write(json.dumps(res, sort_keys=True) + "\n")
    if run:
        run.write_json("contours.json", {"summary": res, "contours": items})
    return res


def cmd_surgery(cfg, run, out):
    from .classification import DisorderClassifier, phase_fields
    from .contours import extract_contours
    from .io import spins_to_bytes
    from .surgery import energy_gain, run_surgery

    fx = _fixture(cfg)
    p = fx.params
    pf = phase_fields(fx.sigma, fx.LamN, p)
    cs = [c for c in extract_contours(fx.sigma, fx.LamN, p, phase=pf) if not c.touches_boundary]
    if not cs:
        raise NumericalFailure("fixture has no interior contour")
    clf = DisorderClassifier(fx.real, p)
    tr = run_surgery(fx.sigma, cs[0], fx.LamN, fx.real, clf, p.ell, p.xi, phase=pf,
                     mod4_mode=cfg["mod4_mode"])
    delta, rep = energy_gain(fx.sigma, tr.final, fx.LamN, fx.real, p.ell, p.xi)
    res = tr.summary()
    res["delta"] = delta
    res["attribution"] = {k: v for k, v in rep.items() if isinstance(v, (int, float, str, bool))}
    out.write(json.dumps({"delta": delta, "bookkeeping_error": tr.bookkeeping_error()}) + "\n")
    if run:
        run.write_json("surgery.json", res)
        if cfg["dump_stages"]:
            for name, st in tr.stages.items():
                run.write_bytes(f"stage_{name}.rfos", spins_to_bytes(st))
    return res


def cmd_sample(cfg, run, out):
    from .fields import sample_alpha
    from .sampler import SamplerConfig, run_chains

    reg = _box(cfg)
    if cfg["bc"] not in ("free", "e1"):
        raise ConfigError("sampler bc must be 'free' or 'e1'")
    if cfg["chains"] < 1:
        raise ConfigError("chains must be at least 1")
    try:
        cfgs = [SamplerConfig(reg, cfg["beta"], cfg["epsilon"], seed=cfg["seed"] + i,
                              sweeps=cfg["sweeps"], burn_in=cfg["burn_in"], thinning=cfg["thinning"],
                              bc=cfg["bc"], width=cfg["width"], block=cfg["block"], init=cfg["init"])
                for i in range(cfg["chains"])]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    reals = [sample_alpha(reg, c.seed, cfg["epsilon"]) if cfg["epsilon"] else None for c in cfgs]
    results = run_chains(cfgs, reals)
    rows = [r for res in results for r in res.rows()]
    summ = [{"seed": r.seed, "width": r.width, "accept": r.accept,
             "mean_abs_m_e1": float(np.mean(np.abs(r.m_cos)))} for r in results]
    res = {"chains": summ,
           "median_abs_m_e1": float(np.median([s["mean_abs_m_e1"] for s in summ]))}
    out.write(json.dumps({"median_abs_m_e1": res["median_abs_m_e1"]}) + "\n")
    if run:
        run.write_csv("observables.csv", ["seed", "sample", "m_cos", "m_sin", "energy"], rows)
        run.write_json("sample.json", res)
    return res


def cmd_verify(cfg, run, out):
    if cfg["suite"] == "randbasic":
        from .stats import randbasic_suite

        if cfg["samples"] < 1000:
            raise ConfigError("the probabilistic suite needs samples >= 1000")
        try:
            rep = randbasic_suite(cfg["l"], cfg["lam"], cfg["d"], bc=cfg["bc"],
                                  samples=cfg["samples"], seed=cfg["seed"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        res = rep.to_dict()
    elif cfg["suite"] == "dirty":
        from .stats import dirty_density

        p = _params(cfg)
        rep = dirty_density(cfg["epsilon"], _box(cfg), p, samples=max(1, cfg["samples"] // 1000),
                            seed=cfg["seed"], K=cfg["K"])
        res = dict(rep.__dict__)
    else:
        raise ConfigError("suite must be 'randbasic' or 'dirty'")
    text = json.dumps(res, sort_keys=True, default=_plain)
    out.write(text + "\n")
    if run:
        run.write_json(f"{cfg['suite']}.json", json.loads(text))
    return res


def _plain(o):
    if isinstance(o, (np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


COMMANDS = {"scales": cmd_scales, "fields": cmd_fields, "classify": cmd_classify,
            "contours": cmd_contours, "surgery": cmd_surgery, "sample": cmd_sample,
            "verify": cmd_verify}


def main(argv=None, out=None):
    from .fields import SolverError
    from .io import RunDir
    from .surgery import ResourceLimit, SurgeryAbort

    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg, text = _resolve(args)
        run = RunDir(args.out, text, seed=cfg.get("seed"), command=args.command) if args.out else None
        COMMANDS[args.command](cfg, run, out)
        if run:
            run.finish()
        return 0
    except ConfigError as e:
        print(f"rfo2 {args.command}: config error: {e}", file=sys.stderr)
        return 2
    except (SolverError, SurgeryAbort, NumericalFailure, ResourceLimit, FloatingPointError,
            np.linalg.LinAlgError) as e:
        print(f"rfo2 {args.command}: numerical failure: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:
        # unreadable inputs and parameter combinations the library rejects
        print(f"rfo2 {args.command}: invalid input: {e}", file=sys.stderr)
        return 2


def main_exit():
    sys.exit(main())
