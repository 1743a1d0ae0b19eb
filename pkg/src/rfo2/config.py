"""Key-value run configuration.

A config file is UTF-8 text with one ``key = value`` per line; ``#`` starts
a comment and blank lines are ignored.  Keys are typed by :data:`SCHEMA`;
unknown keys and unparsable values raise :class:`ConfigError`.

Example::

    # sampler run
    d = 2
    side = 32
    epsilon = 0.5
    beta = 2
    seed = 7
    chains = 4
"""

__all__ = ["ConfigError", "SCHEMA", "parse_config", "load_config", "coerce", "render_config"]


class ConfigError(ValueError):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    t = str(text).strip().lower()
    return None if t in ("", "none") else int(t)


# key -> (type, default, help)
SCHEMA = {
    "seed": (int, 0, "disorder / chain seed"),
    "epsilon": (float, 0.3, "random field strength"),
    "d": (int, 2, "lattice dimension"),
    "side": (int, 32, "side of the box or window"),
    "lam": (float, 0.0, "mass of the Green field"),
    "bc": (str, "dirichlet", "boundary condition: dirichlet | neumann (fields), free | e1 (sampler)"),
    "ell": (_opt_int, None, "small scale (default from epsilon)"),
    "L": (_opt_int, None, "large scale (default from epsilon)"),
    "scale": (_opt_int, None, "block side for classification (default L)"),
    "profile": (str, "calibrated", "threshold profile: calibrated | asymptotic"),
    "k": (int, 1, "side of the flipped cube in L-blocks"),
    "noise": (float, 0.05, "angle noise of the fixture configuration"),
    "mod4_mode": (str, "boundary", "ramp of the last modification: boundary | interior"),
    "dump_stages": (_bool, False, "write per-stage spin dumps"),
    "spins": (str, "", "spin file (RFOS, region at <path>.region) instead of a fixture"),
    "beta": (float, 2.0, "inverse temperature"),
    "sweeps": (int, 1000, "measurement sweeps"),
    "burn_in": (int, 200, "burn-in sweeps (width adapts here)"),
    "thinning": (int, 1, "sweeps between samples"),
    "width": (float, 1.0, "initial proposal half-width"),
    "block": (_opt_int, None, "side of blocks for block magnetisations"),
    "init": (str, "random", "initial state: random | e1 | ordered"),
    "chains": (int, 1, "number of chains (seeds seed .. seed + chains - 1)"),
    "suite": (str, "randbasic", "verification suite: randbasic | dirty"),
    "l": (int, 16, "box side of the probabilistic suite"),
    "samples": (int, 2000, "samples of the probabilistic suite"),
    "K": (int, 3, "largest dirty region searched, in L-blocks"),
}


def coerce(key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ = SCHEMA[key][0]
    try:
        return typ(value) if isinstance(value, str) or typ is not str else value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key!r}: {value!r} ({e})") from None


def parse_config(text):
    """Typed dict of the keys present in ``text`` (no defaults filled in)."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def load_config(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from None
    return parse_config(text), text


def render_config(values):
    """Canonical text form (sorted keys) used for hashing resolved configs."""
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))
