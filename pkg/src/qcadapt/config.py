"""Flat key-value run configuration (TOML-compatible subset).

Lines look like `scheme = bqce`, `potential.a = 4.0`, `solver.tol = 1e-8`;
`#` starts a comment. Values are parsed as bool/int/float when possible.
"""

from .errors import ConfigError


def parse_value(text):
    t = text.strip().strip('"').strip("'")
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def load_config(path):
    """Read a flat key-value file into a {dotted.key: value} dict."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, val = line.split("=", 1)
            out[key.strip()] = parse_value(val)
    return out
