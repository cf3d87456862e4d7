"""JSON problem configs.

A config is a JSON object with a ``problem`` entry and an optional ``run``
entry of solver settings.  ``problem`` is either ``"registry:<name>"`` or an
object::

    {"base": "registry:disk-cubic",          # optional, fields below override
     "domain": {"type": "ball", "center": [0, 0], "radius": 1},
     "a": "identity", "lambda": 1, "Lambda": 1,
     "b": "zero", "bhat": "zero", "q": "constant:-1",
     "phi": "coord:1", "forcing": "constant:1",
     "driver": {"type": "cubic", "c1": 1},
     "mode": "linear"}

Field specs: a number, ``"zero"``, ``"identity"`` (matrices),
``"constant:<json>"``, ``"coord:<k>"`` (the k-th coordinate, 1-based),
``"grid:<path>"`` (binary grid file; a scalar grid used as a matrix means
s(x) I), ``"registry:<fixture>.<field>"``, or a list of scalar specs for a
vector (list of lists for a matrix).  Grid paths are relative to the
config file.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .domain import domain_from_config
from .errors import ConfigError
from .fixtures import get_fixture
from .grid import GridFunction
from .problem import Driver, EllipticProblem, MatrixField, ScalarField, VectorField

_FIELD_KEYS = {"a": "matrix", "b": "vector", "bhat": "vector", "q": "scalar",
               "phi": "scalar", "forcing": "scalar"}


def load_config(path) -> dict:
    """Read a config file; ``registry:<name>`` is accepted in place of a path."""
    if isinstance(path, str) and path.startswith("registry:"):
        return {"problem": path}
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict) or "problem" not in cfg:
        raise ConfigError(f"{p}: config needs a 'problem' entry")
    cfg["_dir"] = str(p.resolve().parent)
    return cfg


def config_digest(cfg: dict) -> str:
    """sha256 of the canonical JSON form, ignoring private keys."""
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    blob = json.dumps(clean, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_problem(cfg: dict) -> EllipticProblem:
    spec = cfg["problem"]
    base_dir = Path(cfg.get("_dir", "."))
    if isinstance(spec, str):
        return _registry_problem(spec)
    if not isinstance(spec, dict):
        raise ConfigError("'problem' must be a registry key or an object")
    return _problem_from_dict(spec, base_dir)


def _registry_problem(key: str) -> EllipticProblem:
    if not key.startswith("registry:"):
        raise ConfigError(f"expected 'registry:<name>', got {key!r}")
    return get_fixture(key.split(":", 1)[1]).problem


def _problem_from_dict(spec: dict, base_dir: Path) -> EllipticProblem:
    unknown = set(spec) - set(_FIELD_KEYS) - {"base", "domain", "lambda", "Lambda", "driver",
                                               "mode", "name", "phi_modulus"}
    if unknown:
        raise ConfigError(f"unknown problem keys: {sorted(unknown)}")
    base = _registry_problem(spec["base"]) if "base" in spec else None
    if base is None and "domain" not in spec:
        raise ConfigError("problem needs a 'domain' (or a 'base')")
    domain = domain_from_config(spec["domain"]) if "domain" in spec else base.domain
    d = domain.d
    kw = {}
    for key, kind in _FIELD_KEYS.items():
        if key in spec:
            kw[key] = parse_field(spec[key], kind, d, base_dir)
        elif base is not None:
            kw[key] = getattr(base, key)
    if "a" not in kw:
        kw["a"] = MatrixField.identity(d)
    if "phi" not in kw:
        raise ConfigError("problem needs boundary data 'phi'")
    if "driver" in spec:
        kw["driver"] = parse_driver(spec["driver"], d, base_dir)
    elif base is not None:
        kw["driver"] = base.driver
    lam = spec.get("lambda", base.lam if base else None)
    Lam = spec.get("Lambda", base.Lam if base else None)
    if lam is None or Lam is None:
        raise ConfigError("problem needs ellipticity bounds 'lambda' and 'Lambda'")
    mode = spec.get("mode", base.mode if base else "linear")
    return EllipticProblem(domain=domain, lam=float(lam), Lam=float(Lam), mode=mode,
                           name=spec.get("name", base.name if base else "config"),
                           phi_modulus=spec.get("phi_modulus"), **kw)


# -- fields -------------------------------------------------------------------


def _load_grid(path: str, base_dir: Path, d: int) -> GridFunction:
    p = Path(path)
    if not p.is_absolute():
        p = base_dir / p
    g = GridFunction.load(p)
    if g.d != d:
        raise ConfigError(f"grid {p} has dimension {g.d}, problem has {d}")
    return g


def _registry_field(ref: str):
    name, _, attr = ref.partition(".")
    if not attr:
        raise ConfigError(f"registry field needs '<fixture>.<field>', got {ref!r}")
    p = get_fixture(name).problem
    if attr not in _FIELD_KEYS:
        raise ConfigError(f"unknown field {attr!r} in {ref!r}")
    return getattr(p, attr)


def parse_field(spec, kind: str, d: int, base_dir: Path = Path(".")):
    """Turn a field spec into a Scalar-, Vector- or MatrixField."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        spec = f"constant:{spec}"
    if isinstance(spec, list):
        return _field_from_list(spec, kind, d, base_dir)
    if not isinstance(spec, str):
        raise ConfigError(f"bad field spec {spec!r}")
    head, _, rest = spec.partition(":")
    if head == "registry":
        fld = _registry_field(rest)
        if fld.d != d:
            raise ConfigError(f"{spec} has dimension {fld.d}, problem has {d}")
        return fld
    if head == "zero":
        return {"scalar": ScalarField.zero, "vector": VectorField.zero,
                "matrix": lambda n: MatrixField.const(0.0, n)}[kind](d)
    if head == "identity":
        if kind != "matrix":
            raise ConfigError("'identity' is only a matrix field")
        return MatrixField.identity(d)
    if head == "constant":
        try:
            val = json.loads(rest)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad constant in {spec!r}") from exc
        return _constant(val, kind, d)
    if head == "coord":
        k = int(rest) - 1
        if not (0 <= k < d) or kind != "scalar":
            raise ConfigError(f"{spec!r}: coordinate out of range or not a scalar field")

        def grad(x, k=k):
            g = np.zeros_like(x)
            g[:, k] = 1.0
            return g
        return ScalarField(lambda x, k=k: x[:, k].copy(), d, grad=grad, name=f"x{k + 1}")
    if head == "grid":
        g = _load_grid(rest, base_dir, d)
        if kind == "scalar":
            return ScalarField.from_grid(g, name=spec)
        if kind == "matrix":
            eye = np.eye(d)
            return MatrixField(lambda x: g(x)[:, None, None] * eye, d, name=f"{spec}*I")
        raise ConfigError("vector grid fields are lists of scalar grids")
    raise ConfigError(f"unknown field spec {spec!r}")


def _constant(val, kind: str, d: int):
    arr = np.asarray(val, dtype=float)
    if kind == "scalar":
        if arr.size != 1:
            raise ConfigError("scalar constant needs one value")
        return ScalarField.const(float(arr.reshape(-1)[0]), d)
    if kind == "vector":
        if arr.size == 1:
            arr = np.full(d, float(arr.reshape(-1)[0]))
        if arr.shape != (d,):
            raise ConfigError(f"vector constant needs {d} values")
        return VectorField.const(arr, d)
    if arr.ndim == 0 or arr.shape in ((1,), (d,), (d, d)):
        return MatrixField.const(arr.reshape(-1)[0] if arr.shape == (1,) else arr, d)
    raise ConfigError(f"matrix constant needs a scalar, {d} diagonal values or a {d}x{d} array")


def _field_from_list(spec: list, kind: str, d: int, base_dir: Path):
    if kind == "vector":
        if len(spec) != d:
            raise ConfigError(f"vector field needs {d} components")
        if all(isinstance(s, (int, float)) for s in spec):
            return VectorField.const(np.asarray(spec, dtype=float), d)
        comps = [parse_field(s, "scalar", d, base_dir) for s in spec]
        return VectorField(lambda x: np.stack([c.fn(x) for c in comps], axis=1), d,
                           name="[" + ",".join(c.name for c in comps) + "]")
    if kind == "matrix":
        if all(isinstance(s, (int, float)) for s in spec) or all(
                isinstance(r, list) and all(isinstance(s, (int, float)) for s in r) for r in spec):
            return _constant(spec, "matrix", d)
        if len(spec) != d or any(not isinstance(r, list) or len(r) != d for r in spec):
            raise ConfigError(f"matrix field needs a {d}x{d} list of scalar specs")
        comps = [[parse_field(s, "scalar", d, base_dir) for s in row] for row in spec]

        def a(x):
            return np.stack([np.stack([c.fn(x) for c in row], axis=1) for row in comps], axis=1)
        return MatrixField(a, d, name="matrix-from-components")
    if len(spec) == 1:
        return parse_field(spec[0], kind, d, base_dir)
    raise ConfigError("a scalar field spec cannot be a list")


# -- drivers ------------------------------------------------------------------


def parse_driver(spec, d: int, base_dir: Path = Path(".")) -> Driver:
    """``"zero"``, ``"registry:<fixture>"`` or an object with a ``type``.

    Types: ``linear`` (f = -rate y + source(x)), ``cubic``
    (f = -alpha y^3 - beta y, c1 defaults to beta).  Every type accepts
    ``c1``, ``c2`` and ``growth`` to override the declared constants.
    """
    if spec == "zero":
        return Driver.zero(d)
    if isinstance(spec, str) and spec.startswith("registry:"):
        drv = get_fixture(spec.split(":", 1)[1]).problem.driver
        if drv.c1.d != d:
            raise ConfigError(f"{spec}: driver dimension does not match")
        return drv
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(f"bad driver spec {spec!r}")
    kind = spec["type"]
    if kind == "linear":
        rate = float(spec.get("rate", 1.0))
        source = parse_field(spec["source"], "scalar", d, base_dir) if "source" in spec else None
        drv = Driver.linear_decay(d, rate, source)
        default_c1 = rate
    elif kind == "cubic":
        alpha = float(spec.get("alpha", 1.0))
        beta = float(spec.get("beta", 1.0))
        if alpha < 0:
            raise ConfigError("cubic driver needs alpha >= 0")
        drv = Driver(lambda x, y, z: -alpha * y ** 3 - beta * y, ScalarField.const(beta, d), 0.0,
                     name=f"-{alpha:g}y^3-{beta:g}y")
        default_c1 = beta
    elif kind == "zero":
        return Driver.zero(d)
    else:
        raise ConfigError(f"unknown driver type {kind!r}")
    c1 = spec.get("c1", default_c1)
    c1f = c1 if isinstance(c1, ScalarField) else parse_field(c1, "scalar", d, base_dir)
    return Driver(drv.f, c1f, float(spec.get("c2", drv.c2)), spec.get("growth", drv.growth),
                  name=drv.name, meta=dict(drv.meta))
