"""Run configuration: a flat ``key = value`` file with environment overrides.

Every key of :class:`RunConfig` may be set in the file or through an
environment variable ``BLINDNET_<KEY>`` (upper case), which wins over the file.
Blank lines and ``#`` comments are ignored.
"""
import dataclasses
import os
from dataclasses import dataclass, fields

ENV_PREFIX = "BLINDNET_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    seed: int = 0
    data_seed: int = 0
    corpus_count: int = 2000
    corpus_dir: str = ""
    image_size: int = 48
    natural_ratio: str = "1:3"
    instances: int = 1
    # model
    base_channels: int = 32
    res_blocks: int = 2
    bottom_codes: int = 128
    bottom_dim: int = 32
    top_codes: int = 64
    top_dim: int = 32
    beta: float = 0.25
    decay: float = 0.99
    laplace_eps: float = 1e-5
    dead_code_threshold: float = 1e-3
    unit_latents: bool = True
    dtype: str = "float32"
    # losses
    blind: bool = True
    gamma_q: float = 1.0
    gamma_o: float = 0.1  # l_o averages over the ~3% masked pixels only
    omega: float = 1.0
    latent_prequant: bool = False
    # optimisation
    batch_size: int = 8
    steps: int = 6000
    lr: float = 1e-3
    lr_step_size: int = 2000
    lr_gamma: float = 0.5
    checkpoint_every: int = 500
    # pose head
    pose_epochs: int = 100
    pose_lr: float = 1e-4
    pose_step_size: int = 30
    pose_gamma: float = 0.5
    pose_hidden: int = 128
    pose_batch: int = 32
    pose_train_views: int = 6000
    pose_test_views: int = 300
    pose_world_seed: int = 0

    def validate(self):
        if self.image_size % 8:
            raise ConfigError(f"image_size = {self.image_size}: must be divisible by 8")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        try:
            a, b = (int(v) for v in self.natural_ratio.split(":"))
        except ValueError:
            raise ConfigError(f"natural_ratio {self.natural_ratio!r} must look like '1:3'") from None
        if a < 0 or b < 1:
            raise ConfigError("natural_ratio needs a >= 0 and b >= 1")
        for name in ("gamma_q", "gamma_o", "omega", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    @property
    def ratio(self):
        a, b = self.natural_ratio.split(":")
        return int(a), int(b)

    def nonblind(self):
        """The baseline arm: same model, no Siamese terms and no mask exclusion."""
        return dataclasses.replace(self, blind=False, omega=0.0)

    # -- text form ----------------------------------------------------------

    def dumps(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text, env=None):
        return cls.from_mapping(parse_lines(text), env)

    @classmethod
    def from_mapping(cls, values, env=None, overrides=None):
        """Precedence, lowest first: defaults, ``values``, environment, ``overrides``."""
        env = os.environ if env is None else env
        types = {f.name: f.type for f in fields(cls)}
        merged = dict(values)
        for name in types:
            key = ENV_PREFIX + name.upper()
            if key in env:
                merged[name] = env[key]
        merged.update(overrides or {})
        unknown = set(merged) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {k: _parse(types[k], v, k) for k, v in merged.items()}
        return cls(**kwargs).validate()

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path, env=None):
        with open(path) as f:
            return cls.loads(f.read(), env)


def parse_lines(text):
    """``key = value`` lines to a dict of raw strings."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(typ, value, key):
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}[typ]
    try:
        if typ is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        return typ(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
