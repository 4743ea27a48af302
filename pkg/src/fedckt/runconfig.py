"""Experiment configuration: a flat key-value file with TOML-style sections.

Accepted syntax per line: `[section]` or `[section.sub]` headers,
`key = value` pairs (string, bool, int, float, or a single-line array of
scalars), comments starting with '#', and blank lines. JSON files holding
the same sections are accepted too, so the config echoed into a run's
summary can be re-fed verbatim.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigurationError
from .experiment import ALGORITHMS, DataConfig, ModelConfig
from .federation import FederationConfig

RUN_MODES = ALGORITHMS + ("theory_check", "toy", "partition_stats")


# ---------------------------------------------------------------------------
# flat TOML-subset parsing
# ---------------------------------------------------------------------------


def _strip_comment(line: str) -> str:
    out = []
    quote = None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
            out.append(ch)
        elif ch in ("'", '"'):
            quote = ch
            out.append(ch)
        elif ch == "#":
            break
        else:
            out.append(ch)
    return "".join(out).strip()


def _parse_scalar(token: str, where: str):
    token = token.strip()
    if not token:
        raise ConfigurationError(f"{where}: empty value")
    if token[0] in ("'", '"'):
        if len(token) < 2 or token[-1] != token[0]:
            raise ConfigurationError(f"{where}: unterminated string {token!r}")
        return token[1:-1]
    if token == "true":
        return True
    if token == "false":
        return False
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse value {token!r}") from None


def _parse_value(token: str, where: str):
    token = token.strip()
    if token.startswith("["):
        if not token.endswith("]"):
            raise ConfigurationError(f"{where}: unterminated array")
        inner = token[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part, where) for part in inner.split(",")]
    return _parse_scalar(token, where)


def parse_flat_toml(text: str, source: str = "<config>") -> dict[str, dict]:
    """Sections of key/value pairs; raises with file:line on malformed input."""
    sections: dict[str, dict] = {}
    current: dict | None = None
    current_name = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigurationError(f"{where}: malformed section header {line!r}")
            name = line[1:-1].strip()
            if not name:
                raise ConfigurationError(f"{where}: empty section name")
            current_name = name
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigurationError(f"{where}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigurationError(f"{where}: key outside of any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigurationError(f"{where}: missing key name")
        if key in current:
            raise ConfigurationError(f"{where}: duplicate key {key!r} in [{current_name}]")
        current[key] = _parse_value(value, f"{where} (key {key!r})")
    return sections


# ---------------------------------------------------------------------------
# typed run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoryTaskConfig:
    num_clients: int = 3
    dim: int = 2
    sigma: float = 1.0
    beta: float = 1.0
    nu: float = 1.0
    upsilon: tuple = (0.5, 1.0, 2.0)
    n_samples: int = 8
    client: int = 0

    def __post_init__(self):
        if len(self.upsilon) != self.num_clients:
            raise ConfigurationError("upsilon must list one value per client")
        if not 0 <= self.client < self.num_clients:
            raise ConfigurationError("client index out of range")


@dataclass(frozen=True)
class TheoryConfig:
    tasks: tuple[TheoryTaskConfig, ...] = ()
    num_samples: int = 100_000
    lambda_points: int = 15
    lambda_span: float = 4.0
    alpha_resolution: int = 16
    tolerance: float = 0.02
    corrupt_lambda_factor: float = 1.0

    def __post_init__(self):
        if self.num_samples < 1 or self.lambda_points < 1:
            raise ConfigurationError("theory grid sizes must be >= 1")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be > 0")


@dataclass(frozen=True)
class RunConfig:
    algorithm: str
    seed: int = 0
    out_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig | None = None
    theory: TheoryConfig | None = None
    toy_num_seeds: int = 10

    def __post_init__(self):
        if self.algorithm not in RUN_MODES:
            raise ConfigurationError(
                f"algorithm must be one of {RUN_MODES}, got {self.algorithm!r}"
            )
        if self.algorithm in ALGORITHMS and self.federation is None:
            raise ConfigurationError(f"[federation] section required for {self.algorithm}")
        if self.algorithm == "theory_check" and (
            self.theory is None or not self.theory.tasks
        ):
            raise ConfigurationError("theory_check needs at least one [theory.task*]")


def _build(cls, section: dict, name: str, **overrides):
    known = set(cls.__dataclass_fields__)
    for key in section:
        if key not in known:
            raise ConfigurationError(f"[{name}]: unknown key {key!r}")
    merged = dict(section)
    merged.update(overrides)
    for key, value in merged.items():
        if isinstance(value, list):
            merged[key] = tuple(value)
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from exc


def config_from_sections(sections: dict, seed_override: int | None = None) -> RunConfig:
    sections = {name: dict(body) for name, body in sections.items()}
    run = sections.pop("run", {})
    algorithm = run.pop("algorithm", None)
    if algorithm is None:
        raise ConfigurationError("[run]: missing required key 'algorithm'")
    seed = run.pop("seed", 0)
    if seed_override is not None:
        seed = seed_override
    out_dir = run.pop("out_dir", None)
    for key in run:
        raise ConfigurationError(f"[run]: unknown key {key!r}")

    data = _build(DataConfig, sections.pop("data", {}), "data")
    models = _build(ModelConfig, sections.pop("models", {}), "models")

    federation = None
    if "federation" in sections:
        federation = _build(
            FederationConfig, sections.pop("federation", {}), "federation", seed=seed
        )

    task_sections = sorted(name for name in sections if name.startswith("theory.task"))
    theory_body = sections.pop("theory", None)
    theory = None
    if theory_body is not None or task_sections:
        theory_body = dict(theory_body or {})
        tasks = theory_body.pop("tasks", [])
        task_cfgs = [_build(TheoryTaskConfig, dict(t), "theory.tasks") for t in tasks]
        for name in task_sections:
            task_cfgs.append(_build(TheoryTaskConfig, sections.pop(name), name))
        theory = _build(
            TheoryConfig, theory_body, "theory", tasks=tuple(task_cfgs)
        )

    toy = sections.pop("toy", {})
    toy_num_seeds = toy.pop("num_seeds", 10)
    for key in toy:
        raise ConfigurationError(f"[toy]: unknown key {key!r}")

    for name in sections:
        raise ConfigurationError(f"unknown section [{name}]")

    return RunConfig(
        algorithm=algorithm,
        seed=seed,
        out_dir=out_dir,
        data=data,
        models=models,
        federation=federation,
        theory=theory,
        toy_num_seeds=toy_num_seeds,
    )


def load_config(path, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    stripped = text.lstrip()
    if str(path).endswith(".json") or stripped.startswith("{"):
        try:
            sections = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(sections, dict):
            raise ConfigurationError(f"{path}: top-level JSON must be an object")
    else:
        sections = parse_flat_toml(text, source=str(path))
    return config_from_sections(sections, seed_override=seed_override)


def config_to_sections(cfg: RunConfig) -> dict:
    """Nested-dict echo of the resolved config; feeding this back as a JSON
    config reproduces the run exactly."""
    sections: dict = {
        "run": {"algorithm": cfg.algorithm, "seed": cfg.seed},
        "data": asdict(cfg.data),
        "models": asdict(cfg.models),
    }
    if cfg.out_dir is not None:
        sections["run"]["out_dir"] = cfg.out_dir
    if cfg.federation is not None:
        fed = asdict(cfg.federation)
        fed.pop("seed")  # the master seed in [run] is authoritative
        sections["federation"] = fed
    if cfg.theory is not None:
        body = asdict(cfg.theory)
        body["tasks"] = [dict(t, upsilon=list(t["upsilon"])) for t in body.pop("tasks")]
        sections["theory"] = body
    sections["toy"] = {"num_seeds": cfg.toy_num_seeds}
    return sections
