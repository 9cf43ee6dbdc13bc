"""Run configuration: one YAML file, with only secrets read from the environment.

Example::

    endpoint:
      base_url: http://localhost:8000/v1
      max_in_flight: 4
    templates_dir: prompts/          # optional, defaults to the packaged templates
    lexicon: lexicon.txt             # optional, defaults to the packaged lexicon
    pipeline: {limits: [5, 10, 15], caption_temperature: 0.2}
    reward: {alpha: 0.3, lambda_acc: 0.7, lambda_form: 0.3, lambda_attn: 0.6}
    grpo: {iterations: 500, seed: 7}
    env: {n_buckets: 8, n_answers: 12}
    eval: {similarity_threshold: null}

``mock_dir`` (a directory of scripted responses) replaces ``endpoint``; the two
are mutually exclusive. Relative paths resolve against the config file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .grpo import EnvConfig, GrpoConfig
from .metrics import AnswerMatcher
from .mllm import ChatClient, EndpointConfig, HttpChatClient, ScriptedMock
from .pipeline import ConstraintLexicon, PipelineSettings, PromptTemplates, load_lexicon
from .rewards import RewardWeights

_TOP_KEYS = {"endpoint", "mock_dir", "templates_dir", "lexicon", "pipeline", "reward", "grpo", "env", "eval"}


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    endpoint: EndpointConfig | None = None
    mock_dir: Path | None = None
    templates_dir: Path | None = None
    lexicon_path: Path | None = None
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    reward: RewardWeights = field(default_factory=RewardWeights)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    matcher: AnswerMatcher = field(default_factory=AnswerMatcher)

    def __post_init__(self) -> None:
        if self.endpoint is not None and self.mock_dir is not None:
            raise ConfigError("mock mode and a live endpoint are mutually exclusive")
        for label, path, is_dir in (
            ("mock_dir", self.mock_dir, True),
            ("templates_dir", self.templates_dir, True),
            ("lexicon", self.lexicon_path, False),
        ):
            if path is not None and not (path.is_dir() if is_dir else path.is_file()):
                raise ConfigError(f"{label} not found: {path}")

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None, base: Path = Path(".")) -> RunConfig:
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        unknown = sorted(set(data) - _TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

        def path(key: str) -> Path | None:
            value = data.get(key)
            return None if value is None else (base / str(value))

        endpoint = None
        if data.get("endpoint") is not None:
            section = dict(data["endpoint"]) if isinstance(data["endpoint"], dict) else data["endpoint"]
            if isinstance(section, dict) and not section.get("base_url"):
                section.pop("base_url", None)
                try:
                    endpoint = EndpointConfig.from_env(**section)
                except TypeError as exc:
                    raise ConfigError(f"invalid 'endpoint' section: {exc}") from None
            else:
                endpoint = _section(EndpointConfig, section, "endpoint")

        pipeline = data.get("pipeline")
        if isinstance(pipeline, dict) and "limits" in pipeline:
            limits = pipeline["limits"]
            if not isinstance(limits, (list, tuple)):
                raise ConfigError("pipeline.limits must be a list of three integers")
            pipeline = {**pipeline, "limits": tuple(limits)}
        return cls(
            endpoint=endpoint,
            mock_dir=path("mock_dir"),
            templates_dir=path("templates_dir"),
            lexicon_path=path("lexicon"),
            pipeline=_section(PipelineSettings, pipeline, "pipeline"),
            reward=_section(RewardWeights, data.get("reward"), "reward"),
            grpo=_section(GrpoConfig, data.get("grpo"), "grpo"),
            env=_section(EnvConfig, data.get("env"), "env"),
            matcher=_section(AnswerMatcher, data.get("eval"), "eval"),
        )

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> RunConfig:
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        return cls.from_dict(data, base=path.resolve().parent)

    def with_mock(self, mock_dir: str | os.PathLike) -> RunConfig:
        return dataclasses.replace(self, endpoint=None, mock_dir=Path(mock_dir))

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, grpo=dataclasses.replace(self.grpo, seed=seed))

    def client(self) -> ChatClient:
        if self.mock_dir is not None:
            return ScriptedMock.from_dir(self.mock_dir)
        endpoint = self.endpoint or EndpointConfig.from_env()
        return HttpChatClient(endpoint)

    def templates(self) -> PromptTemplates:
        return PromptTemplates.load(self.templates_dir) if self.templates_dir else PromptTemplates.load()

    def lexicon(self) -> ConstraintLexicon:
        return load_lexicon(self.lexicon_path)

    @property
    def max_in_flight(self) -> int | None:
        return self.endpoint.max_in_flight if self.endpoint is not None else None
