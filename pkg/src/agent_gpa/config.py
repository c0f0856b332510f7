"""Harness configuration: a single JSON file, secrets only via environment variables."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from .backend import BackendSettings, LiveSettings
from .preprocess import DEFAULT_MAX_MESSAGE_CHARS

DEFAULT_MOCK_RESPONSE = (
    "Criteria: mock evaluation\n"
    "Supporting Evidence: no issues found by the mock backend.\n"
    "Score: 3\n"
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackendConfig(_Strict):
    model_id: str = "claude-sonnet-4-20250514"
    endpoint: str = "https://api.anthropic.com/v1/messages"
    api_format: Literal["anthropic", "openai"] = "anthropic"
    api_key_env: str = "ANTHROPIC_API_KEY"
    parallelism: int = Field(4, ge=1)
    retry_cap: int = Field(3, ge=1)
    backoff_base_ms: float = Field(500.0, ge=0)
    backoff_max_ms: float = Field(30_000.0, ge=0)
    temperature: float | None = None
    reasoning_effort: Literal["low", "medium", "high"] | None = "high"
    timeout_s: float = Field(600.0, gt=0)
    max_output_tokens: int = Field(8192, ge=1)

    def settings(self) -> BackendSettings:
        return BackendSettings(
            model_id=self.model_id,
            temperature=self.temperature,
            reasoning_effort=self.reasoning_effort,
            retry_cap=self.retry_cap,
            backoff_base_ms=self.backoff_base_ms,
            backoff_max_ms=self.backoff_max_ms,
        )

    def live(self) -> LiveSettings:
        return LiveSettings(
            endpoint=self.endpoint,
            api_format=self.api_format,
            api_key_env=self.api_key_env,
            timeout_s=self.timeout_s,
            max_output_tokens=self.max_output_tokens,
        )


class RenderConfig(_Strict):
    max_message_chars: int = Field(DEFAULT_MAX_MESSAGE_CHARS, ge=1)


class MockConfig(_Strict):
    # JSON Lines of {trace_id, judge_id, run_index?, text}
    responses: str | None = None
    default_response: str | None = DEFAULT_MOCK_RESPONSE
    fail_first: int = Field(0, ge=0)


class ReplayConfig(_Strict):
    # recorded responses, same layout as the response cache
    path: str | None = None


class EmbeddingConfig(_Strict):
    kind: Literal["none", "hashing"] = "hashing"
    dim: int = Field(512, ge=1)


class HarnessConfig(_Strict):
    backend: BackendConfig = BackendConfig()
    render: RenderConfig = RenderConfig()
    mock: MockConfig = MockConfig()
    replay: ReplayConfig = ReplayConfig()
    embedding: EmbeddingConfig = EmbeddingConfig()
    prompts_dir: str | None = None
    # JSON judge spec files, e.g. an external baseline judge
    extra_judges: list[str] = []
    architecture_preamble: bool = True
    # where relative paths resolve; set by load_config
    base_dir: str = "."

    def resolve(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p


def load_config(path: str | Path | None) -> HarnessConfig:
    if path is None:
        return HarnessConfig()
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    doc.setdefault("base_dir", str(path.parent))
    return HarnessConfig.model_validate(doc)
