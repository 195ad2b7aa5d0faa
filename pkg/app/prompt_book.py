"""Prompt templates loaded from the prompts/ directory."""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

from .errors import ConfigError
from .llm_gateway import GENERATION_TEMPERATURE, ChatMessage, ChatRequest, render_prompt

logger = logging.getLogger(__name__)

DEFAULT_PROMPT_DIR = Path(__file__).parent.parent / "prompts"

TEMPLATE_NAMES = (
    "format_contract",
    "idea_format",
    "inspire",
    "pos_crossover",
    "neg_crossover",
    "pos_mutation",
    "neg_mutation",
    "think",
    "solve",
    "summarize",
)


class PromptBook:
    """Named templates with exact `{placeholder}` expansion.

    A template that opens with a `SYSTEM:` section is sent as a system message
    (everything up to `INSTRUCTIONS:`) plus a user message (the rest).
    """

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory else DEFAULT_PROMPT_DIR
        self._templates: Dict[str, str] = {}

    def check(self):
        missing = [name for name in TEMPLATE_NAMES if not (self.directory / f"{name}.md").exists()]
        if missing:
            raise ConfigError(f"prompts.directory: missing template(s) {', '.join(missing)} in {self.directory}")

    def template(self, name: str) -> str:
        if name not in self._templates:
            prompt_path = self.directory / f"{name}.md"
            try:
                with open(prompt_path, 'r', encoding='utf-8') as f:
                    self._templates[name] = f.read()
            except FileNotFoundError as error:
                raise ConfigError(f"prompts.directory: no template {prompt_path}") from error
        return self._templates[name]

    def render(self, name: str, **values: str) -> str:
        return render_prompt(self.template(name), **values)

    def request(self, name: str, tag: str, temperature: float = GENERATION_TEMPERATURE,
                max_tokens: int = 2048, **values: str) -> ChatRequest:
        text = self.render(name, **values)
        messages = []
        if text.startswith("SYSTEM:"):
            system, separator, rest = text.partition("\nINSTRUCTIONS:")
            if separator:
                messages.append(ChatMessage(role="system", content=system[len("SYSTEM:"):].strip()))
                text = "INSTRUCTIONS:" + rest
        messages.append(ChatMessage(role="user", content=text.strip()))
        return ChatRequest(messages=messages, temperature=temperature, max_tokens=max_tokens, tag=tag)
