"""Shipped JSON schemas for CLI outputs."""

import json
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    return json.loads(resources.files(__name__).joinpath(f"{name}.schema.json").read_text("utf-8"))


def validate(doc, name: str) -> None:
    import jsonschema

    jsonschema.validate(doc, load(name))
