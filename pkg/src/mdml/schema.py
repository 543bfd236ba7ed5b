"""Schema inference and publish-time validation for JSON payloads.

Inference is deliberately mechanical: objects become ``properties`` with
every field required, arrays take the type of their first element, scalars
map to their JSON type. Validation applies only to payloads whose headers
declare ``content-type: application/json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import jsonschema

from .errors import InvalidSchema, NotJson, SchemaViolation

CONTENT_TYPE_HEADER = "content-type"
JSON_CONTENT_TYPE = "application/json"


@dataclass
class SchemaDoc:
    schema_id: str
    topic: str
    body: dict
    version: int
    enforce: bool = False

    def to_json(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "topic": self.topic,
            "body": self.body,
            "version": self.version,
            "enforce": self.enforce,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SchemaDoc":
        return cls(doc["schema_id"], doc["topic"], doc["body"],
                   doc["version"], doc.get("enforce", False))


def _type_of(value) -> dict:
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if value is None:
        return {"type": "null"}
    if isinstance(value, list):
        schema: dict = {"type": "array"}
        if value:
            schema["items"] = _type_of(value[0])
        return schema
    if isinstance(value, dict):
        return infer_schema(value)
    raise NotJson(f"cannot infer a schema for {type(value).__name__}")


def infer_schema(sample) -> dict:
    """Infer a schema document from one sample JSON value."""
    if isinstance(sample, dict):
        return {
            "type": "object",
            "properties": {k: _type_of(v) for k, v in sample.items()},
            "required": sorted(sample.keys()),
        }
    return _type_of(sample)


def infer_schema_from_payload(payload: bytes) -> dict:
    try:
        sample = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NotJson(f"payload is not JSON: {exc}") from exc
    return infer_schema(sample)


def check_schema_body(body) -> dict:
    """Validate that a schema body is itself a usable JSON-schema document."""
    if isinstance(body, (str, bytes)):
        try:
            body = json.loads(body)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidSchema(f"schema is not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise InvalidSchema("schema body must be a JSON object")
    try:
        jsonschema.validators.validator_for(body).check_schema(body)
    except jsonschema.SchemaError as exc:
        raise InvalidSchema(f"invalid schema: {exc.message}") from exc
    return body


def validate_payload(schema_body: dict, payload: bytes,
                     headers: dict[str, str] | None) -> None:
    """Raise SchemaViolation when a declared-JSON payload fails the schema."""
    if not headers or headers.get(CONTENT_TYPE_HEADER) != JSON_CONTENT_TYPE:
        return
    try:
        value = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"declared JSON payload does not parse: {exc}") from exc
    try:
        jsonschema.validate(value, schema_body)
    except jsonschema.ValidationError as exc:
        raise SchemaViolation(exc.message) from exc
