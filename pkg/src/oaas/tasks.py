"""Task wire types: the unit shipped to stateless execution and its result.

A task is self-contained: structured-state snapshots by value, presigned
GET URLs for every unstructured key of the main/input objects, presigned
PUT URLs for the output object. Executors never query platform state;
everything they may touch is embedded.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class TaskObjectView:
    id: str
    structured_state: dict = field(default_factory=dict)
    get_urls: dict[str, str] = field(default_factory=dict)

    def to_value(self) -> dict:
        return {"id": self.id, "structuredState": self.structured_state, "getUrls": self.get_urls}

    @classmethod
    def from_value(cls, v: dict) -> "TaskObjectView":
        return cls(v["id"], v.get("structuredState", {}), v.get("getUrls", {}))


@dataclass
class TaskOutputView:
    id: str
    put_urls: dict[str, str] = field(default_factory=dict)

    def to_value(self) -> dict:
        return {"id": self.id, "putUrls": self.put_urls}

    @classmethod
    def from_value(cls, v: dict) -> "TaskOutputView":
        return cls(v["id"], v.get("putUrls", {}))


@dataclass
class Task:
    task_id: str  # "<outputObjectId>:<attempt>", so retries stay idempotent
    function_name: str  # qualified; the executor routing key
    main_object: TaskObjectView
    inputs: list[TaskObjectView]
    output_object: TaskOutputView
    args: dict[str, str]
    issued_at: int  # Unix millis
    attempt: int = 1

    def to_value(self) -> dict:
        return {
            "taskId": self.task_id,
            "functionName": self.function_name,
            "mainObject": self.main_object.to_value(),
            "inputs": [i.to_value() for i in self.inputs],
            "outputObject": self.output_object.to_value(),
            "args": self.args,
            "issuedAt": self.issued_at,
            "attempt": self.attempt,
        }

    @classmethod
    def from_value(cls, v: dict) -> "Task":
        return cls(
            task_id=v["taskId"],
            function_name=v["functionName"],
            main_object=TaskObjectView.from_value(v["mainObject"]),
            inputs=[TaskObjectView.from_value(i) for i in v.get("inputs", [])],
            output_object=TaskOutputView.from_value(v["outputObject"]),
            args=v.get("args", {}),
            issued_at=v.get("issuedAt", 0),
            attempt=v.get("attempt", 1),
        )

    def with_attempt(self, attempt: int) -> "Task":
        return Task(
            task_id=f"{self.output_object.id}:{attempt}",
            function_name=self.function_name,
            main_object=self.main_object,
            inputs=self.inputs,
            output_object=self.output_object,
            args=self.args,
            issued_at=self.issued_at,
            attempt=attempt,
        )


@dataclass
class TaskCompletion:
    task_id: str
    output_object_id: str
    success: bool
    structured_output: "dict | None" = None
    error_detail: "str | None" = None
    completed_at: int = 0

    def __post_init__(self):
        if not self.success and not self.error_detail:
            self.error_detail = "unspecified failure"

    def to_value(self) -> dict:
        return {
            "taskId": self.task_id,
            "outputObjectId": self.output_object_id,
            "success": self.success,
            "structuredOutput": self.structured_output,
            "errorDetail": self.error_detail,
            "completedAt": self.completed_at,
        }

    @classmethod
    def from_value(cls, v: dict) -> "TaskCompletion":
        return cls(
            task_id=v["taskId"],
            output_object_id=v["outputObjectId"],
            success=v["success"],
            structured_output=v.get("structuredOutput"),
            error_detail=v.get("errorDetail"),
            completed_at=v.get("completedAt", 0),
        )
