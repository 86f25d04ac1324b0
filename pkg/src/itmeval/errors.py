class SchemaError(ValueError):
    """Input file violates its schema. ``problems`` holds (line number, message)."""

    def __init__(self, problems: list[tuple[int, str]], path: str = ""):
        self.problems = problems
        self.path = path
        where = f"{path}: " if path else ""
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        super().__init__(f"{where}{lines}{more}")


class ClientError(RuntimeError):
    """An external service client (LLM, scorer, image model) failed."""

    def __init__(self, client: str, message: str):
        super().__init__(f"{client}: {message}")
        self.client = client
        self.message = message
