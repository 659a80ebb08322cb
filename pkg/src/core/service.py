"""
HTTP deployment of the enforcer: check, health and reload endpoints under /v1,
plus an optional server-side per-trace prefix table for thin clients.
"""
import logging
import threading
import time
from typing import Callable, Dict, List, Optional, Tuple

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from core.enforcer import EnforceConfig, InvocationContext, check_invocation
from core.errors import RepositoryError
from core.policy_store import PolicyRepository


logger = logging.getLogger(__name__)


class CheckRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    agent_role: str
    tool_name: str = Field(min_length=1)
    tool_input: str = ""
    thoughts: str = ""
    input_tokens: int = Field(default=0, ge=0)
    output_tokens: int = Field(default=0, ge=0)
    timestamp: Optional[int] = Field(default=None, ge=0)
    idle_ms: int = Field(default=0, ge=0)
    processing_ms: int = Field(default=0, ge=0)
    prior_tools: Optional[List[str]] = None
    trace_id: Optional[str] = None


class ViolationModel(BaseModel):
    kind: str
    detail: str
    rule_index: Optional[int] = None


class VerdictResponse(BaseModel):
    decision: str
    violations: List[ViolationModel] = []


class TracePrefixTable:
    """trace_id -> tools already invoked, forgotten after `ttl_s` without activity."""

    def __init__(self, ttl_s: float = 3600.0, clock: Callable[[], float] = time.monotonic) -> None:
        self.ttl_s = ttl_s
        self._clock = clock
        self._entries: Dict[str, Tuple[float, List[str]]] = {}
        self._lock = threading.Lock()

    def get(self, trace_id: str) -> List[str]:
        with self._lock:
            self._expire()
            entry = self._entries.get(trace_id)
            return list(entry[1]) if entry else []

    def record(self, trace_id: str, tools: List[str]) -> None:
        with self._lock:
            self._entries[trace_id] = (self._clock(), list(tools))

    def __len__(self) -> int:
        with self._lock:
            self._expire()
            return len(self._entries)

    def _expire(self) -> None:
        now = self._clock()
        stale = [k for k, (seen, _) in self._entries.items() if now - seen > self.ttl_s]
        for k in stale:
            del self._entries[k]


def create_app(
    repo: PolicyRepository,
    cfg: Optional[EnforceConfig] = None,
    fail_mode: str = "closed",
    prefix_table: Optional[TracePrefixTable] = None,
) -> FastAPI:
    cfg = cfg or EnforceConfig()
    table = prefix_table if prefix_table is not None else TracePrefixTable()
    app = FastAPI(title="Tool-call policy enforcer", version="1.0")
    app.state.repo = repo
    app.state.prefix_table = table

    @app.get("/v1/health")
    def health() -> Dict[str, object]:
        return {"status": "ok", "policies": len(repo.snapshot()), "fail_mode": fail_mode}

    @app.post("/v1/reload")
    def reload() -> JSONResponse:
        try:
            snap = repo.reload()
        except RepositoryError as exc:
            return JSONResponse(status_code=500, content={"status": "error", "error": str(exc), "policies": len(repo.snapshot())})
        return JSONResponse(status_code=200, content={"status": "ok", "policies": len(snap)})

    @app.post("/v1/check", response_model=VerdictResponse)
    def check(req: CheckRequest):
        try:
            if req.prior_tools is not None:
                prior = list(req.prior_tools)
            elif req.trace_id is not None:
                prior = table.get(req.trace_id)
            else:
                prior = []
            ctx = InvocationContext(
                agent_role=req.agent_role,
                tool_name=req.tool_name,
                tool_input=req.tool_input,
                thoughts=req.thoughts,
                input_tokens=req.input_tokens,
                output_tokens=req.output_tokens,
                timestamp=req.timestamp if req.timestamp is not None else int(time.time() * 1000),
                idle_ms=req.idle_ms,
                processing_ms=req.processing_ms,
                prior_tools=tuple(prior),
            )
            verdict = check_invocation(ctx, repo.snapshot(), cfg)
            if req.trace_id is not None and verdict.decision != "terminate":
                table.record(req.trace_id, prior + [req.tool_name])
            return verdict.to_dict()
        except Exception as exc:
            logger.exception("Check failed for %s/%s", req.agent_role, req.tool_name)
            decision = "allow" if fail_mode == "open" else "terminate"
            if fail_mode == "open":
                logger.warning("Fail-open: allowing %s after internal error", req.tool_name)
            return JSONResponse(
                status_code=500,
                content={"decision": decision, "violations": [], "error": f"{type(exc).__name__}: {exc}"},
            )

    return app


def parse_bind(bind: str) -> Tuple[str, int]:
    host, sep, port = bind.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bind address must be host:port, got {bind!r}")
    return host or "127.0.0.1", int(port)


def serve(
    bind: str,
    repo: PolicyRepository,
    cfg: Optional[EnforceConfig] = None,
    fail_mode: str = "closed",
    prefix_ttl_s: float = 3600.0,
) -> None:
    import uvicorn

    host, port = parse_bind(bind)
    app = create_app(repo, cfg, fail_mode, TracePrefixTable(prefix_ttl_s))
    logger.info("Serving %d policies on %s:%d (fail %s)", len(repo.snapshot()), host, port, fail_mode)
    uvicorn.run(app, host=host, port=port, log_level="info")
