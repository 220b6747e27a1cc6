"""Read-only HTTP stats endpoint for one server."""

from __future__ import annotations

from fastapi import APIRouter, FastAPI, HTTPException

from twinsieve import __version__
from twinsieve.server.protocol import ProtocolServer


def create_stats_app(protocol: ProtocolServer) -> FastAPI:
    """Build the FastAPI app exposing health, capacity and per-session meters."""
    app = FastAPI(title=f"twinsieve server {protocol.party}", version=__version__)
    router = APIRouter(tags=["stats"])

    @router.get("/health")
    async def health():
        return {"status": "ok", "party": protocol.party, "peer_connected": not protocol.peer.closed}

    @router.get("/stats")
    async def stats():
        return protocol.stats()

    @router.get("/sessions")
    async def list_sessions(limit: int = 50):
        live = [s.summary() for s in list(protocol.sessions.values())[-limit:]]
        return {"sessions": live}

    @router.get("/sessions/{query_id}")
    async def get_session(query_id: str):
        try:
            key = bytes.fromhex(query_id)
        except ValueError:
            raise HTTPException(400, f"Query id must be hex: {query_id}")
        session = protocol.sessions.get(key)
        if session is not None:
            return session.summary()
        if protocol.session_log is not None:
            row = protocol.session_log.get(query_id.lower())
            if row is not None:
                return row
        raise HTTPException(404, f"Session {query_id} not found")

    app.include_router(router)
    return app
