"""Configuration loading and validation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from twinsieve.errors import ConfigurationError
from twinsieve.mpc.field import DEFAULT_PRIME, FieldParams


@dataclass
class FieldConfig:
    p: int = DEFAULT_PRIME
    f: int = 32
    f_doc: int = 30
    n: int = 64
    lam: int = 128

    def to_field(self) -> FieldParams:
        return FieldParams(p=self.p, f=self.f, n=self.n, f_doc=self.f_doc, lam=self.lam)


@dataclass
class ProtocolConfig:
    step_m: int = 20
    c_m: int = 1024
    xi: int = 16
    truncate_bits: int = 0


@dataclass
class ServerConfig:
    party: int = 0
    listen: str = "127.0.0.1:7400"
    peer: str = "127.0.0.1:7500"
    database: str = "server0.tsdb"
    bundle: str = "server0.bundle"
    ledger: str = "server0.ledger.db"
    stats_listen: str = ""
    workers: int = 4
    chunk_size: int = 4096
    peer_timeout: float = 60.0
    connect_retries: int = 50


@dataclass
class ClientConfig:
    endpoints: list[str] = field(default_factory=lambda: ["127.0.0.1:7400", "127.0.0.1:7401"])
    params_file: str = "public.yaml"
    timeout: float = 300.0


@dataclass
class DealerConfig:
    queries: int = 8
    seed: str = ""
    max_bundle_bytes: int = 8 * 2**30


@dataclass
class IngestConfig:
    renormalize: bool = False
    norm_tolerance: float = 1e-3


@dataclass
class HarnessConfig:
    seed: int = 7
    repeats: int = 3
    output_dir: str = "reports"


@dataclass
class Config:
    params: FieldConfig = field(default_factory=FieldConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    dealer: DealerConfig = field(default_factory=DealerConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    log_level: str = "INFO"

    def server_config(self, party: int | None = None) -> ServerConfig:
        """Runtime server view; an explicit party overrides the file value."""
        if party is None:
            return self.server
        if party not in (0, 1):
            raise ConfigurationError(f"server party must be 0 or 1, got {party}")
        return replace(self.server, party=party)

    def validate(self) -> Config:
        """Check cross-field constraints; returns self for chaining."""
        self.params.to_field()
        if self.protocol.step_m < 1:
            raise ConfigurationError(f"step_m must be at least 1, got {self.protocol.step_m}")
        if self.protocol.c_m < 1:
            raise ConfigurationError(f"c_m must be at least 1, got {self.protocol.c_m}")
        if self.protocol.xi < 0:
            raise ConfigurationError(f"xi must be non-negative, got {self.protocol.xi}")
        if self.server.party not in (0, 1):
            raise ConfigurationError(f"server party must be 0 or 1, got {self.server.party}")
        if self.server.workers < 1:
            raise ConfigurationError("server needs at least one worker")
        if self.dealer.queries < 1:
            raise ConfigurationError("dealer must provision at least one query")
        return self


def _dict_to_config(data: dict) -> Config:
    """Convert a raw dict to a Config dataclass, handling nested structures."""
    from dacite import Config as DaciteConfig
    from dacite import DaciteError, from_dict

    try:
        return from_dict(
            data_class=Config,
            data=data,
            config=DaciteConfig(strict=True, type_hooks={float: float}),
        )
    except DaciteError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc


def _find_config_file() -> Path | None:
    """Search for config file in standard locations."""
    env_path = os.environ.get("TWINSIEVE_CONFIG")
    if env_path:
        p = Path(env_path)
        if p.exists():
            return p

    local = Path("config.yaml")
    if local.exists():
        return local

    xdg = Path.home() / ".config" / "twinsieve" / "config.yaml"
    if xdg.exists():
        return xdg

    return None


def _load_dotenv() -> None:
    """Load .env file from current directory if it exists."""
    env_path = Path(".env")
    if not env_path.exists():
        return
    for line in env_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        # Don't overwrite already-set env vars
        if key not in os.environ:
            os.environ[key] = value.strip()


def _apply_env_overrides(config: Config) -> Config:
    """Override config values from environment variables.

    Supports:
        TWINSIEVE_PARTY      -> config.server.party
        TWINSIEVE_LISTEN     -> config.server.listen
        TWINSIEVE_PEER       -> config.server.peer
        TWINSIEVE_LOG_LEVEL  -> config.log_level
    """
    if os.environ.get("TWINSIEVE_PARTY"):
        try:
            config.server.party = int(os.environ["TWINSIEVE_PARTY"])
        except ValueError as exc:
            raise ConfigurationError(f"TWINSIEVE_PARTY is not an integer: {exc}") from exc
    if os.environ.get("TWINSIEVE_LISTEN"):
        config.server.listen = os.environ["TWINSIEVE_LISTEN"]
    if os.environ.get("TWINSIEVE_PEER"):
        config.server.peer = os.environ["TWINSIEVE_PEER"]
    if os.environ.get("TWINSIEVE_LOG_LEVEL"):
        config.log_level = os.environ["TWINSIEVE_LOG_LEVEL"]
    return config


def load_config(path: str | Path | None = None) -> Config:
    """Load configuration from YAML file, merging with defaults.

    Also loads .env file and applies environment variable overrides.
    """
    _load_dotenv()

    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
    else:
        config_path = _find_config_file()

    if config_path is None:
        config = Config()
    else:
        with open(config_path) as f:
            raw = yaml.safe_load(f) or {}
        config = _dict_to_config(raw)

    return _apply_env_overrides(config).validate()


def parse_address(address: str) -> tuple[str, int]:
    """Split ``host:port``; a bare port binds loopback."""
    host, sep, port = address.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", address
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as exc:
        raise ConfigurationError(f"invalid address {address!r}") from exc
