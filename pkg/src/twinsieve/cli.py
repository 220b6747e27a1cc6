"""twinsieve CLI: Typer app with all subcommands."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import typer

app = typer.Typer(
    name="twinsieve",
    help="Two-server private top-k retrieval over secret-shared embeddings.",
    no_args_is_help=True,
)

ConfigOption = typer.Option(None, "--config", "-c", help="Path to config.yaml.")


def _load(config_path: Optional[Path]):
    """Load config and configure logging from its log level."""
    from twinsieve.config import load_config

    config = load_config(config_path)
    logging.basicConfig(
        level=getattr(logging, config.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    return config


@contextmanager
def _cli_errors():
    from twinsieve.errors import TwinsieveError

    try:
        yield
    except (TwinsieveError, FileNotFoundError) as exc:
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(1)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        typer.echo(f"Expected a comma-separated list of integers, got {text!r}", err=True)
        raise typer.Exit(1)


# --- Offline commands ---

@app.command()
def deal(
    rows: int = typer.Option(..., "--rows", "-N", help="Number of documents N."),
    dim: int = typer.Option(..., "--dim", "-m", help="Embedding dimension m."),
    queries: Optional[int] = typer.Option(None, "--queries", "-q", help="Query sessions to provision."),
    out_dir: Path = typer.Option(Path("."), "--out-dir", "-o", help="Where to write server0/1.bundle."),
    seed: Optional[str] = typer.Option(None, "--seed", help="Deterministic seed (testing only)."),
    config_path: Optional[Path] = ConfigOption,
):
    """Generate both servers' offline bundles."""
    with _cli_errors():
        config = _load(config_path)
        from twinsieve.offline.dealer import dealer_generate

        count = queries or config.dealer.queries
        b0, b1 = dealer_generate(
            config.params.to_field(), rows, dim, count, seed or config.dealer.seed or None,
            out_dir=out_dir,
            c_m=config.protocol.c_m,
            step_m=config.protocol.step_m,
            xi=config.protocol.xi,
            max_bundle_bytes=config.dealer.max_bundle_bytes,
        )
        typer.echo(f"Bundle {b0.bundle_id}: {count} query slots for N={rows} m={dim}")
        for bundle in (b0, b1):
            typer.echo(f"  {str(bundle.path):40s} {bundle.path.stat().st_size:>14,} bytes")


@app.command()
def ingest(
    embeddings: Path = typer.Argument(..., help="Embeddings file (raw float64 + .shape sidecar, or .csv)."),
    bundles: Path = typer.Option(Path("."), "--bundles", "-b", help="Directory holding server0/1.bundle."),
    out_dir: Path = typer.Option(Path("."), "--out-dir", "-o", help="Where to write the share databases."),
    renormalize: Optional[bool] = typer.Option(None, "--renormalize/--strict", help="Renormalize rows."),
    seed: Optional[str] = typer.Option(None, "--seed", help="Deterministic seed (testing only)."),
    config_path: Optional[Path] = ConfigOption,
):
    """Secret-share an embeddings matrix into one database per server."""
    with _cli_errors():
        config = _load(config_path)
        from twinsieve.mpc.rng import SecureRandom
        from twinsieve.offline.bundle import bundle_load
        from twinsieve.offline.ingest import ingest as run_ingest
        from twinsieve.offline.ingest import read_embeddings

        matrix = read_embeddings(embeddings)
        b0 = bundle_load(bundles / "server0.bundle", 0)
        b1 = bundle_load(bundles / "server1.bundle", 1)
        db0, db1, meta = run_ingest(
            matrix, config.params.to_field(), SecureRandom(seed),
            (b0.doc_mask(), b1.doc_mask()),
            renormalize=config.ingest.renormalize if renormalize is None else renormalize,
            tolerance=config.ingest.norm_tolerance,
            truncate_bits=config.protocol.truncate_bits,
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        db0.save(out_dir / "server0.tsdb")
        db1.save(out_dir / "server1.tsdb")
        meta.save(out_dir / "public.yaml")
        typer.echo(f"Ingested N={meta.N} m={meta.m} into {out_dir}/server0.tsdb, server1.tsdb, public.yaml")


@app.command()
def convert(
    csv_path: Path = typer.Argument(..., help="Comma-separated embeddings, one row per document."),
    out: Path = typer.Argument(..., help="Raw float64 output file."),
):
    """Convert comma-separated embeddings to the raw matrix format."""
    with _cli_errors():
        from twinsieve.offline.ingest import convert_csv

        if not csv_path.exists():
            raise FileNotFoundError(f"CSV file not found: {csv_path}")
        N, m = convert_csv(csv_path, out)
        typer.echo(f"Wrote {N}x{m} matrix to {out}")


@app.command()
def synth(
    rows: int = typer.Option(..., "--rows", "-N", help="Number of documents."),
    dim: int = typer.Option(..., "--dim", "-m", help="Embedding dimension."),
    out: Path = typer.Option(Path("embeddings.f64"), "--out", "-o", help="Embeddings output file."),
    prompt_out: Path = typer.Option(Path("prompt.f64"), "--prompt-out", help="Prompt output file."),
    seed: int = typer.Option(7, "--seed", help="Generator seed."),
    layout: str = typer.Option("random", "--layout", help="random or uniform."),
    duplicates: int = typer.Option(0, "--duplicates", help="Extra copies of one document."),
):
    """Write a synthetic dataset and a matching prompt."""
    with _cli_errors():
        from twinsieve.harness.synth import synth_dataset
        from twinsieve.offline.ingest import write_embeddings

        data = synth_dataset(rows, dim, seed, layout=layout, duplicates=duplicates)
        write_embeddings(out, data.embeddings)
        prompt_out.write_bytes(data.prompt.astype("<f8").tobytes())
        typer.echo(f"Wrote {data.N}x{data.m} {layout} embeddings to {out} and prompt to {prompt_out}")
        if data.planted:
            typer.echo(f"  planted duplicates: {', '.join(str(i) for i in data.planted)}")


# --- Online commands ---

@app.command()
def serve(
    party: Optional[int] = typer.Option(None, "--party", "-p", help="Server party (0 or 1)."),
    config_path: Optional[Path] = ConfigOption,
):
    """Run one server until interrupted."""
    import asyncio

    with _cli_errors():
        config = _load(config_path)
        from twinsieve.server.daemon import run_server

        try:
            asyncio.run(run_server(config, party))
        except KeyboardInterrupt:
            typer.echo("Server stopped.")


@app.command()
def query(
    prompt: Path = typer.Argument(..., help="Prompt embedding (raw float64 or .csv/.txt)."),
    k: int = typer.Option(..., "--k", "-k", help="Minimum number of documents."),
    xi: Optional[int] = typer.Option(None, "--xi", help="Allowed overshoot; defaults to protocol.xi."),
    endpoint: Optional[list[str]] = typer.Option(None, "--endpoint", "-e", help="Server address (twice)."),
    params_file: Optional[Path] = typer.Option(None, "--params", help="Public metadata YAML."),
    as_json: bool = typer.Option(False, "--json", help="Print indices and metrics as JSON."),
    config_path: Optional[Path] = ConfigOption,
):
    """Retrieve between k and k+xi nearest documents for a prompt."""
    with _cli_errors():
        config = _load(config_path)
        from twinsieve.client.driver import retrieve
        from twinsieve.offline.ingest import PublicMetadata, read_vector

        metadata = PublicMetadata.load(params_file or config.client.params_file)
        result = retrieve(
            endpoint or config.client.endpoints,
            read_vector(prompt),
            k,
            config.protocol.xi if xi is None else xi,
            metadata,
            timeout=config.client.timeout,
        )
        if as_json:
            typer.echo(json.dumps({"indices": result.indices, **result.metrics()}, indent=2))
            return
        typer.echo(f"Retrieved {result.count} documents in {result.iterations} iterations ({result.rtt} RTT)")
        typer.echo(f"  indices: {' '.join(str(i) for i in result.indices)}")
        typer.echo(f"  stopped by: {result.stopped_by}")
        typer.echo(f"  upload:   {result.bytes_up:>12,} bytes")
        typer.echo(f"  download: {result.bytes_down:>12,} bytes")
        typer.echo(f"  leakage:  {result.leakage.physical_bits:.1f} bits")


@app.command()
def bench(
    sizes: str = typer.Option("1024,2048", "--sizes", help="Comma-separated N values."),
    k_primes: str = typer.Option("16,64", "--k-primes", help="Comma-separated k' values."),
    dim: int = typer.Option(64, "--dim", "-m", help="Embedding dimension."),
    repeats: Optional[int] = typer.Option(None, "--repeats", help="Queries per (N, k')."),
    mode: str = typer.Option("local", "--mode", help="local (in-process) or process."),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir", "-o", help="Working and report directory."),
    csv_out: Optional[Path] = typer.Option(None, "--csv", help="Also write rows as CSV."),
    as_json: bool = typer.Option(False, "--json", help="Print rows as JSON."),
    config_path: Optional[Path] = ConfigOption,
):
    """Run synthetic end-to-end queries and report recall, rounds and traffic."""
    with _cli_errors():
        config = _load(config_path)
        from twinsieve.harness.bench import run_benchmark

        directory = out_dir or Path(config.harness.output_dir)
        report = run_benchmark(
            _ints(sizes), _ints(k_primes), dim, directory,
            params=config.params.to_field(),
            repeats=repeats or config.harness.repeats,
            seed=config.harness.seed,
            mode=mode,
            workers=config.server.workers,
        )
        if as_json:
            typer.echo(json.dumps(report.as_dict(), indent=2))
        else:
            typer.echo(report.table())
            typer.echo("")
            typer.echo(report.as_text())
        if csv_out is not None:
            typer.echo(f"Rows written to {report.write_csv(csv_out)}")


@app.command()
def stats(
    url: str = typer.Option("http://127.0.0.1:7600", "--url", help="Server stats endpoint."),
    session: Optional[str] = typer.Option(None, "--session", help="Show one session by hex query id."),
):
    """Fetch a running server's stats endpoint."""
    import httpx

    path = f"/sessions/{session}" if session else "/stats"
    try:
        resp = httpx.get(url.rstrip("/") + path, timeout=10.0)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        typer.echo(f"Error: stats request failed: {exc}", err=True)
        raise typer.Exit(1)
    data = resp.json()
    if session:
        typer.echo(json.dumps(data, indent=2))
        return
    typer.echo(f"Server {data['party']}: N={data['N']} m={data['m']} bundle={data['bundle_id']}")
    typer.echo(f"  capacity:  {data['capacity']}")
    typer.echo(f"  consumed:  {data['consumed']}")
    typer.echo(f"  remaining: {data['remaining']}")
    typer.echo(f"  live sessions: {data['live_sessions']}")
    for phase, count in sorted(data["sessions_by_phase"].items()):
        typer.echo(f"    {phase:12s} {count}")


# --- Ledger commands ---

ledger_app = typer.Typer(help="Material ledger management commands.")
app.add_typer(ledger_app, name="ledger")


@ledger_app.command("stats")
def ledger_stats(
    path: Optional[Path] = typer.Option(None, "--path", help="Ledger file; defaults to server.ledger."),
    config_path: Optional[Path] = ConfigOption,
):
    """Show row counts for the ledger tables."""
    with _cli_errors():
        config = _load(config_path)
        from twinsieve.ledger import db_stats, get_db, init_db

        conn = get_db(path or config.server.ledger)
        init_db(conn)
        typer.echo("Table row counts:")
        for table, count in db_stats(conn).items():
            status = f"{count}" if count >= 0 else "missing"
            typer.echo(f"  {table:30s} {status}")
        conn.close()


@ledger_app.command("recover")
def ledger_recover(
    path: Optional[Path] = typer.Option(None, "--path", help="Ledger file; defaults to server.ledger."),
    config_path: Optional[Path] = ConfigOption,
):
    """Close session records left open by a stopped server."""
    with _cli_errors():
        config = _load(config_path)
        from twinsieve.ledger import get_db, init_db, recover_db

        conn = get_db(path or config.server.ledger)
        init_db(conn)
        actions = recover_db(conn)
        for action in actions:
            typer.echo(f"  {action}")
        typer.echo(f"Recovered {len(actions)} open session(s).")
        conn.close()
