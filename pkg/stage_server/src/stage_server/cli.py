"""Command line for the reference stage server."""

from __future__ import annotations

import click

from .server import MODES, ServerConfig, StageServer
from .wire import STAGE_KINDS


@click.command()
@click.option("--listen", default="127.0.0.1:0", show_default=True,
              metavar="HOST:PORT", help="Endpoint to bind; port 0 picks one.")
@click.option("--kind", type=click.Choice(STAGE_KINDS), required=True,
              help="Stage kind this process serves.")
@click.option("--mode", type=click.Choice(MODES), default="heuristic",
              show_default=True)
@click.option("--trace", "trace_path", type=click.Path(exists=True,
              dir_okay=False), default=None,
              help="Trace file for oracle-passthrough mode.")
@click.option("--seed", type=int, default=0, show_default=True)
def main(listen, kind, mode, trace_path, seed):
    """Serve one stage kind over the wire protocol until interrupted."""
    try:
        cfg = ServerConfig(endpoint=listen, stage_kind=kind, mode=mode,
                           seed=seed, trace_path=trace_path)
        server = StageServer(cfg)
    except (ValueError, OSError) as e:
        raise click.ClickException(str(e))
    click.echo(f"serving {kind} ({mode}) on {server.endpoint}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()


if __name__ == "__main__":
    main()
