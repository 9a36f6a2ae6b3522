# routes/ema_routes.py
# ema command: column-first vs row-first external memory traffic of a tiled GEMM

import click

from routes.route_helpers import exit_on_failure, parse_int_list
from views.report_views import render_ema, write_json, write_table


def register_ema_commands(cli: click.Group, controller):

    @cli.command("ema")
    @click.option("--M", "M", type=int, help="rows of A (tokens); not needed with --sweep-m")
    @click.option("--K", "K", type=int, required=True)
    @click.option("--N", "N", type=int, required=True)
    @click.option("--tile-m", type=int, required=True)
    @click.option("--tile-n", type=int, required=True)
    @click.option("--bits-a", type=float, default=16.0, show_default=True)
    @click.option("--bits-b", type=float, default=16.0, show_default=True)
    @click.option("--policy", type=click.Choice(["auto", "col", "row"]), default="auto", show_default=True)
    @click.option("--include-output", is_flag=True, help="count the M x N write-back")
    @click.option("--json", "json_path", help="also write the report as JSON")
    @click.option("--sweep-m", help="comma-separated token counts; writes a CSV with --json's path or prints it")
    def ema(M, K, N, tile_m, tile_n, bits_a, bits_b, policy, include_output, json_path, sweep_m):
        """Both EMA costs, the chosen policy and the access energy."""
        if sweep_m:
            result = exit_on_failure(controller.ema_sweep(K, N, tile_m, tile_n, parse_int_list(sweep_m), bits_a, bits_b))
            table = result["table"]
            if json_path:
                write_table(json_path, table)
            click.echo(table.to_string(index=False))
            return
        if M is None:
            raise click.UsageError("--M is required unless --sweep-m is given")
        result = exit_on_failure(controller.ema(M, K, N, tile_m, tile_n, bits_a, bits_b, policy, include_output))
        report = result["report"]
        click.echo(render_ema(report))
        if json_path:
            write_json(json_path, report.to_dict())
