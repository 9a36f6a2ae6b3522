# routes/convert_routes.py
# convert / dequantize commands

import click

from routes.route_helpers import exit_on_failure


def register_convert_commands(cli: click.Group, controller):
    """Register the tensor file commands on the command group."""

    @cli.command("convert")
    @click.option("--input", "input_path", required=True, help="HRMT tensor to convert")
    @click.option("--output", "output_path", required=True, help="HBFP file to write")
    @click.option("--group-size", default=32, show_default=True, type=int)
    @click.option("--mantissa-bits", default=8, show_default=True, type=int)
    @click.option("--axis", type=click.Choice(["token", "channel"]), default="token", show_default=True)
    def convert(input_path, output_path, group_size, mantissa_bits, axis):
        """FP16 tensor -> BFP groups; prints the round-trip error."""
        result = exit_on_failure(controller.convert(input_path, output_path, group_size, mantissa_bits, axis))
        tensor = result["tensor"]
        click.echo(f"groups:   {tensor.group_count}  (axis {tensor.axis.value}, g={group_size}, m={mantissa_bits})")
        for name, value in result["metrics"].items():
            click.echo(f"{name + ':':<9} {value:.6e}")

    @cli.command("dequantize")
    @click.option("--input", "input_path", required=True, help="HBFP file")
    @click.option("--output", "output_path", required=True, help="HRMT tensor to write")
    @click.option("--dtype", type=click.Choice(["f16", "f32", "f64"]), default="f64", show_default=True)
    def dequantize(input_path, output_path, dtype):
        """BFP groups -> dense tensor."""
        result = exit_on_failure(controller.dequantize(input_path, output_path, dtype))
        click.echo(f"shape: {tuple(result['shape'])}  groups: {result['groups']}")
