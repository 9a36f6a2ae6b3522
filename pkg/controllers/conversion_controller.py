# controllers/conversion_controller.py
# Tensor file conversion and the analytical EMA / storage queries behind the command line

from typing import Dict, Optional, Sequence

from loguru import logger

from models.dataflow import GemmShape, choose_policy, ema_sweep
from models.errors import HarmoniaError, LayoutError
from models.grouping import group_tensor
from models.kvcache import KvPolicy, storage_report
from models.numerics import BfpConfig, GroupAxis, quantization_error, to_half_array
from views.file_formats import read_bfp, read_tensor, write_bfp, write_tensor


class ConversionController:
    """Every method returns {'success': True, ...} or {'success': False, 'error': ..., 'exit_code': ...}."""

    @staticmethod
    def _failure(e: HarmoniaError) -> Dict:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return {"success": False, "error": str(e), "exit_code": e.exit_code}

    def convert(self, input_path: str, output_path: str, group_size: int = 32,
                mantissa_bits: int = 8, axis: str = "token") -> Dict:
        """
        Read an HRMT tensor, convert it to BFP and write an HBFP file.
        Tensors of more than two dimensions are flattened to (tokens, last dim).
        """
        try:
            cfg = BfpConfig(group_size, mantissa_bits)
            values = read_tensor(input_path)
            if values.ndim == 1:
                values = values.reshape(1, -1)
            elif values.ndim > 2:
                values = values.reshape(-1, values.shape[-1])
            elif values.ndim == 0:
                raise LayoutError("cannot convert a scalar tensor")
            halves = to_half_array(values)
            tensor = group_tensor(halves, GroupAxis.parse(axis), cfg)
            write_bfp(output_path, tensor)
            metrics = quantization_error(halves, cfg, tensor.axis)
            logger.info(f"✅ Converted {halves.shape} into {tensor.group_count} groups")
            return {"success": True, "tensor": tensor, "metrics": metrics}
        except HarmoniaError as e:
            return self._failure(e)

    def dequantize(self, input_path: str, output_path: str, dtype: str = "f64") -> Dict:
        try:
            tensor = read_bfp(input_path)
            values = tensor.dequantize()
            write_tensor(output_path, values, dtype)
            return {"success": True, "shape": values.shape, "groups": tensor.group_count}
        except HarmoniaError as e:
            return self._failure(e)

    def ema(self, M: int, K: int, N: int, tile_m: int, tile_n: int, bits_a: float = 16,
            bits_b: float = 16, policy: str = "auto", include_output: bool = False) -> Dict:
        try:
            report = choose_policy(GemmShape(M, K, N, tile_m, tile_n, bits_a, bits_b), policy, include_output)
            return {"success": True, "report": report}
        except HarmoniaError as e:
            return self._failure(e)

    def ema_sweep(self, K: int, N: int, tile_m: int, tile_n: int, token_counts: Sequence[int],
                  bits_a: float = 16, bits_b: float = 16) -> Dict:
        try:
            return {"success": True, "table": ema_sweep(K, N, tile_m, tile_n, token_counts, bits_a, bits_b)}
        except HarmoniaError as e:
            return self._failure(e)

    def storage(self, tokens: int, channels: int, policy: Optional[KvPolicy] = None) -> Dict:
        try:
            return {"success": True, "report": storage_report(tokens, channels, policy)}
        except HarmoniaError as e:
            return self._failure(e)
