"""
The .gvq container and LUT decode
=================================

A quantized layer serializes to a compact little-endian container.  The
decoder rebuilds the weights bit-for-bit; INT8 codebooks decode with one
small table lookup per vector coordinate.
"""
import numpy as np

from gptvq import HessianContext, VQConfig, quantize_layer
from gptvq.vqformat import (
    bench_decode,
    build_lut,
    container_nbytes,
    decode_container,
    pack_indices,
    serialize,
    unpack_indices,
)

print("pack [63,0,1,2] @6 bits:", pack_indices([63, 0, 1, 2], 6).hex())
print("unpack back            :", unpack_indices(bytes.fromhex("3f1008"), 4, 6).tolist())

rng = np.random.default_rng(4)
W = rng.standard_normal((256, 1024)).astype(np.float32)
cfg = VQConfig(d=2, bits_per_index=6, group_size=8192)
ql = quantize_layer(W, HessianContext.identity(1024, 0.01), cfg)
blob = serialize(ql)
print(f"container {len(blob)} bytes (predicted {container_nbytes(cfg, 256, 1024)}),"
      f" {8 * len(blob) / W.size:.3f} bits per weight on disk")
print("bit-exact decode:", decode_container(blob).tobytes() == ql.reconstruct().tobytes())

lut = build_lut(ql.codebooks[0][0], hardware=True)
print("LUT tables:", lut.tables.shape, lut.tables.dtype)

r = bench_decode(blob, 5)
print(f"decode throughput {r['elements_per_second'] / 1e6:.1f} M weights/s")
