"""Post-training quantization of a toy video diffusion transformer.

Modules:
    quant_core: min-max quantization, grouping schemes, incoherence.
    balance: channel scaling, Hadamard rotation, static-dynamic balance.
    qgemm: reference integer GEMM and checkpoint size accounting.
    toydit: the seeded toy model, DDIM sampling and activation traces.
    pipeline: calibration and quantized execution of the toy model.
    sensitivity: proxy metrics, metric heatmap, mixed-precision plans.
    trace_io: trace archive, checkpoint and calibration formats.
    cli: the ``dtq`` command-line tool.
"""

__version__ = "0.1.0"
